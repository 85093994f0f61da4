"""Command-line entry point: gen-data, train, ablate, eval, gradcheck.

Exit codes: 0 success, 1 usage/config/input error, 2 check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from rsgrpo.config import ConfigError, RunConfig, load_run_config
from rsgrpo.env import read_dataset, write_dataset
from rsgrpo.evaluation import evaluate_with_audit, write_audit
from rsgrpo.experiments import ABLATION_COLUMNS, ablate, make_datasets, mode_means
from rsgrpo.gradcheck import run_gradcheck
from rsgrpo.policy import ToyPolicy
from rsgrpo.trainer import METRIC_COLUMNS, Mode, run_sft, train

log = logging.getLogger("rsgrpo")

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2

SPLIT_FILES = {"sft": "sft.jsonl", "rl": "rl.jsonl", "eval": "eval.jsonl"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; 2 is reserved for failed checks here
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--workers", type=int, help="worker processes for rollouts and eval (1 = reference mode)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rsgrpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write SFT / RL / eval JSONL datasets")
    _add_config_args(p)
    p.add_argument("--out", help="output directory (default: data_dir)")

    p = sub.add_parser("train", help="SFT cold start then RL in one mode")
    _add_config_args(p)
    p.add_argument("--data", help="dataset directory (default: data_dir)")
    p.add_argument("--out", help="run directory (default: out_dir)")

    p = sub.add_parser("ablate", help="all modes under shared seeds")
    _add_config_args(p)
    p.add_argument("--data", help="dataset directory (default: data_dir)")
    p.add_argument("--out", help="output directory (default: out_dir)")
    p.add_argument("--modes", default=",".join(m.value for m in Mode), help="comma-separated modes")

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="JSONL dataset file")
    p.add_argument("--out", required=True, help="directory for eval.json and audit.jsonl")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--configs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    return load_run_config(args.config, overrides)


def _load_splits(data_dir: Path, config: RunConfig, names: Sequence[str]) -> dict:
    out = {}
    for name in names:
        path = data_dir / SPLIT_FILES[name]
        if not path.exists():
            raise UsageError(f"missing dataset file {path}; run gen-data first")
        _, vocab, episodes = read_dataset(path)
        if vocab != config.data.vocab:
            raise UsageError(f"{path}: vocabulary (size {vocab.size}) does not match the config (size {config.data.vocab_size})")
        out[name] = episodes
    return out


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                             for k in columns})
    tmp.replace(path)


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _resolve(args)
    out = Path(args.out or config.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    sft, rl, ev = make_datasets(config)
    write_dataset(out / SPLIT_FILES["sft"], sft, config.data, "sft")
    write_dataset(out / SPLIT_FILES["rl"], rl, config.data, "rl")
    write_dataset(out / SPLIT_FILES["eval"], ev, config.eval_spec, "eval")
    config.write_snapshot(out / "config.txt")
    print(f"wrote {len(sft)} sft, {len(rl)} rl, {len(ev)} eval episodes to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve(args)
    splits = _load_splits(Path(args.data or config.data_dir), config, ("sft", "rl", "eval"))
    out = Path(args.out or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write_snapshot(out / "config.txt")
    vocab = config.data.vocab
    optim = config.optim

    start = time.perf_counter()
    sft_policy = run_sft(optim, splits["sft"], vocab, optim.mode.layout)
    sft_policy.save(out / "sft.json", {"stage": "sft"})

    def checkpoint(epoch: int, policy: ToyPolicy) -> None:
        policy.save(out / "last.json", {"stage": "rl", "epoch": epoch + 1})

    result = train(optim, splits["sft"], splits["rl"], splits["eval"], vocab,
                   sft_policy=sft_policy, on_epoch=checkpoint)
    result.policy.save(out / "final.json", {"stage": "final", "epochs": optim.epochs})
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, result.metrics)
    if result.curriculum is not None:
        with open(out / "curriculum.jsonl", "w") as f:
            for rec in result.curriculum.to_records():
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    if result.final_eval is not None:
        _write_json(out / "eval.json", result.final_eval.to_dict())
    log.info("train finished in %.1fs", time.perf_counter() - start)
    post = result.post_sft_eval.accuracy if result.post_sft_eval else float("nan")
    final = result.final_eval.accuracy if result.final_eval else float("nan")
    print(f"mode={optim.mode.value} post-SFT acc={post:.4f} final acc={final:.4f} -> {out}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _resolve(args)
    try:
        modes = [Mode(m.strip()) for m in args.modes.split(",") if m.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    splits = _load_splits(Path(args.data or config.data_dir), config, ("sft", "rl", "eval"))
    out = Path(args.out or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write_snapshot(out / "config.txt")
    seeds = [config.seed + i for i in range(config.seeds)]
    rows = ablate(config, splits["sft"], splits["rl"], splits["eval"], config.data.vocab, seeds, modes)
    _write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows)
    for mode, f1 in mode_means(rows, "eval_f1").items():
        print(f"{mode:>18s}  mean eval_f1 {f1:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt, dataset = Path(args.checkpoint), Path(args.dataset)
    for path in (ckpt, dataset):
        if not path.exists():
            raise UsageError(f"no such file: {path}")
    policy = ToyPolicy.load(ckpt)
    _, vocab, episodes = read_dataset(dataset)
    if vocab != policy.vocab:
        raise UsageError("checkpoint and dataset vocabularies differ")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(args.workers) as pool:
            result, audits = evaluate_with_audit(policy, episodes, vocab, pool, args.workers)
    else:
        result, audits = evaluate_with_audit(policy, episodes, vocab)
    _write_json(out / "eval.json", result.to_dict())
    write_audit(out / "audit.jsonl", audits)
    print(f"accuracy={result.accuracy:.4f} f1={result.f1:.4f} on {len(episodes)} episodes")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.configs < 1:
        raise UsageError("--configs must be >= 1")
    start = time.perf_counter()
    report = run_gradcheck(args.configs, args.seed, args.tolerance, corrupt=args.corrupt_gradient)
    for case in report.cases:
        print(f"config {case.index:3d} [{case.layout:12s}] log-prob rel err {case.log_prob_error:.2e}  "
              f"loss rel err {case.loss_error:.2e}  clipped tokens {case.clip_fraction:.2f}")
    summary = report.summary()
    summary["seconds"] = round(time.perf_counter() - start, 2)
    print(json.dumps(summary, indent=2))
    if not report.passed:
        worst = max(report.max_log_prob_error, report.max_loss_error)
        print(f"gradcheck FAILED: worst relative error {worst:.3e}, "
              f"clipped groups {report.clipped_group_fraction:.2f}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
