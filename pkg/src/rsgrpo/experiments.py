"""Dataset preparation and multi-seed mode comparisons."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from rsgrpo.config import RunConfig
from rsgrpo.env import Episode, generate_dataset, generate_splits
from rsgrpo.grammar import Vocabulary
from rsgrpo.trainer import Mode, run_sft, train

ABLATION_COLUMNS = ("seed", "mode", "post_sft_acc", "post_sft_f1", "eval_acc", "eval_f1", "rl_episodes_kept")

# eval ids start here so they never collide with training ids
EVAL_ID_OFFSET = 1_000_000


def data_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


def eval_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 4])


def make_datasets(config: RunConfig) -> tuple[list[Episode], list[Episode], list[Episode]]:
    """(SFT, RL, eval) episodes for the config's seed."""
    sft, rl = generate_splits(config.data, data_rng(config.seed), config.split_ratio)
    ev = generate_dataset(config.eval_spec, eval_rng(config.seed), start_id=EVAL_ID_OFFSET)
    return sft, rl, ev


def ablate(
    config: RunConfig,
    sft: Sequence[Episode],
    rl: Sequence[Episode],
    ev: Sequence[Episode],
    vocab: Vocabulary,
    seeds: Sequence[int],
    modes: Sequence[Mode] = tuple(Mode),
) -> list[dict]:
    """Train every mode under every seed on the same data; SFT is shared per (seed, layout)."""
    rows = []
    for seed in seeds:
        cache = {}
        for mode in modes:
            optim = dataclasses.replace(config.optim, mode=mode, seed=seed)
            if mode.layout not in cache:
                cache[mode.layout] = run_sft(optim, sft, vocab, mode.layout)
            result = train(optim, sft, rl, ev, vocab, sft_policy=cache[mode.layout])
            kept = len(rl) if result.curriculum is None else sum(not e.dropped for e in result.curriculum.entries)
            rows.append({
                "seed": seed,
                "mode": mode.value,
                "post_sft_acc": result.post_sft_eval.accuracy,
                "post_sft_f1": result.post_sft_eval.f1,
                "eval_acc": result.final_eval.accuracy,
                "eval_f1": result.final_eval.f1,
                "rl_episodes_kept": kept,
            })
    return rows


def mode_means(rows: Sequence[dict], key: str) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for row in rows:
        out.setdefault(row["mode"], []).append(row[key])
    return {mode: float(np.mean(v)) for mode, v in out.items()}
