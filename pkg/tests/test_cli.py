from __future__ import annotations

import csv
import json

import pytest

from rsgrpo.cli import main
from rsgrpo.policy import ToyPolicy

SMALL = ["--set", "episodes=200", "--set", "eval_episodes=50", "--set", "epochs=1"]


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", *SMALL, "--out", str(out)]) == 0
    return out


def test_gen_data_writes_split_files_reproducibly(data_dir, tmp_path):
    lines = {name: (data_dir / name).read_text().splitlines() for name in ("sft.jsonl", "rl.jsonl", "eval.jsonl")}
    # one header line each; 8:2 split of 200 episodes; 50 eval episodes
    assert [len(v) - 1 for v in lines.values()] == [160, 40, 50]
    again = tmp_path / "again"
    assert main(["gen-data", *SMALL, "--out", str(again)]) == 0
    for name in ("sft.jsonl", "rl.jsonl", "eval.jsonl", "config.txt"):
        assert (data_dir / name).read_bytes() == (again / name).read_bytes()


def test_gen_data_rejects_invalid_spec(tmp_path, capsys):
    assert main(["gen-data", "--set", "min_docs=4", "--set", "max_docs=2", "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_train_writes_artifacts(data_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", *SMALL, "--data", str(data_dir), "--out", str(run)]) == 0
    for name in ("config.txt", "sft.json", "last.json", "final.json", "metrics.csv", "eval.json", "curriculum.jsonl"):
        assert (run / name).exists(), name
    rows = list(csv.DictReader(open(run / "metrics.csv")))
    assert rows[0]["step"] == "0" and rows[0]["loss"] == "" and rows[-1]["eval_acc"] != ""
    assert json.loads((run / "last.json").read_text())["meta"]["epoch"] == 1


def test_zero_learning_rate_checkpoint_equals_sft(data_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", *SMALL, "--set", "lr=0", "--data", str(data_dir), "--out", str(run)]) == 0
    sft = ToyPolicy.load(run / "sft.json")
    final = ToyPolicy.load(run / "final.json")
    assert (sft.theta == final.theta).all()


def test_train_input_errors(data_dir, tmp_path):
    assert main(["train", *SMALL, "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 1
    assert main(["train", *SMALL, "--set", "vocab_size=30", "--data", str(data_dir), "--out", str(tmp_path / "r")]) == 1
    assert main(["train", "--set", "bogus=1"]) == 1
    assert main(["train", "--config", str(tmp_path / "nope.txt")]) == 1


def test_eval_command(data_dir, tmp_path):
    run = tmp_path / "run"
    main(["train", *SMALL, "--data", str(data_dir), "--out", str(run)])
    out = tmp_path / "ev"
    args = ["eval", "--checkpoint", str(run / "final.json"), "--dataset", str(data_dir / "eval.jsonl"), "--out", str(out)]
    assert main(args) == 0
    result = json.loads((out / "eval.json").read_text())
    assert result == json.loads((run / "eval.json").read_text())
    assert len((out / "audit.jsonl").read_text().splitlines()) == 50
    assert main(args[:-2] + ["--out", str(tmp_path / "ev2"), "--workers", "2"]) == 0
    assert json.loads((tmp_path / "ev2" / "eval.json").read_text()) == result


def test_eval_input_errors(data_dir, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.json"), "--dataset", str(data_dir / "eval.jsonl"),
                 "--out", str(tmp_path)]) == 1
    other = tmp_path / "other"
    main(["gen-data", *SMALL, "--set", "vocab_size=30", "--out", str(other)])
    run = tmp_path / "run"
    main(["train", *SMALL, "--set", "vocab_size=30", "--data", str(other), "--out", str(run)])
    assert main(["eval", "--checkpoint", str(run / "final.json"), "--dataset", str(data_dir / "eval.jsonl"),
                 "--out", str(tmp_path / "e")]) == 1


def test_ablate_rows(data_dir, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", *SMALL, "--set", "seeds=2", "--data", str(data_dir), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert len(rows) == 4 * 2
    by_mode = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append(r["seed"])
    assert len(by_mode) == 4 and all(seeds == ["0", "1"] for seeds in by_mode.values())
    assert main(["ablate", *SMALL, "--modes", "rs-grpo,bogus", "--data", str(data_dir), "--out", str(out)]) == 1


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--configs", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count("config ") == 3 and '"passed": true' in out
    assert main(["gradcheck", "--configs", "3", "--corrupt-gradient", "0.01"]) == 2
    assert "worst relative error" in capsys.readouterr().err


def test_usage_errors_exit_one():
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["gradcheck", "--configs", "zero"]) == 1
    assert main(["gradcheck", "--configs", "0"]) == 1
