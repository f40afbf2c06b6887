import json

import pytest

from stiffctl.cli import _seed, main
from stiffctl.harness import read_metrics

FAST = ["--env", "block", "--epochs", "1", "--cycles", "1", "--demo-count", "2", "--eval-episodes", "1"]


def test_train_writes_metrics(tmp_path):
    out = tmp_path / "run"
    assert main(["train", *FAST, "--condition", "c5", "--seed", "3", "--out", str(out)]) == 0
    header, rows = read_metrics(out / "metrics.csv")
    assert header["experiment"]["seed"] == 3 and len(rows) == 1


def test_seed_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("STIFFCTL_SEED", "11")
    assert _seed(0) == 11
    out = tmp_path / "run"
    assert main(["train", *FAST, "--condition", "c1", "--seed", "0", "--out", str(out)]) == 0
    header, _ = read_metrics(out / "metrics.csv")
    assert header["experiment"]["seed"] == 11
    monkeypatch.setenv("STIFFCTL_SEED", "")
    assert _seed(4) == 4


def test_bad_arguments_exit_nonzero(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--env", "nope", "--out", str(tmp_path)])
    assert exc.value.code != 0
    assert main(["ablate", *FAST, "--seeds", "0,1", "--out", str(tmp_path / "a")]) == 1
    assert main(["plot", "--in", str(tmp_path / "missing")]) == 1
    assert main(["train", *FAST, "--demos", str(tmp_path / "nofile.jsonl"), "--out", str(tmp_path / "r")]) == 1


def test_demos_then_plot(tmp_path, capsys):
    demo = tmp_path / "d.jsonl"
    assert main(["demos", "--env", "chip", "--count", "2", "--augment", "--out", str(demo)]) == 0
    assert '"action_kind": "stiffness"' in demo.read_text().splitlines()[0]
    run = tmp_path / "runs" / "r"
    assert main(["train", "--env", "chip", "--epochs", "1", "--cycles", "1", "--eval-episodes", "1", "--demos", str(demo), "--out", str(run)]) == 0
    capsys.readouterr()
    assert main(["plot", "--in", str(tmp_path / "runs")]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["written"] >= 1 and summary["skipped"] == 0
