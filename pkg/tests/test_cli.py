import json
import subprocess
import sys

import pytest

from rexup.cli import EXIT_NUMERIC, EXIT_VALIDATION, main
from rexup.params import load_checkpoint

TINY = ["--d", "6", "--cells", "1", "--epochs", "1", "--batch", "16", "--dtype", "float64"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", "--seed", "2", "--scenes", "20", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt(data_dir, tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "m.ckpt"
    assert main(["train", "--data", str(data_dir), "--out", str(path), *TINY]) == 0
    return path


def test_gen_writes_splits(data_dir):
    assert sorted(p.name for p in data_dir.glob("*.jsonl")) == ["test.jsonl", "testdev.jsonl", "train.jsonl", "val.jsonl"]


def test_train_then_eval(ckpt, data_dir, capsys, tmp_path):
    _, meta = load_checkpoint(ckpt)
    assert meta["config"]["d"] == 6 and meta["config"]["cells"] == 1
    csv_path = tmp_path / "m.csv"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data_dir), "--split", "val", "--csv", str(csv_path)]) == 0
    assert "overall" in capsys.readouterr().out
    assert csv_path.read_text().startswith("group,count,accuracy")


def test_flags_beat_config_file(data_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"d": 4, "cells": 2, "epochs": 1, "batch": 16, "dtype": "float64"}))
    out = tmp_path / "a.ckpt"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--config", str(cfg), "--d", "6", "--no-sd"]) == 0
    c = load_checkpoint(out)[1]["config"]
    assert (c["d"], c["cells"], c["use_sd_fusion"], c["use_sgkb_branch"]) == (6, 2, False, True)
    assert c["embed_width"] == 32  # untouched default


def test_attn_dump(ckpt, tmp_path):
    from rexup.network import indexed_samples
    from rexup.synth import read_dataset

    _, meta = load_checkpoint(ckpt)
    sid = indexed_samples(read_dataset(meta["data_dir"])["val"])[0][0]
    out = tmp_path / "a.json"
    assert main(["attn", "--ckpt", str(ckpt), "--sample", sid, "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["sample_id"] == sid and len(doc["records"]) == 2


def test_suite_command(data_dir, tmp_path):
    out = tmp_path / "r" / "report.md"
    assert main(["suite", "--data", str(data_dir), "--out", str(out), *TINY, "--seeds", "0"]) == 0
    text = out.read_text()
    assert "## Ablation" in text and "## Number of cells" in text
    assert out.with_suffix(".csv").exists()


def test_validation_exit_codes(tmp_path, ckpt, data_dir, capsys):
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path)]) == EXIT_VALIDATION
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(data_dir)]) == EXIT_VALIDATION
    bad = tmp_path / "bad.json"
    bad.write_text('{"depth": 3}')
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "x"), "--config", str(bad)]) == EXIT_VALIDATION
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "x"), "--cells", "0"]) == EXIT_VALIDATION
    assert main(["attn", "--ckpt", str(ckpt), "--sample", "nope/1", "--out", str(tmp_path / "a.json")]) == EXIT_VALIDATION
    assert "error:" in capsys.readouterr().err


def test_numeric_abort_exit_code(data_dir, tmp_path):
    code = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "x"), *TINY, "--epochs", "3", "--lr", "1e300"])
    assert code == EXIT_NUMERIC


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "rexup.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "suite" in res.stdout
