import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from hypball import cli
from hypball import layers as ly

SMALL_DATA = ["--n-per-leaf", "15", "--n-bonafide", "30", "--modality-widths", "6,5", "--latent-dim", "6"]
SMALL_TRAIN = ["--dim", "4", "--epochs", "2", "--backbone-hidden", "8", "--backbone-out", "6",
               "--batch-size", "16", "--lr", "1e-3"]


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "d.jsonl"
    assert cli.run(["gen-data", "--out", str(path)] + SMALL_DATA) == 0
    return path


def test_gen_data_reproducible(tmp_path, dataset):
    again = tmp_path / "again.jsonl"
    assert cli.run(["gen-data", "--out", str(again)] + SMALL_DATA) == 0
    assert again.read_bytes() == dataset.read_bytes()
    echo = yaml.safe_load((tmp_path / "d.jsonl.config.yaml").read_text())
    assert echo["n_per_leaf"] == 15 and echo["seed"] == 0


def test_train_eval_export(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    assert cli.run(["train", "--data", str(dataset), "--out", str(out)] + SMALL_TRAIN) == 0
    for name in ("checkpoint.json", "log.csv", "history.json", "split.json", "config.yaml",
                 "report.json", "report.txt"):
        assert (out / name).exists(), name
    with open(out / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["epoch"] for r in rows] == ["0", "1"]

    ev_out = tmp_path / "ev"
    assert cli.run(["eval", "--checkpoint", str(out / "checkpoint.json"), "--data", str(dataset),
                    "--out", str(ev_out)]) == 0
    assert json.loads((ev_out / "report.json").read_text()) == json.loads((out / "report.json").read_text())

    emb = tmp_path / "emb.csv"
    assert cli.run(["export-embeddings", "--checkpoint", str(out / "checkpoint.json"),
                    "--data", str(dataset), "--out", str(emb)]) == 0
    with open(emb) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 15 + 30
    assert max(float(r["norm"]) for r in rows) <= 0.9 / np.sqrt(0.1) + 1e-12
    assert (tmp_path / "emb.csv.config.yaml").exists()


def test_train_mm_loo(tmp_path, dataset):
    out = tmp_path / "mm"
    args = ["train-mm", "--data", str(dataset), "--out", str(out), "--split-kind", "loo",
            "--held-out", "print"] + SMALL_TRAIN
    assert cli.run(args) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["protocol"] == "loo:print"
    hist = json.loads((out / "history.json").read_text())
    assert all("dis_loss" in row for row in hist)


def test_runs_are_reproducible(tmp_path, dataset):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.run(["train", "--data", str(dataset), "--out", str(out)] + SMALL_TRAIN) == 0
    assert (outs[0] / "log.csv").read_text() == (outs[1] / "log.csv").read_text()
    a, _ = ly.load_checkpoint(outs[0] / "checkpoint.json")
    b, _ = ly.load_checkpoint(outs[1] / "checkpoint.json")
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=0, atol=1e-12)


def test_eval_fixture(tmp_path, capsys):
    fixture = tmp_path / "s.json"
    fixture.write_text(json.dumps({"test": {"bonafide": [0.9, 0.8], "attack": [0.1, 0.2]}}))
    out = tmp_path / "r"
    assert cli.run(["eval", "--scores", str(fixture), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["acer"] == 0.0 and report["auc"] == 1.0
    assert "fixture" in capsys.readouterr().out


def test_gradcheck_command(tmp_path, capsys):
    assert cli.run(["gradcheck", "--points", "2", "--out", str(tmp_path)]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["max"] <= 1e-4


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.run([]) == 1
    assert cli.run(["train", "--epochs", "nope"]) == 1
    assert cli.run(["train", "--out", str(tmp_path)]) == 1  # no --data
    cfg = tmp_path / "c.yaml"
    cfg.write_text("epochs: 3\nbogus: 1\n")
    assert cli.run(["train", "--config", str(cfg)]) == 1
    assert "bogus" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{oops\n")
    assert cli.run(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert cli.run(["train", "--data", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")]) == 2


def test_help_exit_0():
    assert cli.run(["--help"]) == 0
    assert cli.run(["train", "--help"]) == 0


def test_precedence():
    env = {"HYPBALL_SEED": "7"}
    assert cli.resolve("train", {}, None, env)["seed"] == 7
    assert cli.resolve("train", {"seed": 3}, None, env)["seed"] == 3
    assert cli.resolve("train", {}, None, {})["seed"] == 0


def test_config_file_layering(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 5\nepochs: 4\n")
    r = cli.resolve("train", {"epochs": 9}, str(cfg), {"HYPBALL_SEED": "11"})
    assert (r["seed"], r["epochs"]) == (11, 9)
    r = cli.resolve("train", {}, str(cfg), {})
    assert (r["seed"], r["epochs"]) == (5, 4)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hypball", "eval"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "error" in proc.stderr
