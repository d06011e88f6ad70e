"""End-to-end command line workflows."""

import json
import os
import subprocess
import sys

import pytest

from pmil.cli import main
from pmil.data import load_predictions, load_report, load_training_summary
from pmil.errors import NumericalError


def run(*argv):
    return main(list(argv))


@pytest.fixture
def dataset_dir(tmp_path):
    out = str(tmp_path / "data")
    assert run(
        "synth", "--out", out, "--classes", "2", "--bags-per-class", "6",
        "--instances-per-bag", "6", "--planted-per-bag", "2", "--dim", "10",
        "--separation", "8", "--sigma", "1", "--seed", "5",
    ) == 0
    return out


def test_synth_writes_dataset_and_sidecar(dataset_dir):
    assert os.path.exists(os.path.join(dataset_dir, "manifest.json"))
    assert os.path.exists(os.path.join(dataset_dir, "planted.json"))
    assert os.path.isdir(os.path.join(dataset_dir, "payloads"))
    assert os.path.isdir(os.path.join(dataset_dir, "tubes"))


@pytest.mark.parametrize("mode", ["pmil", "pmil_f", "pmil_f_s"])
def test_train_predict_eval_pipeline(dataset_dir, tmp_path, mode):
    models = str(tmp_path / f"models_{mode}")
    assert run("train", "--dataset", dataset_dir, "--models", models,
               "--mode", mode) == 0
    summary = load_training_summary(os.path.join(models, "training_summary.json"))
    assert summary.mode == mode
    assert summary.classes == ("class00", "class01")
    assert os.path.exists(os.path.join(models, "training_log.json"))

    preds = str(tmp_path / f"preds_{mode}")
    assert run("predict", "--dataset", dataset_dir, "--models", models,
               "--out", preds) == 0
    per_class = load_predictions(os.path.join(preds, "00_class00.predictions.jsonl"))
    assert {p.class_name for p in per_class} == {"class00"}
    assert os.path.exists(os.path.join(preds, "classifications.jsonl"))

    evalout = str(tmp_path / f"eval_{mode}")
    assert run("eval", "--dataset", dataset_dir, "--models", models,
               "--out", evalout) == 0
    report = load_report(os.path.join(evalout, "report.json"))
    assert 0.0 <= report.map_score <= 1.0
    assert os.path.exists(os.path.join(evalout, "report.txt"))


def test_dataset_argument_accepts_manifest_path(dataset_dir, tmp_path):
    models = str(tmp_path / "models")
    manifest = os.path.join(dataset_dir, "manifest.json")
    assert run("train", "--dataset", manifest, "--models", models,
               "--pi", "2") == 0


def test_eval_respects_explicit_mode_override(dataset_dir, tmp_path):
    models = str(tmp_path / "models")
    assert run("train", "--dataset", dataset_dir, "--models", models,
               "--mode", "pmil", "--pi", "2") == 0
    evalout = str(tmp_path / "eval")
    assert run("eval", "--dataset", dataset_dir, "--models", models,
               "--out", evalout, "--mode", "pmil_f") == 0


def test_cv_and_gridsearch(dataset_dir, tmp_path):
    cvout = str(tmp_path / "cv")
    assert run("cv", "--dataset", dataset_dir, "--mode", "pmil_f",
               "--pi", "2", "--out", cvout) == 0
    cv = json.load(open(os.path.join(cvout, "cv.json")))
    assert 0.0 <= cv["mean_accuracy"] <= 1.0
    assert len(cv["fold_accuracies"]) >= 2

    grid_file = str(tmp_path / "grid.json")
    with open(grid_file, "w") as f:
        json.dump({"lam": [0.01, 0.1], "pi": [1, 2]}, f)
    gsout = str(tmp_path / "gs")
    assert run("gridsearch", "--dataset", dataset_dir, "--grid", grid_file,
               "--mode", "pmil", "--workers", "2", "--out", gsout) == 0
    table = json.load(open(os.path.join(gsout, "gridsearch.json")))
    assert len(table["cells"]) == 4
    assert table["best"]["params"]["lam"] in (0.01, 0.1)


def test_exit_codes(tmp_path, dataset_dir, monkeypatch):
    assert run("eval", "--dataset", str(tmp_path / "nope"), "--models",
               str(tmp_path / "m"), "--out", str(tmp_path / "o")) == 2
    assert run("train", "--dataset", dataset_dir, "--models",
               str(tmp_path / "m"), "--lambda", "-3") == 2

    import pmil.cli as cli

    def blow_up(config):
        raise NumericalError("diverged")

    monkeypatch.setitem(cli._COMMANDS, "train", blow_up)
    assert run("train", "--dataset", dataset_dir, "--models", str(tmp_path / "m")) == 3


def test_train_requires_two_classes(tmp_path):
    solo = str(tmp_path / "solo")
    assert run("synth", "--out", solo, "--classes", "1", "--bags-per-class", "4",
               "--instances-per-bag", "4", "--planted-per-bag", "1", "--dim", "6",
               "--separation", "5", "--sigma", "1", "--seed", "1") == 0
    assert run("train", "--dataset", solo, "--models", str(tmp_path / "m")) == 2


def test_module_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "pmil", "--help"],
        capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 0
    assert "train" in proc.stdout and "synth" in proc.stdout
