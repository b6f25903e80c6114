"""Tests for the poselab command line."""

import json

import pandas as pd
import pytest

from poselab.poselab import build_parser, resolve_device, run_command
from poselab.services.pipeline import RESULT_COLUMNS
from tests.conftest import TINY_GENERATOR

RUN_CONFIG = {
    "generator": TINY_GENERATOR,
    "cvae": {"latent_dim": 8, "encoder_width": 4, "decoder_width": 16},
    "training": {"max_epochs": 2, "batch_size": 4},
    "heads_training": {"max_epochs": 5},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(RUN_CONFIG))
    return path


def test_unknown_flag_is_a_usage_error(tmp_path):
    out = tmp_path / "data"
    assert run_command(["dataset", "gen", "--out", str(out), "--bogus"]) == 1
    assert not out.exists()


def test_missing_subcommand():
    assert run_command([]) == 1
    assert run_command(["train"]) == 1


def test_help_exits_cleanly(capsys):
    assert run_command(["--help"]) == 0
    assert "ablate" in capsys.readouterr().out


def test_invalid_config_is_a_usage_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"cvae": {"latent_dim": 0}}))
    assert run_command(["dataset", "gen", "--config", str(path), "--out", str(tmp_path)]) == 1
    path.write_text("{not json")
    assert run_command(["dataset", "gen", "--config", str(path), "--out", str(tmp_path)]) == 1


def test_smaller_image_without_a_principal_point_is_a_usage_error(tmp_path, capsys):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({"generator": {"image_width": 320, "image_height": 240}}))
    out = tmp_path / "data"
    assert run_command(["dataset", "gen", "--config", str(path), "--out", str(out)]) == 1
    assert "principal point" in capsys.readouterr().err
    assert not out.exists()


def test_missing_dataset_is_a_data_error(tmp_path):
    args = ["train", "cvae", "--data", str(tmp_path), "--out", str(tmp_path / "cvae.pt")]
    assert run_command(args) == 2


def test_device_from_environment(monkeypatch):
    monkeypatch.delenv("POSELAB_DEVICE", raising=False)
    assert resolve_device() == "cpu"
    monkeypatch.setenv("POSELAB_DEVICE", "tpu")
    assert run_command(["train", "cvae", "--data", "x", "--out", "y"]) == 1


def test_parser_knows_every_command():
    parser = build_parser()
    args = parser.parse_args(["ablate", "--axis", "n", "--data", "d", "--out", "o", "--parallel"])
    assert (args.command, args.axis, args.parallel) == ("ablate", "n", True)
    args = parser.parse_args(["baseline", "lut", "--cvae", "c", "--data", "d", "--out", "o"])
    assert (args.command, args.action) == ("baseline", "lut")


def _run(*argv: str) -> None:
    assert run_command(list(argv)) == 0, argv


def test_end_to_end(tmp_path, config_file):
    data, runs = tmp_path / "data", tmp_path / "runs"
    common = ["--config", str(config_file), "-q"]
    _run("dataset", "gen", "--out", str(data), *common)
    assert (data / "manifest_train.jsonl.run.json").exists()

    cvae, heads = runs / "cvae.pt", runs / "heads.pt"
    _run("train", "cvae", "--data", str(data), "--out", str(cvae), *common)
    assert (runs / "cvae.log.csv").exists()
    _run("train", "heads", "--cvae", str(cvae), "--data", str(data), "--out", str(heads), *common)
    assert (runs / "heads.pt.run.json").exists()

    results = runs / "results.csv"
    _run("infer", "--cvae", str(cvae), "--heads", str(heads), "--data", str(data),
         "--out", str(results), *common)
    frame = pd.read_csv(results)
    assert list(frame.columns) == RESULT_COLUMNS
    assert len(frame) == 2 * TINY_GENERATOR["test_images_per_object"]
    assert (frame["score"] == 1.0).all()

    lut = runs / "lut.csv"
    _run("baseline", "lut", "--cvae", str(cvae), "--data", str(data), "--out", str(lut), *common)
    assert (runs / "lut.codebook").exists()

    report = runs / "report.json"
    _run("evaluate", "--results", str(results), "--compare", str(lut), "--data", str(data),
         "--out", str(report), *common)
    content = json.loads(report.read_text())
    assert content["ar_label"] == "AR (no-VSD)"
    assert 0.0 <= content["overall"]["ar"] <= 1.0
    assert (runs / "report.compare.csv").exists()
    assert (runs / "report.compare_bins.csv").exists()
    run_info = json.loads((runs / "report.json.run.json").read_text())
    assert run_info["command"][:2] == ["poselab", "evaluate"]

    again = runs / "again.csv"
    _run("infer", "--cvae", str(cvae), "--heads", str(heads), "--data", str(data),
         "--out", str(again), *common)
    first = frame.drop(columns="time")
    second = pd.read_csv(again).drop(columns="time")
    pd.testing.assert_frame_equal(first, second)
