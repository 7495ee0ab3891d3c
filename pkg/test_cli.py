import json

import numpy as np
import pandas as pd
import pytest

import cli
from building_sim import read_dataset_csv
from cli import build_parser, cmd_evaluate, cmd_generate, cmd_train, main
from config import resolve_config
from errors import CheckpointError
from evaluation import ForecastSet, write_forecast_dump
from model import model_forward
from pipeline import FUTURE_FEATURES, PipelineConfig, ScalerSpec, prepare_dataset
from training import load_checkpoint, params_from_checkpoint


def _small_config(seed=3):
    return resolve_config("tiny", overrides={"simulator.days": 2}, seed=seed)


def test_generate_writes_dataset_weather_and_manifest(tmp_path):
    manifest = cmd_generate(_small_config(), str(tmp_path))
    assert manifest["rows"] == 192
    assert manifest["start"] == "2023-01-01T00:00:00"
    frame = pd.read_csv(tmp_path / "dataset.csv")
    assert frame.columns[0] == "timestamp" and len(frame) == 192
    assert len(pd.read_csv(tmp_path / "weather.csv")) == 192
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["seed"] == 3
    assert on_disk["config_hash"] == _small_config().config_hash()


def test_generate_is_byte_identical_for_a_seed(tmp_path):
    cmd_generate(_small_config(), str(tmp_path / "a"))
    cmd_generate(_small_config(), str(tmp_path / "b"))
    for name in ("dataset.csv", "weather.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    cmd_generate(_small_config(seed=4), str(tmp_path / "c"))
    assert (tmp_path / "a" / "dataset.csv").read_bytes() != (tmp_path / "c" / "dataset.csv").read_bytes()


def test_invalid_days_exits_two_without_output(tmp_path):
    out = tmp_path / "run"
    code = main(["generate", "--profile", "tiny", "--simulator.days", "0", "--out", str(out)])
    assert code == 2
    assert not out.exists()


def test_missing_dataset_exits_two(tmp_path):
    code = main(["train", "--profile", "tiny", "--dataset", str(tmp_path / "none.csv"), "--out", str(tmp_path)])
    assert code == 2


def test_parser_exposes_overrides_and_selector():
    args = build_parser().parse_args(["predict", "--model.d_model", "16", "--select", "test:0-3"])
    assert vars(args)["model.d_model"] == "16"
    assert args.select == "test:0-3"
    assert build_parser().parse_args(["evaluate"]).profile == "full"


def test_evaluate_perfect_dump(tmp_path):
    levels = [0.005, 0.025, 0.05, 0.5, 0.95, 0.975, 0.995]
    actual = np.random.default_rng(0).uniform(18, 24, size=(3, 6, 5))
    forecasts = ForecastSet(np.repeat(actual[..., None], len(levels), axis=-1), actual, levels)
    dump = tmp_path / "forecasts.csv"
    write_forecast_dump(forecasts, str(dump))
    summary = cmd_evaluate(str(dump), str(tmp_path / "eval"))
    assert all(v == 0.0 for v in summary["cvrmse_pct"].values())
    assert [c["coverage"] for c in summary["coverage"]] == [1.0, 1.0, 1.0]
    horizon = pd.read_csv(tmp_path / "eval" / "horizon_cvrmse.csv", dtype={"zone": str})
    assert len(horizon) == 6 * 6
    assert (horizon["cvrmse_pct"] == 0.0).all()
    assert (tmp_path / "eval" / "coverage.csv").exists()
    assert json.loads((tmp_path / "eval" / "summary.json").read_text())["instances"] == 3


def test_evaluate_skips_intervals_without_quantiles(tmp_path):
    levels = [0.05, 0.5, 0.95]
    actual = np.full((2, 3, 5), 21.0)
    forecasts = ForecastSet(actual[..., None] + np.array([-1.0, 0.0, 1.0]), actual, levels)
    dump = tmp_path / "forecasts.csv"
    write_forecast_dump(forecasts, str(dump))
    summary = cmd_evaluate(str(dump), str(tmp_path / "eval"))
    assert [c["level"] for c in summary["coverage"]] == [0.9]


def _quick_train_config():
    overrides = {"simulator.days": 4, "training.max_epochs": 1, "training.max_batches_per_epoch": 1}
    return resolve_config("tiny", overrides=overrides, seed=3)


def test_train_rejects_checkpoint_that_does_not_reproduce_its_loss(tmp_path, monkeypatch):
    cfg = _quick_train_config()
    cmd_generate(cfg, str(tmp_path))
    monkeypatch.setattr(cli, "evaluate_loss", lambda params, samples, batch_size=256: 1e3)
    with pytest.raises(CheckpointError, match="reloaded validation loss"):
        cmd_train(cfg, str(tmp_path / "dataset.csv"), str(tmp_path / "model.ckpt"))
    code = main(["train", "--profile", "tiny", "--seed", "3", "--out", str(tmp_path), "--simulator.days", "4",
                 "--training.max_epochs", "1", "--training.max_batches_per_epoch", "1"])
    assert code == 1


def test_train_accepts_checkpoint_that_reproduces_its_loss(tmp_path):
    cfg = _quick_train_config()
    cmd_generate(cfg, str(tmp_path))
    report = cmd_train(cfg, str(tmp_path / "dataset.csv"), str(tmp_path / "model.ckpt"))
    assert report["best_val_loss"] == min(e["val_loss"] for e in report["epochs"])


@pytest.mark.slow
def test_end_to_end_tiny_run(tmp_path):
    out = str(tmp_path)
    common = ["--profile", "tiny", "--seed", "7", "--out", out, "--simulator.days", "4",
              "--training.max_epochs", "1", "--training.max_batches_per_epoch", "2"]
    assert main(["generate"] + common) == 0
    assert main(["train"] + common) == 0
    assert (tmp_path / "model.ckpt").exists()
    log = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1]
    assert main(["predict", "--select", "test:0-1"] + common) == 0
    dump = pd.read_csv(tmp_path / "forecasts.csv")
    assert len(dump) == 2 * 12 * 5 * 7
    assert np.isfinite(dump["value_c"]).all()
    assert main(["evaluate"] + common) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["instances"] == 2 and summary["horizon"] == 12


METRIC_FILES = ("forecasts.csv", "horizon_cvrmse.csv", "horizon_cvrmse.jsonl", "coverage.csv", "summary.json")


@pytest.mark.slow
def test_full_chain_reproduces_metric_files(tmp_path):
    for run in ("a", "b"):
        common = ["--profile", "tiny", "--seed", "5", "--out", str(tmp_path / run), "--simulator.days", "4",
                  "--training.max_epochs", "2", "--training.max_batches_per_epoch", "2"]
        for command in ("generate", "train", "predict", "evaluate"):
            assert main([command] + common) == 0
    for name in METRIC_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


@pytest.mark.slow
def test_tiny_profile_learns_the_building(tmp_path):
    common = ["--profile", "tiny", "--seed", "0", "--out", str(tmp_path)]
    for command in ("generate", "train", "predict", "evaluate"):
        assert main([command] + common) == 0

    log = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert log[-1]["epoch"] <= 30
    initial = log[0]["val_loss"]
    assert min(r["val_loss"] for r in log) <= 0.6 * initial

    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["cvrmse_pct"]["all"] < 5.0
    ninety = next(c for c in summary["coverage"] if c["level"] == 0.9)
    assert 0.75 <= ninety["coverage"] <= 0.99
    assert 0.0 <= summary["crossing_freq"] <= 1.0

    # opening the south window over the horizon lowers the south zone forecast
    ckpt = load_checkpoint(str(tmp_path / "model.ckpt"))
    params = params_from_checkpoint(ckpt)
    spec = ScalerSpec.from_dict(ckpt.scaler)
    splits = prepare_dataset(read_dataset_csv(str(tmp_path / "dataset.csv")), params.cfg.n_past,
                             params.cfg.n_future, PipelineConfig(**ckpt.training.get("pipeline", {})), ckpt.seed, spec)
    past, future, _ = splits.test.batch(range(min(64, len(splits.test))))
    ws_1 = FUTURE_FEATURES.index("ws_1")
    closed, opened = future.copy(), future.copy()
    closed[..., ws_1] = -1.0
    opened[..., ws_1] = 1.0
    median = params.cfg.median_index
    shift = (model_forward(params, past, opened).data[..., 0, median]
             - model_forward(params, past, closed).data[..., 0, median])
    assert shift.mean() < 0.0
