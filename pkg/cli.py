"""Command line: generate | train | predict | evaluate."""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from building_sim import generate_dataset, read_dataset_csv, write_dataset_csv, write_weather_csv
from config import RunConfig, override_flags, resolve_config, PROFILES
from errors import CheckpointError, ConfigurationError, DatasetSchemaError, HybridVentError, WeatherParseError
from evaluation import (ForecastSet, export_metrics, interval_coverage, per_horizon_cvrmse, pinball_scores,
                        read_forecast_dump, summarize, write_forecast_dump)
from model import build_model, forecast_samples
from pipeline import (FEATURE_SCHEMA_VERSION, FUTURE_FEATURES, PAST_FEATURES, PipelineConfig, ScalerSpec,
                      prepare_dataset, write_sample_manifest)
from training import evaluate_loss, fit, load_checkpoint, params_from_checkpoint

logger = logging.getLogger(__name__)

VALIDATION_ERRORS = (ConfigurationError, DatasetSchemaError, WeatherParseError)
RELOAD_TOLERANCE = 1e-9


def _write_json(path: str, data: dict):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _dataset_path(cfg: RunConfig, out_dir: str, given: str = None) -> str:
    return given or cfg.paths.dataset or os.path.join(out_dir, "dataset.csv")


def _checkpoint_path(cfg: RunConfig, out_dir: str, given: str = None) -> str:
    return given or cfg.paths.checkpoint or os.path.join(out_dir, "model.ckpt")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out_dir: str) -> dict:
    """Simulate the building; writes dataset.csv, weather.csv and manifest.json"""
    dataset = generate_dataset(cfg.simulator, cfg.seed)
    dataset_path = os.path.join(out_dir, "dataset.csv")
    write_dataset_csv(dataset, dataset_path)
    write_weather_csv(dataset.weather, os.path.join(out_dir, "weather.csv"))
    manifest = {
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "rows": len(dataset),
        "start": dataset.frame.index[0].strftime("%Y-%m-%dT%H:%M:%S"),
        "end": dataset.frame.index[-1].strftime("%Y-%m-%dT%H:%M:%S"),
        "simulator": asdict(cfg.simulator),
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    logger.info(f"Generated {len(dataset)} rows into {out_dir}")
    return manifest


def cmd_train(cfg: RunConfig, dataset_path: str, out_checkpoint: str) -> dict:
    """Window, split, fit; writes the best checkpoint, train_log.jsonl and samples_manifest.csv"""
    out_dir = os.path.dirname(os.path.abspath(out_checkpoint))
    dataset = read_dataset_csv(dataset_path)
    spec = ScalerSpec()
    splits = prepare_dataset(dataset, cfg.model.n_past, cfg.model.n_future, cfg.pipeline, cfg.seed, spec)
    write_sample_manifest(splits, os.path.join(out_dir, "samples_manifest.csv"))

    params = build_model(cfg.model)
    metadata = {
        "pipeline": asdict(cfg.pipeline),
        "feature_schema_version": FEATURE_SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "clamp_counts": splits.clamp_counts,
    }
    report, ckpt = fit(params, splits.train, splits.validation, cfg.training, scaler=spec.to_dict(), seed=cfg.seed,
                       log_path=os.path.join(out_dir, "train_log.jsonl"), checkpoint_path=out_checkpoint,
                       metadata=metadata)

    reloaded = params_from_checkpoint(load_checkpoint(out_checkpoint))
    recheck = evaluate_loss(reloaded, splits.validation, cfg.training.eval_batch_size)
    if abs(recheck - report.best_val_loss) > RELOAD_TOLERANCE:
        raise CheckpointError(f"{out_checkpoint}: reloaded validation loss {recheck:.12f} differs from "
                              f"best {report.best_val_loss:.12f}")
    logger.info(f"Best epoch {report.best_epoch}, val loss {report.best_val_loss:.6f} "
                f"(reloaded {recheck:.6f}), stopped by {report.stopping_reason}")
    return report.to_dict()


def _select(splits, selector: str):
    """Resolve an instance selector to a SampleSet"""
    named = {"test": splits.test, "val": splits.validation}
    if selector == "all-test":
        return splits.test
    if selector == "all-val":
        return splits.validation
    kind, _, arg = selector.partition(":")
    try:
        if kind in named and arg:
            samples = named[kind]
            lo, _, hi = arg.partition("-")
            lo, hi = int(lo), int(hi) if hi else int(lo)
            if not 0 <= lo <= hi < len(samples):
                raise ConfigurationError(f"{selector}: {kind} split holds {len(samples)} windows", field="select")
            return samples.subset(np.arange(lo, hi + 1))
        if kind == "origin" and arg:
            origin = int(arg)
            for _, samples in splits.items():
                hits = np.flatnonzero(samples.origins == origin)
                if hits.size:
                    return samples.subset(hits)
            raise ConfigurationError(f"no complete window starts at row {origin}", field="select")
    except ValueError:
        pass
    raise ConfigurationError(f"unknown selector {selector!r}", field="select")


def cmd_predict(checkpoint: str, dataset_path: str, instance_selector: str, out_path: str,
                batch_size: int = 256) -> ForecastSet:
    """Forecast the selected windows and write the forecast dump CSV"""
    ckpt = load_checkpoint(checkpoint)
    params = params_from_checkpoint(ckpt)
    cfg = params.cfg
    missing = [f for f in cfg.past_features + cfg.future_features if f not in PAST_FEATURES + FUTURE_FEATURES]
    if missing or ckpt.training.get("feature_schema_version", FEATURE_SCHEMA_VERSION) != FEATURE_SCHEMA_VERSION:
        raise ConfigurationError(f"checkpoint expects features this build cannot derive: {missing}",
                                 field="model.past_features")
    dataset = read_dataset_csv(dataset_path)
    spec = ScalerSpec.from_dict(ckpt.scaler)
    pipeline_cfg = PipelineConfig(**ckpt.training.get("pipeline", {}))
    splits = prepare_dataset(dataset, cfg.n_past, cfg.n_future, pipeline_cfg, ckpt.seed, spec)
    samples = _select(splits, instance_selector)
    values, actuals = forecast_samples(params, samples, spec, batch_size)
    forecasts = ForecastSet(values, actuals, cfg.quantile_levels, samples.origins)
    write_forecast_dump(forecasts, out_path)
    return forecasts


def cmd_evaluate(forecast_dump: str, out_dir: str, intervals=(0.90, 0.95, 0.99), plateau_tolerance=0.05) -> dict:
    """Per-horizon CVRMSE, coverage and a summary for a forecast dump"""
    forecasts = read_forecast_dump(forecast_dump)
    present = []
    for p in intervals:
        try:
            forecasts.level_index((1.0 - p) / 2.0), forecasts.level_index(1.0 - (1.0 - p) / 2.0)
            present.append(p)
        except ConfigurationError:
            logger.warning(f"No quantile pair for the {p:.0%} interval, skipped")
    horizon = per_horizon_cvrmse(forecasts)
    coverage = interval_coverage(forecasts, present)
    os.makedirs(out_dir, exist_ok=True)
    export_metrics(horizon, os.path.join(out_dir, "horizon_cvrmse.csv"), "csv")
    export_metrics(horizon, os.path.join(out_dir, "horizon_cvrmse.jsonl"), "jsonl")
    export_metrics(coverage, os.path.join(out_dir, "coverage.csv"), "csv")
    summary = summarize(horizon, coverage, pinball_scores(forecasts), len(forecasts), plateau_tolerance)
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    logger.info(f"Evaluated {len(forecasts)} forecasts: mean CVRMSE {summary['cvrmse_pct']['all']:.3f}%")
    return summary


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--profile", choices=sorted(PROFILES), default="full")
    common.add_argument("--out", help="output directory (or file for predict)")
    common.add_argument("--log-level", default=os.environ.get("HVF_LOG_LEVEL", "INFO"))
    overrides = common.add_argument_group("config overrides")
    for dotted in override_flags():
        overrides.add_argument(f"--{dotted}", dest=dotted, metavar="VALUE", default=None)

    parser = argparse.ArgumentParser(prog="hybridvent",
                                     description="Multi-zone indoor temperature forecasting under hybrid ventilation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate the building and write the dataset")
    train = sub.add_parser("train", parents=[common], help="fit the forecaster")
    train.add_argument("--dataset", help="dataset CSV (default <out>/dataset.csv)")
    predict = sub.add_parser("predict", parents=[common], help="write a forecast dump")
    predict.add_argument("--checkpoint", help="checkpoint file (default <out>/model.ckpt)")
    predict.add_argument("--dataset", help="dataset CSV (default <out>/dataset.csv)")
    predict.add_argument("--select", default="all-test",
                         help="all-test | all-val | test:<i> | test:<i>-<j> | origin:<row>")
    evaluate = sub.add_parser("evaluate", parents=[common], help="score a forecast dump")
    evaluate.add_argument("--dump", help="forecast dump CSV (default <out>/forecasts.csv)")
    return parser


def run(args: argparse.Namespace) -> int:
    values = vars(args)
    overrides = {k: values[k] for k in override_flags() if values.get(k) is not None}
    cfg = resolve_config(args.profile, args.config, overrides, args.seed)
    out_dir = cfg.paths.out_dir
    if args.command == "generate":
        cmd_generate(cfg, args.out or out_dir)
    elif args.command == "train":
        out_dir = args.out or out_dir
        cmd_train(cfg, _dataset_path(cfg, out_dir, args.dataset), _checkpoint_path(cfg, out_dir))
    elif args.command == "predict":
        out = args.out or out_dir
        out_path = out if out.endswith(".csv") else os.path.join(out, "forecasts.csv")
        base = os.path.dirname(os.path.abspath(out_path))
        cmd_predict(_checkpoint_path(cfg, base, args.checkpoint), _dataset_path(cfg, base, args.dataset),
                    args.select, out_path, cfg.training.eval_batch_size)
    elif args.command == "evaluate":
        out_dir = args.out or out_dir
        cmd_evaluate(args.dump or os.path.join(out_dir, "forecasts.csv"), out_dir, cfg.evaluation.intervals,
                     cfg.evaluation.plateau_tolerance)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        return run(args)
    except VALIDATION_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        logger.debug("details", exc_info=True)
        return 2
    except HybridVentError as e:
        logger.error(f"{type(e).__name__}: {e}")
        logger.debug("details", exc_info=True)
        return 1
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
