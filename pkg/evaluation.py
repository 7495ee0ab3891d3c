"""Forecast scoring: CVRMSE per horizon step, interval coverage, pinball scores and file exports."""
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import ConfigurationError, ContractError, DatasetSchemaError, DimensionError, MetricError

logger = logging.getLogger(__name__)

DUMP_COLUMNS = ["instance", "step", "zone", "q_level", "value_c", "actual_c"]
HORIZON_COLUMNS = ["zone", "step", "cvrmse_pct"]
COVERAGE_COLUMNS = ["level", "coverage", "crossing_freq"]
DEFAULT_INTERVALS = (0.90, 0.95, 0.99)
ALL_ZONES = "all"


@dataclass
class EvaluationConfig:
    intervals: list = field(default_factory=lambda: list(DEFAULT_INTERVALS))
    plateau_tolerance: float = 0.05

    def validate(self):
        if not self.intervals or any(not 0.0 < p < 1.0 for p in self.intervals):
            raise ConfigurationError("every nominal level must lie in (0, 1)", field="evaluation.intervals")
        if not 0.0 < self.plateau_tolerance < 1.0:
            raise ConfigurationError("must lie in (0, 1)", field="evaluation.plateau_tolerance")


def cvrmse(actual, predicted) -> float:
    """100 * RMSE / mean(actual), both in C"""
    a = np.asarray(actual, dtype=float).ravel()
    p = np.asarray(predicted, dtype=float).ravel()
    if a.shape != p.shape:
        raise DimensionError(f"cvrmse: {a.size} actual values vs {p.size} predicted")
    if a.size == 0:
        raise ContractError("cvrmse needs at least one pair")
    mean = a.mean()
    if mean == 0:
        raise MetricError("cvrmse is undefined for a zero-mean actual series")
    return float(100.0 * np.sqrt(np.mean((a - p) ** 2)) / mean)


# ---------------------------------------------------------------------------
# forecast collections
# ---------------------------------------------------------------------------

@dataclass
class ForecastSet:
    forecasts: np.ndarray  # [N, H, Z, Q] C
    actuals: np.ndarray  # [N, H, Z] C
    quantile_levels: list
    instances: np.ndarray = None  # [N] ids, window origins when produced by predict

    def __post_init__(self):
        self.forecasts = np.asarray(self.forecasts, dtype=float)
        self.actuals = np.asarray(self.actuals, dtype=float)
        self.quantile_levels = [float(q) for q in self.quantile_levels]
        if self.forecasts.ndim != 4 or self.forecasts.shape[:3] != self.actuals.shape:
            raise DimensionError(f"forecasts {self.forecasts.shape} do not pair with actuals {self.actuals.shape}")
        if self.forecasts.shape[3] != len(self.quantile_levels):
            raise DimensionError(f"{self.forecasts.shape[3]} quantile columns for {len(self.quantile_levels)} levels")
        if self.instances is None:
            self.instances = np.arange(len(self.forecasts))
        self.instances = np.asarray(self.instances, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.forecasts)

    @property
    def horizon(self) -> int:
        return self.forecasts.shape[1]

    @property
    def zone_count(self) -> int:
        return self.forecasts.shape[2]

    def level_index(self, q: float) -> int:
        for j, level in enumerate(self.quantile_levels):
            if abs(level - q) < 1e-9:
                return j
        raise ConfigurationError(f"no quantile column for level {q}", field="quantile_levels")

    def median(self) -> np.ndarray:
        return self.forecasts[..., self.level_index(0.5)]

    def to_dump_frame(self) -> pd.DataFrame:
        n, h, z, q = self.forecasts.shape
        grid = np.indices((n, h, z, q)).reshape(4, -1)
        return pd.DataFrame({
            "instance": self.instances[grid[0]],
            "step": grid[1] + 1,
            "zone": grid[2] + 1,
            "q_level": np.asarray(self.quantile_levels)[grid[3]],
            "value_c": self.forecasts.reshape(-1),
            "actual_c": np.repeat(self.actuals.reshape(-1), q),
        }, columns=DUMP_COLUMNS)


def write_forecast_dump(forecasts: ForecastSet, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    try:
        forecasts.to_dump_frame().to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    except OSError as e:
        raise MetricError(f"cannot write forecast dump {path}: {e}") from None
    logger.info(f"Wrote {len(forecasts)} forecasts to {path}")


def read_forecast_dump(path: str) -> ForecastSet:
    """Parse a dump CSV back into a ForecastSet; errors carry the file row number"""
    try:
        frame = pd.read_csv(path, dtype=str)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetSchemaError(f"cannot read forecast dump {path}: {e}") from None
    for col in DUMP_COLUMNS:
        if col not in frame.columns:
            raise DatasetSchemaError(f"forecast dump lacks column {col}", column=col)
    if frame.empty:
        raise DatasetSchemaError("forecast dump holds no rows", row=2)
    numeric = {}
    for col in DUMP_COLUMNS:
        values = pd.to_numeric(frame[col], errors="coerce")
        bad = np.flatnonzero(~np.isfinite(values.to_numpy(dtype=float)))
        if bad.size:
            raise DatasetSchemaError(f"unparseable {col} value {frame[col].iloc[bad[0]]!r}", column=col,
                                     row=int(bad[0]) + 2)
        numeric[col] = values
    df = pd.DataFrame(numeric)
    keys = ["instance", "step", "zone", "q_level"]
    dup = np.flatnonzero(df.duplicated(keys).to_numpy())
    if dup.size:
        raise DatasetSchemaError("duplicate (instance, step, zone, q_level) entry", row=int(dup[0]) + 2)

    instances = np.sort(df["instance"].unique())
    steps = np.sort(df["step"].unique())
    zones = np.sort(df["zone"].unique())
    levels = np.sort(df["q_level"].unique())
    if not np.array_equal(steps, np.arange(1, len(steps) + 1)):
        raise DatasetSchemaError("steps must run 1..H without gaps", column="step")
    if not np.array_equal(zones, np.arange(1, len(zones) + 1)):
        raise DatasetSchemaError("zones must run 1..Z without gaps", column="zone")
    shape = (len(instances), len(steps), len(zones), len(levels))
    if len(df) != int(np.prod(shape)):
        raise DatasetSchemaError(f"{len(df)} rows do not form a complete {shape} grid")

    ordered = df.sort_values(keys, kind="mergesort")
    forecasts = ordered["value_c"].to_numpy().reshape(shape)
    actual_grid = ordered["actual_c"].to_numpy().reshape(shape)
    mismatch = np.flatnonzero(np.any(actual_grid != actual_grid[..., :1], axis=-1).reshape(-1))
    if mismatch.size:
        first = ordered.index[mismatch[0] * shape[3]]
        raise DatasetSchemaError("actual_c differs across quantile levels", column="actual_c", row=int(first) + 2)
    return ForecastSet(forecasts, actual_grid[..., 0], list(levels), instances.astype(np.int64))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class HorizonMetrics:
    per_zone: np.ndarray  # [Z, H] percent
    aggregate: np.ndarray  # [Z] percent, every step pooled

    @property
    def mean_curve(self) -> np.ndarray:
        return self.per_zone.mean(axis=0)

    @property
    def horizon(self) -> int:
        return self.per_zone.shape[1]

    def to_frame(self) -> pd.DataFrame:
        z, h = self.per_zone.shape
        rows = [(str(zone + 1), step + 1, self.per_zone[zone, step]) for zone in range(z) for step in range(h)]
        rows += [(ALL_ZONES, step + 1, value) for step, value in enumerate(self.mean_curve)]
        return pd.DataFrame(rows, columns=HORIZON_COLUMNS)


@dataclass
class CoverageReport:
    levels: list
    coverage: list
    crossing_freq: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"level": self.levels, "coverage": self.coverage,
                             "crossing_freq": [self.crossing_freq] * len(self.levels)}, columns=COVERAGE_COLUMNS)


def _require(forecasts: ForecastSet):
    if len(forecasts) == 0:
        raise ConfigurationError("no forecast instances to evaluate", field="instances")


def per_horizon_cvrmse(forecasts: ForecastSet) -> HorizonMetrics:
    """CVRMSE of the median forecast against the actual, per zone and step, pooled over instances"""
    _require(forecasts)
    median = forecasts.median()
    actual = forecasts.actuals
    err = np.sqrt(np.mean((actual - median) ** 2, axis=0))  # [H, Z]
    mean = actual.mean(axis=0)
    if np.any(mean == 0):
        raise MetricError("cvrmse is undefined for a zero-mean actual series")
    per_zone = (100.0 * err / mean).T
    aggregate = np.array([cvrmse(actual[..., z], median[..., z]) for z in range(forecasts.zone_count)])
    return HorizonMetrics(per_zone=per_zone, aggregate=aggregate)


def interval_coverage(forecasts: ForecastSet, levels=DEFAULT_INTERVALS) -> CoverageReport:
    """Share of (instance, step, zone) triples inside each central interval.

    Quantiles are sorted ascending per point first; the share of points that
    needed sorting is the crossing frequency.
    """
    _require(forecasts)
    columns = []
    for p in levels:
        tail = (1.0 - p) / 2.0
        columns.append((forecasts.level_index(tail), forecasts.level_index(1.0 - tail)))
    order = np.argsort(forecasts.quantile_levels)
    values = forecasts.forecasts[..., order]
    crossed = np.any(np.diff(values, axis=-1) < 0, axis=-1)
    ordered = np.sort(values, axis=-1)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    actual = forecasts.actuals
    coverage = []
    for lo, hi in columns:
        inside = (actual >= ordered[..., rank[lo]]) & (actual <= ordered[..., rank[hi]])
        coverage.append(float(inside.mean()))
    return CoverageReport(levels=[float(p) for p in levels], coverage=coverage, crossing_freq=float(crossed.mean()))


def pinball_scores(forecasts: ForecastSet) -> dict:
    """Mean pinball loss in C per quantile level"""
    _require(forecasts)
    scores = {}
    for j, q in enumerate(forecasts.quantile_levels):
        e = forecasts.actuals - forecasts.forecasts[..., j]
        scores[q] = float(np.mean(np.maximum(q * e, (q - 1.0) * e)))
    return scores


def plateau_step(curve: np.ndarray, tolerance: float = 0.05) -> int:
    """First step (1-based) from which the curve stays within ``tolerance`` of its last-quarter mean"""
    curve = np.asarray(curve, dtype=float)
    plateau = curve[-max(1, len(curve) // 4):].mean()
    within = np.abs(curve - plateau) <= tolerance * abs(plateau)
    step = len(curve)
    for h in range(len(curve) - 1, -1, -1):
        if not within[h]:
            break
        step = h + 1
    return step


def summarize(horizon: HorizonMetrics, coverage: CoverageReport, pinball: dict, instances: int,
              tolerance: float = 0.05) -> dict:
    return {
        "instances": int(instances),
        "horizon": horizon.horizon,
        "cvrmse_pct": {**{str(z + 1): float(v) for z, v in enumerate(horizon.aggregate)},
                       ALL_ZONES: float(horizon.aggregate.mean())},
        "pinball_c": {f"{q:g}": v for q, v in pinball.items()},
        "coverage": [{"level": lvl, "coverage": cov} for lvl, cov in zip(coverage.levels, coverage.coverage)],
        "crossing_freq": coverage.crossing_freq,
        "plateau_step": plateau_step(horizon.mean_curve, tolerance),
    }


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _six_digits(value):
    return float(f"{value:.6g}") if isinstance(value, (float, np.floating)) else value


def export_metrics(metrics, path: str, format: str = "csv"):
    """Write a HorizonMetrics or CoverageReport as CSV or JSON lines at 6 significant digits"""
    frame = metrics.to_frame() if hasattr(metrics, "to_frame") else pd.DataFrame(metrics)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        if format == "csv":
            frame.to_csv(path, index=False, float_format="%.6g", lineterminator="\n")
        elif format in ("jsonl", "json-lines"):
            with open(path, "w") as f:
                for record in frame.to_dict(orient="records"):
                    f.write(json.dumps({k: _six_digits(v) for k, v in record.items()}) + "\n")
        else:
            raise ConfigurationError(f"unknown metrics format {format!r}", field="format")
    except OSError as e:
        raise MetricError(f"cannot write metrics to {path}: {e}") from None
    logger.info(f"Wrote {len(frame)} metric rows to {path}")
