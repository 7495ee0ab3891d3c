"""Dataset -> scaled, windowed model samples.

Cyclical calendar encodings, min-max scaling to [-1, 1] against fixed
physical intervals, Gaussian forecast noise on the known-future weather,
672/96 sliding windows and a chronological 60/20/20 split that drops
windows crossing a split boundary.

Windows are materialized lazily: a year of 672-step windows would not fit
in memory, so ``SampleSet`` keeps the scaled feature matrices and the
window origins and slices on demand.
"""
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from datetime import date

import numpy as np
import pandas as pd

from building_sim import SimulatedDataset
from errors import ConfigurationError, DatasetSchemaError

logger = logging.getLogger(__name__)

FEATURE_SCHEMA_VERSION = 1

WEATHER_FEATURES = ["t_out", "h_out", "w_out", "l_norm", "l_hor"]
TIME_FEATURES = ["hour_sin", "hour_cos", "dow_sin", "dow_cos", "month_sin", "month_cos"]
PAST_FEATURES = (
    WEATHER_FEATURES + TIME_FEATURES + ["hol"]
    + [f"e_{i}" for i in range(1, 6)]
    + [f"occu_{i}" for i in range(1, 6)]
    + [f"ws_{i}" for i in range(1, 5)]
    + [f"sp_heat_{i}" for i in range(1, 6)]
    + [f"t_in_{i}" for i in range(1, 6)]
)
FUTURE_FEATURES = (
    WEATHER_FEATURES + TIME_FEATURES + ["hol"]
    + [f"ws_{i}" for i in range(1, 5)]
    + [f"sp_heat_{i}" for i in range(1, 6)]
)
TARGET_FEATURES = [f"t_in_{i}" for i in range(1, 6)]

FEATURE_INTERVALS = {
    "t_out": (-30.0, 40.0),
    "h_out": (0.0, 100.0),
    "w_out": (0.0, 25.0),
    "l_norm": (0.0, 1300.0),
    "l_hor": (0.0, 1300.0),
    **{name: (-1.0, 1.0) for name in TIME_FEATURES},
    "hol": (0.0, 1.0),
    **{f"e_{i}": (0.0, 1000.0) for i in range(1, 6)},
    **{f"occu_{i}": (0.0, 30.0) for i in range(1, 6)},
    **{f"ws_{i}": (0.0, 1.0) for i in range(1, 5)},
    **{f"sp_heat_{i}": (15.0, 30.0) for i in range(1, 6)},
    **{f"t_in_{i}": (10.0, 40.0) for i in range(1, 6)},
}

PERIODS = {"hour": 24.0, "dow": 7.0, "month": 12.0}


@dataclass
class PipelineConfig:
    noise_sd: float = 0.01
    noise_sd_overrides: dict = field(default_factory=dict)
    stride: int = 1
    split_fractions: list = field(default_factory=lambda: [0.6, 0.2, 0.2])

    def validate(self):
        if self.noise_sd < 0 or any(v < 0 for v in self.noise_sd_overrides.values()):
            raise ConfigurationError("must be non-negative", field="pipeline.noise_sd")
        unknown = set(self.noise_sd_overrides) - set(WEATHER_FEATURES)
        if unknown:
            raise ConfigurationError(f"unknown weather features {sorted(unknown)}", field="pipeline.noise_sd_overrides")
        if self.stride < 1:
            raise ConfigurationError("must be at least 1", field="pipeline.stride")
        fractions = self.split_fractions
        if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigurationError("need three positive fractions summing to 1", field="pipeline.split_fractions")

    def noise_sds(self) -> np.ndarray:
        return np.array([self.noise_sd_overrides.get(f, self.noise_sd) for f in WEATHER_FEATURES])


# ---------------------------------------------------------------------------
# calendar encodings
# ---------------------------------------------------------------------------

def _cycle(u, period: float) -> tuple:
    angle = 2.0 * np.pi * np.asarray(u, dtype=float) / period
    return np.sin(angle), np.cos(angle)


def encode_time_features(timestamp, holiday_calendar=()) -> dict:
    """sin/cos of hour of day, day of week and month, plus the holiday flag"""
    ts = pd.Timestamp(timestamp)
    holidays = {d if isinstance(d, date) else date.fromisoformat(str(d)) for d in holiday_calendar}
    hour_sin, hour_cos = _cycle(ts.hour + ts.minute / 60.0, PERIODS["hour"])
    dow_sin, dow_cos = _cycle(ts.dayofweek, PERIODS["dow"])
    month_sin, month_cos = _cycle(ts.month - 1, PERIODS["month"])
    return {
        "hour_sin": float(hour_sin), "hour_cos": float(hour_cos),
        "dow_sin": float(dow_sin), "dow_cos": float(dow_cos),
        "month_sin": float(month_sin), "month_cos": float(month_cos),
        "hol": int(ts.date() in holidays),
    }


def time_feature_frame(index: pd.DatetimeIndex) -> pd.DataFrame:
    """Vectorized calendar encodings for a whole index"""
    hour_sin, hour_cos = _cycle(index.hour.to_numpy() + index.minute.to_numpy() / 60.0, PERIODS["hour"])
    dow_sin, dow_cos = _cycle(index.dayofweek.to_numpy(), PERIODS["dow"])
    month_sin, month_cos = _cycle(index.month.to_numpy() - 1, PERIODS["month"])
    return pd.DataFrame({
        "hour_sin": hour_sin, "hour_cos": hour_cos,
        "dow_sin": dow_sin, "dow_cos": dow_cos,
        "month_sin": month_sin, "month_cos": month_cos,
    }, index=index)


def feature_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Every past/future/target column by header name, calendar encodings added"""
    needed = sorted(set(PAST_FEATURES + FUTURE_FEATURES + TARGET_FEATURES) - set(TIME_FEATURES),
                    key=(PAST_FEATURES + FUTURE_FEATURES).index)
    for col in needed:
        if col not in frame.columns:
            raise DatasetSchemaError(f"dataset has no column {col!r}", column=col)
    out = pd.concat([frame[needed], time_feature_frame(frame.index)], axis=1)
    return out


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

@dataclass
class ScalerSpec:
    intervals: dict = field(default_factory=lambda: dict(FEATURE_INTERVALS))

    def validate(self):
        for name, (lo, hi) in self.intervals.items():
            if not hi > lo:
                raise ConfigurationError(f"interval [{lo}, {hi}] is empty", field=f"scaler.{name}")

    def bounds(self, features: list) -> tuple:
        try:
            lo = np.array([self.intervals[f][0] for f in features], dtype=float)
            hi = np.array([self.intervals[f][1] for f in features], dtype=float)
        except KeyError as e:
            raise ConfigurationError(f"no scaling interval for feature {e.args[0]!r}", field="scaler") from None
        return lo, hi

    def scale_array(self, values: np.ndarray, features: list, counter: Counter = None) -> np.ndarray:
        """Scale the last axis of ``values`` (one column per feature), clamping first"""
        lo, hi = self.bounds(features)
        values = np.asarray(values, dtype=float)
        clamped = np.clip(values, lo, hi)
        outside = (clamped != values).reshape(-1, len(features)).sum(axis=0)
        if outside.any():
            hits = {f: int(n) for f, n in zip(features, outside) if n}
            logger.warning(f"Clamped out-of-interval inputs: {hits}")
            if counter is not None:
                counter.update(hits)
        return 2.0 * (clamped - lo) / (hi - lo) - 1.0

    def inverse_array(self, scaled: np.ndarray, features: list) -> np.ndarray:
        lo, hi = self.bounds(features)
        return (np.asarray(scaled, dtype=float) + 1.0) / 2.0 * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {name: [lo, hi] for name, (lo, hi) in self.intervals.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ScalerSpec":
        return cls(intervals={name: (float(lo), float(hi)) for name, (lo, hi) in data.items()})


def scale(value, feature: str, spec: ScalerSpec, counter: Counter = None):
    """2 (v - min) / (max - min) - 1, out-of-interval values clamped and counted"""
    out = spec.scale_array(np.asarray(value, dtype=float)[..., None], [feature], counter)[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def inverse_scale(scaled, feature: str, spec: ScalerSpec):
    out = spec.inverse_array(np.asarray(scaled, dtype=float)[..., None], [feature])[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def add_forecast_noise(weather_future: np.ndarray, rng: np.random.Generator, sd,
                       features: list = WEATHER_FEATURES, spec: ScalerSpec = None) -> np.ndarray:
    """i.i.d. N(0, sd^2) per value in physical units, then clamped to the feature intervals.

    ``sd`` is one float or one value per feature column.
    """
    values = np.asarray(weather_future, dtype=float)
    sds = np.broadcast_to(np.asarray(sd, dtype=float), (len(features),))
    if np.any(sds < 0):
        raise ConfigurationError("noise sd must be non-negative", field="noise_sd")
    if not np.any(sds):
        return values.copy()
    noisy = values + rng.normal(0.0, 1.0, values.shape) * sds
    lo, hi = (spec or ScalerSpec()).bounds(features)
    return np.clip(noisy, lo, hi)


# ---------------------------------------------------------------------------
# windows and splits
# ---------------------------------------------------------------------------

@dataclass
class WindowedSample:
    past: np.ndarray  # [n_past, F_past]
    future: np.ndarray  # [n_future, F_future]
    target: np.ndarray  # [n_future, zones]
    origin: int
    timestamp: pd.Timestamp


class SampleSet:
    """Lazy windows over one scaled dataset.

    Window ``origin`` covers rows [origin, origin + n_past) as known past and
    [origin + n_past, origin + n_past + n_future) as known future and target.
    """

    def __init__(self, past: np.ndarray, future: np.ndarray, target: np.ndarray, weather_raw: np.ndarray,
                 index: pd.DatetimeIndex, origins: np.ndarray, n_past: int, n_future: int,
                 noise_sd: np.ndarray, noise_seed: int, spec: ScalerSpec):
        self.past_matrix = past
        self.future_matrix = future
        self.target_matrix = target
        self.weather_raw = weather_raw
        self.index = index
        self.origins = np.asarray(origins, dtype=np.int64)
        self.n_past = n_past
        self.n_future = n_future
        self.noise_sd = noise_sd
        self.noise_seed = noise_seed
        self.spec = spec
        self._weather_cols = [FUTURE_FEATURES.index(f) for f in WEATHER_FEATURES]

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def window_length(self) -> int:
        return self.n_past + self.n_future

    def subset(self, keep) -> "SampleSet":
        return SampleSet(self.past_matrix, self.future_matrix, self.target_matrix, self.weather_raw, self.index,
                         self.origins[keep], self.n_past, self.n_future, self.noise_sd, self.noise_seed, self.spec)

    def _future(self, origin: int) -> np.ndarray:
        start = origin + self.n_past
        rows = slice(start, start + self.n_future)
        future = self.future_matrix[rows].copy()
        if np.any(self.noise_sd):
            # seeded per origin so any batch order materializes the same noise
            rng = np.random.default_rng([self.noise_seed, int(origin)])
            noisy = add_forecast_noise(self.weather_raw[rows], rng, self.noise_sd, WEATHER_FEATURES, self.spec)
            future[:, self._weather_cols] = self.spec.scale_array(noisy, WEATHER_FEATURES)
        return future

    def __getitem__(self, i: int) -> WindowedSample:
        origin = int(self.origins[i])
        split = origin + self.n_past
        return WindowedSample(
            past=self.past_matrix[origin:split].copy(),
            future=self._future(origin),
            target=self.target_matrix[split:split + self.n_future].copy(),
            origin=origin,
            timestamp=self.index[origin],
        )

    def batch(self, indices) -> tuple:
        """(past [B, n_past, F], future [B, n_future, F], target [B, n_future, zones])"""
        samples = [self[int(i)] for i in indices]
        return (np.stack([s.past for s in samples]), np.stack([s.future for s in samples]),
                np.stack([s.target for s in samples]))


@dataclass
class DatasetSplits:
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    boundaries: tuple  # first row of validation, first row of test
    n_rows: int
    clamp_counts: dict = field(default_factory=dict)

    @property
    def row_ranges(self) -> dict:
        b1, b2 = self.boundaries
        return {"train": (0, b1), "validation": (b1, b2), "test": (b2, self.n_rows)}

    def items(self):
        return [("train", self.train), ("validation", self.validation), ("test", self.test)]


def build_windows(dataset, n_past: int = 672, n_future: int = 96, stride: int = 1, noise_sd=0.01,
                  noise_seed: int = 0, spec: ScalerSpec = None, counter: Counter = None) -> SampleSet:
    """Scale every feature and enumerate window origins 0, stride, 2*stride, ..."""
    frame = dataset.frame if isinstance(dataset, SimulatedDataset) else dataset
    spec = spec or ScalerSpec()
    spec.validate()
    if stride < 1:
        raise ConfigurationError("must be at least 1", field="stride")
    length = n_past + n_future
    n = len(frame)
    if n < length:
        raise ConfigurationError(f"dataset has {n} rows, windows need at least {length}", field="dataset")
    features = feature_frame(frame)
    origins = np.arange(0, n - length + 1, stride)
    sds = np.broadcast_to(np.asarray(noise_sd, dtype=float), (len(WEATHER_FEATURES),)).copy()
    return SampleSet(
        past=spec.scale_array(features[PAST_FEATURES].to_numpy(), PAST_FEATURES, counter),
        future=spec.scale_array(features[FUTURE_FEATURES].to_numpy(), FUTURE_FEATURES, counter),
        target=spec.scale_array(features[TARGET_FEATURES].to_numpy(), TARGET_FEATURES, counter),
        weather_raw=features[WEATHER_FEATURES].to_numpy(),
        index=frame.index,
        origins=origins,
        n_past=n_past,
        n_future=n_future,
        noise_sd=sds,
        noise_seed=noise_seed,
        spec=spec,
    )


def split_boundaries(n_rows: int, fractions=(0.6, 0.2, 0.2)) -> tuple:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or any(f <= 0 for f in fractions):
        raise ConfigurationError("need three positive fractions summing to 1", field="split_fractions")
    b1 = int(math.floor(fractions[0] * n_rows + 1e-9))
    b2 = int(math.floor((fractions[0] + fractions[1]) * n_rows + 1e-9))
    return b1, b2


def split_chronological(samples: SampleSet, fractions=(0.6, 0.2, 0.2)) -> DatasetSplits:
    """Contiguous train -> validation -> test row segments; windows crossing a boundary are dropped"""
    n_rows = len(samples.index)
    b1, b2 = split_boundaries(n_rows, fractions)
    start = samples.origins
    end = samples.origins + samples.window_length
    splits = {}
    for name, (lo, hi) in {"train": (0, b1), "validation": (b1, b2), "test": (b2, n_rows)}.items():
        keep = (start >= lo) & (end <= hi)
        if not keep.any():
            raise ConfigurationError(f"{name} split holds no complete window (rows {lo}-{hi}, window "
                                     f"{samples.window_length})", field="pipeline.split_fractions")
        splits[name] = samples.subset(keep)
    logger.info(f"Split {n_rows} rows at {b1}/{b2}: {len(splits['train'])} train, "
                f"{len(splits['validation'])} validation, {len(splits['test'])} test windows")
    return DatasetSplits(splits["train"], splits["validation"], splits["test"], (b1, b2), n_rows)


def prepare_dataset(dataset, n_past: int, n_future: int, cfg: PipelineConfig, seed: int,
                    spec: ScalerSpec = None) -> DatasetSplits:
    """Encode, scale, window and split in one go"""
    cfg.validate()
    counter = Counter()
    samples = build_windows(dataset, n_past, n_future, cfg.stride, cfg.noise_sds(), seed, spec, counter)
    splits = split_chronological(samples, cfg.split_fractions)
    splits.clamp_counts = dict(counter)
    return splits


def write_sample_manifest(splits: DatasetSplits, path: str):
    """CSV of every window origin with its split label"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    rows = []
    for name, samples in splits.items():
        for origin in samples.origins:
            rows.append((int(origin), samples.index[origin].strftime("%Y-%m-%dT%H:%M:%S"), name))
    pd.DataFrame(rows, columns=["origin", "timestamp", "split"]).to_csv(path, index=False, lineterminator="\n")
