"""Attention-based biLSTM encoder-decoder with per-zone quantile heads.

Dataflow for one instance (batched forward adds a leading axis):

    past [n_past, F_past]     -> dense -> Self-MHA -> GRN -> biLSTM -> GRN   (input encoder)
    future [n_future, F_fut]  -> dense -> Self-MHA -> GRN -> biLSTM -> GRN   (input decoder)
    Cross-MHA(query=decoder, key/value=encoder) -> GRN
    biLSTM -> GRN                                                           (output decoder)
    dense head -> [n_future, zones, quantiles]

Dropout sits on every MHA and biLSTM output ahead of its GRN. When
2 * rnn_units differs from d_model a dense adapter follows each biLSTM.
"""
import logging
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from errors import ConfigurationError, DimensionError
from layers import (AttentionWeights, BiLstmWeights, DenseWeights, GrnWeights, bilstm_forward, dense_forward,
                    dropout_apply, grn_forward, init_bilstm, init_dense, init_grn, init_mha, mha_forward)
from numerics import ParameterStore, Tensor, as_tensor, reshape
from pipeline import FUTURE_FEATURES, PAST_FEATURES, TARGET_FEATURES, ScalerSpec

logger = logging.getLogger(__name__)

DEFAULT_QUANTILES = [0.005, 0.025, 0.05, 0.5, 0.95, 0.975, 0.995]


@dataclass
class ModelConfig:
    n_past: int = 672
    n_future: int = 96
    past_feature_count: int = len(PAST_FEATURES)
    future_feature_count: int = len(FUTURE_FEATURES)
    zone_count: int = 5
    rnn_units: int = 200
    mha_heads: int = 4
    d_model: int = 400
    dropout_rate: float = 0.3
    quantile_levels: list = field(default_factory=lambda: list(DEFAULT_QUANTILES))
    rng_seed: int = 0
    past_features: list = field(default_factory=lambda: list(PAST_FEATURES))
    future_features: list = field(default_factory=lambda: list(FUTURE_FEATURES))

    def validate(self):
        for name in ("n_past", "n_future", "past_feature_count", "future_feature_count", "zone_count",
                     "rnn_units", "mha_heads", "d_model"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"must be a positive integer, got {value!r}", field=f"model.{name}")
        if self.d_model % self.mha_heads:
            raise ConfigurationError(f"d_model {self.d_model} is not divisible by mha_heads {self.mha_heads}",
                                     field="model.d_model")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("must lie in [0, 1)", field="model.dropout_rate")
        levels = list(self.quantile_levels)
        if not levels or any(not 0.0 < q < 1.0 for q in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigurationError("must be strictly ascending inside (0, 1)", field="model.quantile_levels")
        if 0.5 not in levels:
            raise ConfigurationError("must contain the median 0.5", field="model.quantile_levels")
        if len(self.past_features) != self.past_feature_count:
            raise ConfigurationError(f"{len(self.past_features)} names for {self.past_feature_count} features",
                                     field="model.past_features")
        if len(self.future_features) != self.future_feature_count:
            raise ConfigurationError(f"{len(self.future_features)} names for {self.future_feature_count} features",
                                     field="model.future_features")

    @property
    def quantile_count(self) -> int:
        return len(self.quantile_levels)

    @property
    def median_index(self) -> int:
        return list(self.quantile_levels).index(0.5)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown keys {sorted(unknown)}", field="model")
        return cls(**data)


@dataclass
class QuantileForecast:
    values: np.ndarray  # [n_future, zones, quantiles] in C (leading batch axis if batched)
    quantile_levels: list
    metadata: dict = field(default_factory=dict)

    def median(self) -> np.ndarray:
        return self.values[..., self.quantile_levels.index(0.5)]


@dataclass
class BranchWeights:
    mha: AttentionWeights
    mha_grn: GrnWeights
    lstm: BiLstmWeights
    adapter: DenseWeights  # None when 2 * units == d_model
    lstm_grn: GrnWeights


@dataclass
class ModelParams:
    cfg: ModelConfig
    store: ParameterStore
    past_proj: DenseWeights
    future_proj: DenseWeights
    encoder: BranchWeights
    decoder: BranchWeights
    cross_mha: AttentionWeights
    cross_grn: GrnWeights
    output_lstm: BiLstmWeights
    output_adapter: DenseWeights
    output_grn: GrnWeights
    head: DenseWeights

    def count(self) -> int:
        return self.store.count()

    def summary(self) -> list:
        return [(name, p.shape) for name, p in self.store.named()]


def _init_branch(store: ParameterStore, name: str, cfg: ModelConfig, rng: np.random.Generator) -> BranchWeights:
    width = 2 * cfg.rnn_units
    return BranchWeights(
        mha=init_mha(store, f"{name}/self_mha", cfg.d_model, cfg.mha_heads, rng),
        mha_grn=init_grn(store, f"{name}/self_mha_grn", cfg.d_model, rng),
        lstm=init_bilstm(store, f"{name}/bilstm", cfg.d_model, cfg.rnn_units, rng),
        adapter=None if width == cfg.d_model else init_dense(store, f"{name}/adapter", width, cfg.d_model, rng),
        lstm_grn=init_grn(store, f"{name}/bilstm_grn", cfg.d_model, rng),
    )


def build_model(cfg: ModelConfig) -> ModelParams:
    """Allocate and initialize every weight from ``cfg.rng_seed``"""
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    store = ParameterStore()
    width = 2 * cfg.rnn_units
    params = ModelParams(
        cfg=cfg,
        store=store,
        past_proj=init_dense(store, "encoder/input_proj", cfg.past_feature_count, cfg.d_model, rng),
        future_proj=init_dense(store, "decoder/input_proj", cfg.future_feature_count, cfg.d_model, rng),
        encoder=_init_branch(store, "encoder", cfg, rng),
        decoder=_init_branch(store, "decoder", cfg, rng),
        cross_mha=init_mha(store, "cross_mha", cfg.d_model, cfg.mha_heads, rng),
        cross_grn=init_grn(store, "cross_mha_grn", cfg.d_model, rng),
        output_lstm=init_bilstm(store, "output_decoder/bilstm", cfg.d_model, cfg.rnn_units, rng),
        output_adapter=None if width == cfg.d_model else init_dense(store, "output_decoder/adapter", width,
                                                                    cfg.d_model, rng),
        output_grn=init_grn(store, "output_decoder/bilstm_grn", cfg.d_model, rng),
        head=init_dense(store, "quantile_head", cfg.d_model, cfg.zone_count * cfg.quantile_count, rng),
    )
    logger.info(f"Built model with {len(store)} tensors, {store.count()} weights")
    return params


@contextmanager
def _stage(name: str):
    try:
        yield
    except DimensionError as e:
        raise DimensionError(f"{name}: {e}") from None


def _recurrent_block(x: Tensor, lstm: BiLstmWeights, adapter: DenseWeights, grn: GrnWeights, rate: float,
                     training: bool, rng: np.random.Generator) -> Tensor:
    h = bilstm_forward(x, lstm)
    if adapter is not None:
        h = dense_forward(h, adapter)
    return grn_forward(dropout_apply(h, rate, training, rng), grn)


def _branch(x: Tensor, w: BranchWeights, rate: float, training: bool, rng: np.random.Generator,
            attention: dict, name: str) -> Tensor:
    a, weights = mha_forward(x, x, w.mha, return_weights=True)
    attention[name] = weights.data
    h = grn_forward(dropout_apply(a, rate, training, rng), w.mha_grn)
    return _recurrent_block(h, w.lstm, w.adapter, w.lstm_grn, rate, training, rng)


def model_forward(params: ModelParams, past, future, training: bool = False, rng: np.random.Generator = None,
                  return_attention: bool = False):
    """[B, n_past, F_past], [B, n_future, F_future] -> [B, n_future, zones, quantiles] in scaled units.

    Unbatched 2-D inputs give an unbatched 3-D output.
    """
    cfg = params.cfg
    past, future = as_tensor(past), as_tensor(future)
    with _stage("inputs"):
        if past.shape[-2:] != (cfg.n_past, cfg.past_feature_count):
            raise DimensionError(f"past {past.shape} != [..., {cfg.n_past}, {cfg.past_feature_count}]")
        if future.shape[-2:] != (cfg.n_future, cfg.future_feature_count):
            raise DimensionError(f"future {future.shape} != [..., {cfg.n_future}, {cfg.future_feature_count}]")
        if past.shape[:-2] != future.shape[:-2]:
            raise DimensionError(f"batch shapes differ: {past.shape[:-2]} vs {future.shape[:-2]}")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    rate = cfg.dropout_rate
    attention = {}

    with _stage("input encoder"):
        enc = _branch(dense_forward(past, params.past_proj), params.encoder, rate, training, rng, attention,
                      "encoder")
    with _stage("input decoder"):
        dec = _branch(dense_forward(future, params.future_proj), params.decoder, rate, training, rng, attention,
                      "decoder")
    with _stage("cross attention"):
        cross, weights = mha_forward(dec, enc, params.cross_mha, return_weights=True)
        attention["cross"] = weights.data
        cross = grn_forward(dropout_apply(cross, rate, training, rng), params.cross_grn)
    with _stage("output decoder"):
        out = _recurrent_block(cross, params.output_lstm, params.output_adapter, params.output_grn, rate,
                               training, rng)
    with _stage("quantile head"):
        y = dense_forward(out, params.head)
        y = reshape(y, y.shape[:-1] + (cfg.zone_count, cfg.quantile_count))
    if return_attention:
        return y, attention
    return y


def _inverse_targets(scaled: np.ndarray, spec: ScalerSpec) -> np.ndarray:
    # [..., zones, quantiles] -> C, one interval per zone
    moved = np.moveaxis(scaled, -1, -2)
    return np.moveaxis(spec.inverse_array(moved, TARGET_FEATURES), -1, -2)


def predict(params: ModelParams, cfg: ModelConfig, raw_past, raw_future, scalers: ScalerSpec) -> QuantileForecast:
    """Scale physical inputs, run inference and return quantiles in C.

    Inputs outside their scaling interval are clamped; the counts land in
    ``metadata["clamped"]``.
    """
    if cfg.to_dict() != params.cfg.to_dict():
        raise ConfigurationError("config does not match the parameters' config", field="model")
    counter = Counter()
    past = scalers.scale_array(np.asarray(raw_past, dtype=float), cfg.past_features, counter)
    future = scalers.scale_array(np.asarray(raw_future, dtype=float), cfg.future_features, counter)
    scaled = model_forward(params, past, future, training=False).data
    return QuantileForecast(
        values=_inverse_targets(scaled, scalers),
        quantile_levels=list(cfg.quantile_levels),
        metadata={"clamped": dict(counter)},
    )


def forecast_samples(params: ModelParams, samples, scalers: ScalerSpec, batch_size: int = 256) -> tuple:
    """Run every window of a SampleSet; returns (forecasts [N, H, Z, Q], actuals [N, H, Z]) in C"""
    forecasts, actuals = [], []
    for start in range(0, len(samples), batch_size):
        past, future, target = samples.batch(range(start, min(start + batch_size, len(samples))))
        scaled = model_forward(params, past, future, training=False).data
        forecasts.append(_inverse_targets(scaled, scalers))
        actuals.append(scalers.inverse_array(target, TARGET_FEATURES))
    cfg = params.cfg
    if not forecasts:
        return (np.zeros((0, cfg.n_future, cfg.zone_count, cfg.quantile_count)),
                np.zeros((0, cfg.n_future, cfg.zone_count)))
    return np.concatenate(forecasts), np.concatenate(actuals)
