import numpy as np
import pytest

from errors import ConfigurationError, DimensionError
from model import ModelConfig, build_model, model_forward, predict
from numerics import gradient_check
from pipeline import FUTURE_FEATURES, PAST_FEATURES, FEATURE_INTERVALS, TARGET_FEATURES, ScalerSpec
from training import total_quantile_loss


def _dense(n, m):
    return n * m + m


def _expected_count(cfg):
    d, u = cfg.d_model, cfg.rnn_units
    mha = 4 * _dense(d, d)
    grn = 4 * _dense(d, d) + 2 * d
    bilstm = 2 * (d * 4 * u + u * 4 * u + 4 * u)
    adapter = 0 if 2 * u == d else _dense(2 * u, d)
    branch = mha + grn + bilstm + adapter + grn
    return (_dense(cfg.past_feature_count, d) + _dense(cfg.future_feature_count, d) + 2 * branch
            + mha + grn + bilstm + adapter + grn + _dense(d, cfg.zone_count * cfg.quantile_count))


def _inputs(cfg, rng, batch=None):
    lead = () if batch is None else (batch,)
    past = rng.uniform(-1, 1, size=lead + (cfg.n_past, cfg.past_feature_count))
    future = rng.uniform(-1, 1, size=lead + (cfg.n_future, cfg.future_feature_count))
    return past, future


def test_config_defaults():
    cfg = ModelConfig()
    cfg.validate()
    assert (cfg.n_past, cfg.n_future, cfg.mha_heads, cfg.rnn_units) == (672, 96, 4, 200)
    assert cfg.dropout_rate == 0.3
    assert cfg.past_feature_count == len(PAST_FEATURES) == 36
    assert cfg.future_feature_count == len(FUTURE_FEATURES) == 21
    assert cfg.quantile_levels[cfg.median_index] == 0.5


@pytest.mark.parametrize("changes, field", [
    ({"d_model": 10, "mha_heads": 4}, "model.d_model"),
    ({"quantile_levels": [0.9, 0.5]}, "model.quantile_levels"),
    ({"quantile_levels": [0.1, 0.9]}, "model.quantile_levels"),
    ({"dropout_rate": 1.0}, "model.dropout_rate"),
    ({"rnn_units": 0}, "model.rnn_units"),
])
def test_config_rejects_invalid_fields(changes, field):
    with pytest.raises(ConfigurationError) as info:
        ModelConfig(**changes).validate()
    assert info.value.field == field


def test_build_accepts_divisible_width():
    build_model(ModelConfig(n_past=4, n_future=2, rnn_units=2, mha_heads=4, d_model=8))


def test_same_seed_same_parameters(tiny_config):
    a, b = build_model(tiny_config), build_model(tiny_config)
    for (name_a, pa), (name_b, pb) in zip(a.store.named(), b.store.named()):
        assert name_a == name_b
        np.testing.assert_array_equal(pa.data, pb.data)


@pytest.mark.parametrize("units, d_model", [(4, 8), (3, 8)])
def test_parameter_count_matches_layer_shapes(units, d_model):
    cfg = ModelConfig(n_past=8, n_future=4, rnn_units=units, mha_heads=2, d_model=d_model)
    params = build_model(cfg)
    assert params.count() == _expected_count(cfg)
    assert sum(int(np.prod(shape)) for _, shape in params.summary()) == params.count()


def test_forward_shapes_batched_and_unbatched(tiny_config, rng):
    params = build_model(tiny_config)
    past, future = _inputs(tiny_config, rng, batch=3)
    out = model_forward(params, past, future)
    assert out.shape == (3, 4, 5, 7)
    single = model_forward(params, past[1], future[1])
    assert single.shape == (4, 5, 7)
    np.testing.assert_allclose(single.data, out.data[1], atol=1e-12)


def test_forward_attention_weights(tiny_config, rng):
    params = build_model(tiny_config)
    past, future = _inputs(tiny_config, rng, batch=2)
    _, attention = model_forward(params, past, future, return_attention=True)
    cross = attention["cross"]
    assert cross.shape == (2, 2, tiny_config.n_future, tiny_config.n_past)
    np.testing.assert_allclose(cross.sum(axis=-1), 1.0)


def test_inference_is_deterministic(tiny_config, rng):
    params = build_model(ModelConfig(**{**tiny_config.to_dict(), "dropout_rate": 0.3}))
    past, future = _inputs(tiny_config, rng)
    first = model_forward(params, past, future, training=False).data
    second = model_forward(params, past, future, training=False).data
    np.testing.assert_array_equal(first, second)
    trained = model_forward(params, past, future, training=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(first, trained)


def test_forward_names_failing_stage(tiny_config, rng):
    params = build_model(tiny_config)
    past, future = _inputs(tiny_config, rng)
    with pytest.raises(DimensionError, match="inputs"):
        model_forward(params, past[:, :10], future)
    with pytest.raises(DimensionError, match="inputs"):
        model_forward(params, past, future[:3])


def test_pinball_gradient_through_whole_model(tiny_config, rng):
    params = build_model(tiny_config)
    past, future = _inputs(tiny_config, rng, batch=2)
    target = rng.uniform(-1, 1, size=(2, tiny_config.n_future, tiny_config.zone_count))

    def f():
        return total_quantile_loss(target, model_forward(params, past, future), tiny_config.quantile_levels)

    report = gradient_check(f, list(params.store), tol=1e-4, max_coords=6, rng=np.random.default_rng(2))
    assert report.passed, report


def test_predict_returns_celsius_and_counts_clamps(tiny_config, rng):
    params = build_model(tiny_config)
    spec = ScalerSpec()
    lo, hi = spec.bounds(PAST_FEATURES)
    raw_past = lo + (hi - lo) * rng.uniform(size=(tiny_config.n_past, len(PAST_FEATURES)))
    lo_f, hi_f = spec.bounds(FUTURE_FEATURES)
    raw_future = lo_f + (hi_f - lo_f) * rng.uniform(size=(tiny_config.n_future, len(FUTURE_FEATURES)))
    raw_past[0, PAST_FEATURES.index("t_out")] = 99.0
    forecast = predict(params, tiny_config, raw_past, raw_future, spec)
    assert forecast.values.shape == (4, 5, 7)
    t_lo, t_hi = FEATURE_INTERVALS[TARGET_FEATURES[0]]
    assert np.all(np.isfinite(forecast.values))
    # inverse of the target interval applied to the raw head output
    scaled = model_forward(params, spec.scale_array(raw_past, PAST_FEATURES),
                           spec.scale_array(raw_future, FUTURE_FEATURES)).data
    np.testing.assert_allclose(forecast.values, (scaled + 1.0) / 2.0 * (t_hi - t_lo) + t_lo, atol=1e-9)
    assert forecast.metadata["clamped"] == {"t_out": 1}
    assert forecast.median().shape == (4, 5)


def test_predict_constant_inputs_are_finite(tiny_config):
    params = build_model(tiny_config)
    past = np.full((tiny_config.n_past, len(PAST_FEATURES)), 0.5)
    future = np.full((tiny_config.n_future, len(FUTURE_FEATURES)), 0.5)
    forecast = predict(params, tiny_config, past, future, ScalerSpec())
    assert np.all(np.isfinite(forecast.values))


@pytest.mark.slow
def test_full_config_output_shape(rng):
    cfg = ModelConfig()
    params = build_model(cfg)
    past, future = _inputs(cfg, rng)
    assert model_forward(params, past, future).shape == (96, 5, 7)


def test_forecast_responds_to_window_opening(tiny_config, rng):
    params = build_model(tiny_config)
    past, future = _inputs(tiny_config, rng, batch=1)
    ws = [FUTURE_FEATURES.index(f"ws_{i}") for i in range(1, 5)]
    closed = future.copy()
    closed[..., ws] = -1.0
    opened = closed.copy()
    opened[:, 1:3, ws[0]] = 1.0
    shift = model_forward(params, past, opened).data - model_forward(params, past, closed).data
    assert np.abs(shift).max() > 1e-6
