import json
import struct

import numpy as np
import pytest

from errors import CheckpointError, ConfigurationError, DimensionError, TrainingError
from model import build_model, model_forward, predict
from numerics import ParameterStore, backward
from pipeline import FUTURE_FEATURES, PAST_FEATURES, PipelineConfig, ScalerSpec, prepare_dataset
from training import (CHECKPOINT_MAGIC, CHECKPOINT_VERSION, OptimizerState, TrainHyper, adam_step,
                      checkpoint_from_params, clip_grad_norm, evaluate_loss, fit, load_checkpoint,
                      params_from_checkpoint, pinball_loss, save_checkpoint, total_quantile_loss)


def test_pinball_examples():
    assert pinball_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]), 0.3).item() == 0.0
    assert pinball_loss(np.array([1.0]), np.array([0.0]), 0.5).item() == pytest.approx(0.5)
    assert pinball_loss(np.array([0.0]), np.array([1.0]), 0.9).item() == pytest.approx(0.1)
    with pytest.raises(ConfigurationError):
        pinball_loss(np.zeros(2), np.zeros(2), 1.0)
    with pytest.raises(DimensionError):
        pinball_loss(np.zeros(2), np.zeros(3), 0.5)


def test_pinball_is_convex_in_prediction():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        q, lam = rng.uniform(0.01, 0.99), rng.uniform()
        y, a, b = rng.normal(size=(3, 1)) * 5.0
        mixed = pinball_loss(y, lam * a + (1 - lam) * b, q).item()
        bound = lam * pinball_loss(y, a, q).item() + (1 - lam) * pinball_loss(y, b, q).item()
        assert mixed <= bound + 1e-12


def test_median_level_is_half_mae(rng):
    y = rng.normal(size=(4, 3))
    y_hat = rng.normal(size=(4, 3))
    loss = total_quantile_loss(y, y_hat[..., None], [0.5]).item()
    assert abs(loss - 0.5 * np.mean(np.abs(y - y_hat))) < 1e-12


def test_total_loss_properties(rng):
    levels = [0.05, 0.5, 0.95]
    y = rng.normal(size=(5, 2))
    assert total_quantile_loss(y, np.repeat(y[..., None], 3, axis=-1), levels).item() == 0.0
    y_hat = rng.normal(size=(5, 2, 3))
    base = total_quantile_loss(y, y_hat, levels).item()
    shifted = total_quantile_loss(y + 4.0, y_hat + 4.0, levels).item()
    assert shifted == pytest.approx(base, abs=1e-12)
    with pytest.raises(DimensionError):
        total_quantile_loss(y, y_hat, [0.5, 0.9])


def _single_param_store(value, grad):
    store = ParameterStore()
    p = store.add("w", np.array(value, dtype=float))
    p.grad = np.array(grad, dtype=float)
    return store, p


def test_adam_zero_gradient_keeps_parameters():
    store, p = _single_param_store([1.0, -2.0], [0.0, 0.0])
    state = OptimizerState.create(store)
    adam_step(store, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_is_about_lr():
    store, p = _single_param_store([0.0], [5.0])
    state = OptimizerState.create(store, lr=0.01)
    adam_step(store, state)
    assert p.data[0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_with_zero_betas_is_sign_descent():
    store, p = _single_param_store([0.0, 0.0], [2.0, -3.0])
    state = OptimizerState.create(store, lr=0.1, beta1=0.0, beta2=0.0)
    adam_step(store, state)
    np.testing.assert_allclose(p.data, [-0.1 * 2.0 / (2.0 + 1e-8), 0.1 * 3.0 / (3.0 + 1e-8)])


def test_adam_nan_gradient_aborts_whole_step():
    store = ParameterStore()
    a = store.add("a", np.ones(2))
    b = store.add("b", np.ones(2))
    a.grad = np.ones(2)
    b.grad = np.array([np.nan, 0.0])
    state = OptimizerState.create(store)
    with pytest.raises(TrainingError) as info:
        adam_step(store, state)
    assert info.value.parameter == "b"
    np.testing.assert_array_equal(a.data, np.ones(2))
    assert state.t == 0


def test_clip_grad_norm():
    store = ParameterStore()
    a = store.add("a", np.zeros(2))
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm(store, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(a.grad) == pytest.approx(1.0)
    a.grad = np.array([0.3, 0.4])
    clip_grad_norm(store, 1.0)
    np.testing.assert_array_equal(a.grad, [0.3, 0.4])


def test_hyper_defaults_and_validation():
    hyper = TrainHyper()
    assert hyper.batch_size == 256
    assert hyper.learning_rate == 1e-3
    with pytest.raises(ConfigurationError):
        TrainHyper(batch_size=0).validate()
    with pytest.raises(ConfigurationError):
        TrainHyper(patience=-1).validate()


@pytest.fixture(scope="module")
def tiny_splits(short_dataset):
    return prepare_dataset(short_dataset, 8, 4, PipelineConfig(stride=4), seed=3)


def _tiny_params(tiny_config):
    return build_model(tiny_config)


def test_fit_reports_and_keeps_best(tiny_config, tiny_splits, tmp_path):
    params = _tiny_params(tiny_config)
    hyper = TrainHyper(batch_size=16, max_epochs=3, patience=5, learning_rate=1e-2)
    log = tmp_path / "train_log.jsonl"
    ckpt_path = tmp_path / "model.ckpt"
    report, ckpt = fit(params, tiny_splits.train, tiny_splits.validation, hyper, scaler=ScalerSpec().to_dict(),
                       seed=1, log_path=str(log), checkpoint_path=str(ckpt_path))
    assert report.epochs[0].epoch == 0 and report.epochs[0].train_loss is None
    assert report.best_val_loss == min(report.val_losses)
    assert report.val_losses[report.best_epoch] == report.best_val_loss
    lines = log.read_text().splitlines()
    assert len(lines) == len(report.epochs)
    assert json.loads(lines[1])["epoch"] == 1
    reloaded = params_from_checkpoint(load_checkpoint(str(ckpt_path)))
    val = evaluate_loss(reloaded, tiny_splits.validation)
    assert abs(val - report.best_val_loss) < 1e-9
    assert ckpt.training["stopping_reason"] == report.stopping_reason


def test_fit_training_loss_decreases(tiny_config, tiny_splits):
    params = _tiny_params(tiny_config)
    hyper = TrainHyper(batch_size=16, max_epochs=3, patience=10, learning_rate=3e-3)
    report, _ = fit(params, tiny_splits.train, tiny_splits.validation, hyper, seed=0)
    losses = report.train_losses
    assert len(losses) == 3
    assert losses[0] > losses[1] > losses[2]


@pytest.mark.slow
def test_overfits_a_single_batch(tiny_config, tiny_splits):
    params = _tiny_params(tiny_config)
    past, future, target = tiny_splits.train.batch([0])
    opt = OptimizerState.create(params.store, lr=5e-3)
    losses = []
    for _ in range(500):
        loss = total_quantile_loss(target, model_forward(params, past, future), tiny_config.quantile_levels)
        losses.append(loss.item())
        backward(loss, params.store)
        adam_step(params.store, opt)
    assert min(losses) < 0.05 * losses[0]


def test_patience_zero_stops_at_first_non_improving_epoch(tiny_config, tiny_splits):
    params = _tiny_params(tiny_config)
    # lr this large makes the first epoch worse than the untrained model
    hyper = TrainHyper(batch_size=16, max_epochs=5, patience=0, learning_rate=5.0, clip_norm=0.0)
    report, _ = fit(params, tiny_splits.train, tiny_splits.validation, hyper, seed=0)
    non_improving = [r.epoch for r in report.epochs[1:]
                     if r.val_loss >= min(x.val_loss for x in report.epochs[:r.epoch])]
    assert report.stopping_reason == "early_stopping"
    assert report.epochs[-1].epoch == non_improving[0]


def test_fit_is_deterministic(tiny_config, tiny_splits):
    hyper = TrainHyper(batch_size=16, max_epochs=1)
    first = _tiny_params(tiny_config)
    second = _tiny_params(tiny_config)
    fit(first, tiny_splits.train, tiny_splits.validation, hyper, seed=4)
    fit(second, tiny_splits.train, tiny_splits.validation, hyper, seed=4)
    for (_, a), (_, b) in zip(first.store.named(), second.store.named()):
        np.testing.assert_array_equal(a.data, b.data)


def test_fit_rejects_empty_split(tiny_config, tiny_splits):
    empty = tiny_splits.train.subset(np.zeros(len(tiny_splits.train), dtype=bool))
    with pytest.raises(ConfigurationError):
        fit(_tiny_params(tiny_config), empty, tiny_splits.validation, TrainHyper(max_epochs=1))


def test_checkpoint_round_trip_is_byte_identical(tiny_config, tmp_path, rng):
    params = _tiny_params(tiny_config)
    ckpt = checkpoint_from_params(params, ScalerSpec().to_dict(), 9, {"best_epoch": 2, "best_val_loss": 0.125})
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ckpt, str(first))
    save_checkpoint(load_checkpoint(str(first)), str(second))
    assert first.read_bytes() == second.read_bytes()

    restored = params_from_checkpoint(load_checkpoint(str(first)))
    past = rng.uniform(-1, 1, size=(2, tiny_config.n_past, len(PAST_FEATURES)))
    future = rng.uniform(-1, 1, size=(2, tiny_config.n_future, len(FUTURE_FEATURES)))
    np.testing.assert_array_equal(model_forward(restored, past, future).data, model_forward(params, past, future).data)
    spec = ScalerSpec.from_dict(load_checkpoint(str(first)).scaler)
    raw_past, raw_future = spec.inverse_array(past[0], PAST_FEATURES), spec.inverse_array(future[0], FUTURE_FEATURES)
    np.testing.assert_array_equal(predict(restored, restored.cfg, raw_past, raw_future, spec).values,
                                  predict(params, params.cfg, raw_past, raw_future, spec).values)


def test_checkpoint_rejects_damaged_files(tiny_config, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(checkpoint_from_params(_tiny_params(tiny_config), {}, 0), str(path))
    blob = path.read_bytes()

    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(str(truncated))

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(bad_magic))

    bad_version = tmp_path / "version.ckpt"
    bad_version.write_bytes(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(str(bad_version))

    stub = tmp_path / "stub.ckpt"
    stub.write_bytes(blob[:10])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(stub))



@pytest.mark.parametrize("header", [
    {"format_version": 1, "config": {}, "scaler": {}, "seed": 0},
    {"format_version": 1, "config": {}, "scaler": {}, "seed": 0, "tensors": ["w"]},
    {"format_version": 1, "config": {}, "tensors": []},
    [1, 2, 3],
])
def test_checkpoint_with_malformed_header_is_rejected(tmp_path, header):
    raw = json.dumps(header).encode("utf-8")
    path = tmp_path / "model.ckpt"
    path.write_bytes(struct.pack("<4sIQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(raw)) + raw)
    with pytest.raises(CheckpointError, match="malformed header"):
        load_checkpoint(str(path))
