"""Quantile loss, Adam, the epoch loop with early stopping and the checkpoint file."""
import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from errors import CheckpointError, ConfigurationError, DimensionError, TrainingError
from model import ModelConfig, ModelParams, build_model, model_forward
from numerics import ParameterStore, Tensor, as_tensor, backward, maximum, reduce_mean, scale, sub, take

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HVF1"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def pinball_loss(y, y_hat, q: float) -> Tensor:
    """mean(max(q * e, (q - 1) * e)) with e = y - y_hat"""
    if not 0.0 < q < 1.0:
        raise ConfigurationError(f"quantile level {q} outside (0, 1)", field="quantile_levels")
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise DimensionError(f"pinball_loss: target {y.shape} vs prediction {y_hat.shape}")
    e = sub(y, y_hat)
    return reduce_mean(maximum(scale(e, q), scale(e, q - 1.0)))


def total_quantile_loss(y, y_hat_all, levels) -> Tensor:
    """Average pinball loss over ``levels``; the last axis of ``y_hat_all`` indexes the level"""
    y, y_hat_all = as_tensor(y), as_tensor(y_hat_all)
    levels = list(levels)
    if y_hat_all.shape[-1] != len(levels):
        raise DimensionError(f"{y_hat_all.shape[-1]} quantile outputs for {len(levels)} levels")
    if y.shape != y_hat_all.shape[:-1]:
        raise DimensionError(f"target {y.shape} vs predictions {y_hat_all.shape}")
    total = None
    for j, q in enumerate(levels):
        term = pinball_loss(y, take(y_hat_all, j, -1), q)
        total = term if total is None else total + term
    return scale(total, 1.0 / len(levels))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, store: ParameterStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m={name: np.zeros(p.shape) for name, p in store.named()},
                   v={name: np.zeros(p.shape) for name, p in store.named()})


def adam_step(store: ParameterStore, state: OptimizerState):
    """One bias-corrected Adam update from the gradients held in ``store``.

    Any non-finite gradient aborts the whole step before a weight moves.
    """
    for name, p in store.named():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in {name}", parameter=name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, p in store.named():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = b1 * m + (1.0 - b1) * g if m is not None else (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g if v is not None else (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping"""
    norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in store)))
    if max_norm and max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in store:
            p.grad = p.grad * factor
    return norm


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    parameters: dict  # name -> float64 array, model order
    scaler: dict
    seed: int
    training: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def checkpoint_from_params(params: ModelParams, scaler: dict, seed: int, training: dict = None) -> Checkpoint:
    return Checkpoint(config=params.cfg.to_dict(), parameters=params.store.state_dict(), scaler=dict(scaler),
                      seed=int(seed), training=dict(training or {}))


def params_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    params = build_model(ModelConfig.from_dict(ckpt.config))
    try:
        params.store.load_state_dict(ckpt.parameters)
    except (ConfigurationError, DimensionError) as e:
        raise CheckpointError(f"checkpoint does not fit its own config: {e}") from None
    return params


def save_checkpoint(ckpt: Checkpoint, path: str):
    """Magic, version, header length, sorted-key JSON header, then little-endian float64 payloads.

    Written to a temp file and renamed into place.
    """
    tensors, payloads, offset = [], [], 0
    for name, value in ckpt.parameters.items():
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(np.shape(value)), "offset": offset, "length": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": ckpt.version,
        "config": ckpt.config,
        "scaler": ckpt.scaler,
        "seed": ckpt.seed,
        "training": ckpt.training,
        "tensors": tensors,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, ckpt.version, len(header)))
            f.write(header)
            for raw in payloads:
                f.write(raw)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if len(blob) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: truncated preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    body_start = _PREAMBLE.size + header_len
    if body_start > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[_PREAMBLE.size:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from None

    payload = memoryview(blob)[body_start:]
    try:
        expected = sum(t["length"] for t in header["tensors"])
        if len(payload) != expected:
            raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, header declares {expected}")
        parameters = {}
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            if t["length"] != 8 * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"{path}: tensor {t['name']} length does not match shape {shape}")
            chunk = payload[t["offset"]:t["offset"] + t["length"]]
            parameters[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        return Checkpoint(config=header["config"], parameters=parameters, scaler=header["scaler"],
                          seed=header["seed"], training=header.get("training", {}), version=version)
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise CheckpointError(f"{path}: malformed header: {type(e).__name__}: {e}") from None


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainHyper:
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    clip_norm: float = 1.0
    eval_batch_size: int = 256
    max_batches_per_epoch: int = 0  # 0 means every batch

    def validate(self):
        for name in ("batch_size", "max_epochs", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError("must be at least 1", field=f"training.{name}")
        if self.patience < 0:
            raise ConfigurationError("must not be negative", field="training.patience")
        if self.max_batches_per_epoch < 0:
            raise ConfigurationError("must not be negative", field="training.max_batches_per_epoch")
        if self.learning_rate <= 0:
            raise ConfigurationError("must be positive", field="training.learning_rate")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("betas must lie in [0, 1)", field="training.beta1")
        if self.eps <= 0:
            raise ConfigurationError("must be positive", field="training.eps")
        if self.clip_norm < 0:
            raise ConfigurationError("must not be negative (0 disables clipping)", field="training.clip_norm")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float  # None for the epoch-0 baseline
    val_loss: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list
    best_epoch: int
    best_val_loss: float
    stopping_reason: str  # "early_stopping" or "max_epochs"

    @property
    def train_losses(self) -> list:
        return [r.train_loss for r in self.epochs if r.train_loss is not None]

    @property
    def val_losses(self) -> list:
        return [r.val_loss for r in self.epochs]

    def to_dict(self) -> dict:
        return {"epochs": [asdict(r) for r in self.epochs], "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val_loss, "stopping_reason": self.stopping_reason}


def evaluate_loss(params: ModelParams, samples, batch_size: int = 256) -> float:
    """Mean quantile loss over every window, inference mode"""
    levels = params.cfg.quantile_levels
    total, count = 0.0, 0
    for start in range(0, len(samples), batch_size):
        past, future, target = samples.batch(range(start, min(start + batch_size, len(samples))))
        out = model_forward(params, past, future, training=False)
        total += total_quantile_loss(target, out, levels).item() * len(target)
        count += len(target)
    if count == 0:
        raise ConfigurationError("no windows to evaluate", field="samples")
    return total / count


def _append_jsonl(path: str, record: dict):
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def fit(params: ModelParams, train, val, hyper: TrainHyper = None, scaler: dict = None, seed: int = None,
        log_path: str = None, checkpoint_path: str = None, metadata: dict = None) -> tuple:
    """Train with Adam and early stopping on validation loss.

    The validation loss of the untrained model is recorded as epoch 0 and is
    the first best. Returns (TrainReport, Checkpoint of the best epoch); the
    best weights are also loaded back into ``params``.
    """
    hyper = hyper or TrainHyper()
    hyper.validate()
    cfg = params.cfg
    if len(train) == 0 or len(val) == 0:
        raise ConfigurationError("training and validation sets must both hold windows", field="samples")
    if set(train.origins.tolist()) & set(val.origins.tolist()):
        raise ConfigurationError("training and validation windows overlap", field="samples")
    seed = cfg.rng_seed if seed is None else seed
    scaler = scaler or {}
    rng = np.random.default_rng(seed)
    opt = OptimizerState.create(params.store, hyper.learning_rate, hyper.beta1, hyper.beta2, hyper.eps)
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        open(log_path, "w").close()

    started = time.time()
    best_val = evaluate_loss(params, val, hyper.eval_batch_size)
    records = [EpochRecord(0, None, best_val, time.time() - started)]
    if log_path:
        _append_jsonl(log_path, asdict(records[0]))
    logger.info(f"Epoch 0: val loss {best_val:.6f}")
    best_epoch, best_state, wait = 0, params.store.state_dict(), 0
    reason = "max_epochs"

    def best_checkpoint(epochs_run: int) -> Checkpoint:
        ckpt = checkpoint_from_params(params, scaler, seed, {
            **(metadata or {}), "best_epoch": best_epoch, "best_val_loss": best_val, "epochs_run": epochs_run})
        ckpt.parameters = {name: value.copy() for name, value in best_state.items()}
        return ckpt

    for epoch in range(1, hyper.max_epochs + 1):
        started = time.time()
        order = rng.permutation(len(train))
        batches = [order[i:i + hyper.batch_size] for i in range(0, len(order), hyper.batch_size)]
        if hyper.max_batches_per_epoch:
            batches = batches[:hyper.max_batches_per_epoch]
        total, count = 0.0, 0
        for idx in batches:
            past, future, target = train.batch(idx)
            out = model_forward(params, past, future, training=True, rng=rng)
            loss = total_quantile_loss(target, out, cfg.quantile_levels)
            backward(loss, params.store)
            clip_grad_norm(params.store, hyper.clip_norm)
            adam_step(params.store, opt)
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        val_loss = evaluate_loss(params, val, hyper.eval_batch_size)
        record = EpochRecord(epoch, train_loss, val_loss, time.time() - started)
        records.append(record)
        if log_path:
            _append_jsonl(log_path, asdict(record))
        logger.info(f"Epoch {epoch}: train loss {train_loss:.6f}, val loss {val_loss:.6f} ({record.seconds:.1f}s)")

        if val_loss < best_val:
            best_val, best_epoch, best_state, wait = val_loss, epoch, params.store.state_dict(), 0
            if checkpoint_path:
                save_checkpoint(best_checkpoint(epoch), checkpoint_path)
        else:
            wait += 1
            if wait >= hyper.patience:
                reason = "early_stopping"
                logger.info(f"Early stopping after epoch {epoch}, best epoch {best_epoch}")
                break

    params.store.load_state_dict(best_state)
    epochs_run = records[-1].epoch
    ckpt = best_checkpoint(epochs_run)
    ckpt.training["stopping_reason"] = reason
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return TrainReport(records, best_epoch, best_val, reason), ckpt
