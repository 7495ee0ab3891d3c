"""Neural building blocks: dense, LSTM cell, biLSTM, multi-head attention,
GLU, GRN, layer normalization and dropout.

Weights are plain dataclasses of ``Parameter``s created by the ``init_*``
functions and registered in a ``ParameterStore`` under a path prefix. The
forward functions are pure: (input, weights[, rng]) -> output. Every layer
accepts leading batch dimensions.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from errors import ConfigurationError, ContractError, DimensionError
from numerics import (Parameter, ParameterStore, Tensor, add, as_tensor, broadcast_to, concat, elu, matmul,
                      mul, power, reduce_mean, reshape, scale, sigmoid, slice_last, softmax_last_axis, stack,
                      sub, swap_last, take, tanh, transpose)

logger = logging.getLogger(__name__)

FORGET_BIAS = 1.0
LAYER_NORM_EPS = 1e-6


def _uniform(rng: np.random.Generator, shape: tuple, limit: float) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

@dataclass
class DenseWeights:
    kernel: Parameter
    bias: Parameter

    @property
    def n_in(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_out(self) -> int:
        return self.kernel.shape[1]


def init_dense(store: ParameterStore, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> DenseWeights:
    limit = 1.0 / math.sqrt(n_in)
    return DenseWeights(
        kernel=store.add(f"{name}/kernel", _uniform(rng, (n_in, n_out), limit)),
        bias=store.add(f"{name}/bias", np.zeros(n_out)),
    )


def dense_forward(x, w: DenseWeights) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != w.n_in:
        raise DimensionError(f"dense {w.kernel.name}: input extent {x.shape[-1]} != {w.n_in}")
    out = matmul(x, w.kernel)
    return add(out, broadcast_to(w.bias, out.shape))


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmState:
    h: Tensor
    c: Tensor


@dataclass
class LstmWeights:
    """Gate blocks are laid out [input | forget | candidate | output]"""
    kernel: Parameter
    recurrent: Parameter
    bias: Parameter

    @property
    def units(self) -> int:
        return self.recurrent.shape[0]


def init_lstm(store: ParameterStore, name: str, n_in: int, units: int, rng: np.random.Generator) -> LstmWeights:
    limit = 1.0 / math.sqrt(units)
    bias = np.zeros(4 * units)
    bias[units:2 * units] = FORGET_BIAS
    return LstmWeights(
        kernel=store.add(f"{name}/kernel", _uniform(rng, (n_in, 4 * units), limit)),
        recurrent=store.add(f"{name}/recurrent", _uniform(rng, (units, 4 * units), limit)),
        bias=store.add(f"{name}/bias", bias),
    )


def zero_state(units: int, batch_shape: tuple = ()) -> LstmState:
    zeros = np.zeros(tuple(batch_shape) + (units,))
    return LstmState(h=Tensor(zeros), c=Tensor(zeros))


def lstm_cell_step(x, state: LstmState, w: LstmWeights) -> LstmState:
    x = as_tensor(x)
    u = w.units
    if x.shape[-1] != w.kernel.shape[0]:
        raise DimensionError(f"lstm {w.kernel.name}: input extent {x.shape[-1]} != {w.kernel.shape[0]}")
    if state.h.shape != state.c.shape or state.h.shape[-1] != u:
        raise DimensionError(f"lstm {w.kernel.name}: state shapes {state.h.shape}/{state.c.shape}, units {u}")
    z = add(matmul(x, w.kernel), matmul(state.h, w.recurrent))
    z = add(z, broadcast_to(w.bias, z.shape))
    i = sigmoid(slice_last(z, 0, u))
    f = sigmoid(slice_last(z, u, 2 * u))
    g = tanh(slice_last(z, 2 * u, 3 * u))
    o = sigmoid(slice_last(z, 3 * u, 4 * u))
    c = add(mul(f, state.c), mul(i, g))
    h = mul(o, tanh(c))
    return LstmState(h=h, c=c)


@dataclass
class BiLstmWeights:
    forward: LstmWeights
    backward: LstmWeights

    @property
    def units(self) -> int:
        return self.forward.units


def init_bilstm(store: ParameterStore, name: str, n_in: int, units: int, rng: np.random.Generator) -> BiLstmWeights:
    return BiLstmWeights(
        forward=init_lstm(store, f"{name}/fw", n_in, units, rng),
        backward=init_lstm(store, f"{name}/bw", n_in, units, rng),
    )


def bilstm_forward(seq, w: BiLstmWeights) -> Tensor:
    """[..., T, in] -> [..., T, 2*units]; forward outputs then backward outputs"""
    seq = as_tensor(seq)
    if seq.ndim < 2 or seq.shape[-2] < 1:
        raise ContractError(f"bilstm needs a [..., T>=1, features] sequence, got {seq.shape}")
    steps = seq.shape[-2]
    inputs = [take(seq, t, axis=-2) for t in range(steps)]
    batch_shape = seq.shape[:-2]

    state = zero_state(w.forward.units, batch_shape)
    forward_out = []
    for x in inputs:
        state = lstm_cell_step(x, state, w.forward)
        forward_out.append(state.h)

    state = zero_state(w.backward.units, batch_shape)
    backward_out = [None] * steps
    for t in reversed(range(steps)):
        state = lstm_cell_step(inputs[t], state, w.backward)
        backward_out[t] = state.h

    return concat([stack(forward_out, axis=-2), stack(backward_out, axis=-2)], axis=-1)


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionWeights:
    query: DenseWeights
    key: DenseWeights
    value: DenseWeights
    output: DenseWeights
    heads: int


def init_mha(store: ParameterStore, name: str, d_model: int, heads: int, rng: np.random.Generator) -> AttentionWeights:
    if heads < 1 or d_model % heads:
        raise ConfigurationError(f"d_model {d_model} is not divisible by {heads} heads", field="mha_heads")
    return AttentionWeights(
        query=init_dense(store, f"{name}/query", d_model, d_model, rng),
        key=init_dense(store, f"{name}/key", d_model, d_model, rng),
        value=init_dense(store, f"{name}/value", d_model, d_model, rng),
        output=init_dense(store, f"{name}/output", d_model, d_model, rng),
        heads=heads,
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., T, d] -> [..., H, T, d/H]
    lead = x.ndim - 2
    steps, d = x.shape[-2:]
    x = reshape(x, x.shape[:-1] + (heads, d // heads))
    return transpose(x, tuple(range(lead)) + (lead + 1, lead, lead + 2))


def _merge_heads(x: Tensor) -> Tensor:
    # [..., H, T, dh] -> [..., T, H*dh]
    lead = x.ndim - 3
    heads, steps, dh = x.shape[-3:]
    x = transpose(x, tuple(range(lead)) + (lead + 1, lead, lead + 2))
    return reshape(x, x.shape[:-2] + (heads * dh,))


def mha_forward(q_seq, kv_seq, w: AttentionWeights, heads: int = None, return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` heads.

    Self-attention is ``mha_forward(x, x, w)``. With ``return_weights`` the
    softmax weights ``[..., heads, Tq, Tk]`` are returned alongside.
    """
    q_seq, kv_seq = as_tensor(q_seq), as_tensor(kv_seq)
    heads = heads or w.heads
    d = q_seq.shape[-1]
    if d % heads:
        raise ConfigurationError(f"model width {d} is not divisible by {heads} heads", field="mha_heads")
    if q_seq.ndim < 2 or kv_seq.ndim != q_seq.ndim or kv_seq.shape[-1] != d \
            or q_seq.shape[:-2] != kv_seq.shape[:-2]:
        raise DimensionError(f"mha: query {q_seq.shape} and key/value {kv_seq.shape} do not line up")
    if q_seq.shape[-2] < 1 or kv_seq.shape[-2] < 1:
        raise ContractError("mha needs at least one query and one key")

    q = _split_heads(dense_forward(q_seq, w.query), heads)
    k = _split_heads(dense_forward(kv_seq, w.key), heads)
    v = _split_heads(dense_forward(kv_seq, w.value), heads)
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d // heads))
    weights = softmax_last_axis(scores)
    out = dense_forward(_merge_heads(matmul(weights, v)), w.output)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# gating, residual, normalization
# ---------------------------------------------------------------------------

@dataclass
class GluWeights:
    linear: DenseWeights
    gate: DenseWeights


def init_glu(store: ParameterStore, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> GluWeights:
    return GluWeights(
        linear=init_dense(store, f"{name}/linear", n_in, n_out, rng),
        gate=init_dense(store, f"{name}/gate", n_in, n_out, rng),
    )


def glu(a, b) -> Tensor:
    """a * sigmoid(b) for an already projected pair"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"glu: linear {a.shape} and gate {b.shape} differ")
    return mul(a, sigmoid(b))


def glu_forward(x, w: GluWeights = None) -> Tensor:
    """GLU after the layer's two linear maps; ``x=(a, b)`` with no weights gates directly"""
    if w is None:
        a, b = x
        return glu(a, b)
    return glu(dense_forward(x, w.linear), dense_forward(x, w.gate))


@dataclass
class LayerNormWeights:
    gain: Parameter
    bias: Parameter
    eps: float = LAYER_NORM_EPS


def init_layer_norm(store: ParameterStore, name: str, d: int) -> LayerNormWeights:
    return LayerNormWeights(gain=store.add(f"{name}/gain", np.ones(d)), bias=store.add(f"{name}/bias", np.zeros(d)))


def layer_norm_forward(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    x = as_tensor(x)
    if eps <= 0:
        raise ConfigurationError("layer norm eps must be positive", field="eps")
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"layer norm needs a last axis, got {x.shape}")
    centered = sub(x, broadcast_to(reduce_mean(x, axis=-1), x.shape))
    var = reduce_mean(mul(centered, centered), axis=-1)
    normed = mul(centered, broadcast_to(power(add(var, eps), -0.5), x.shape))
    return add(mul(normed, broadcast_to(gain, x.shape)), broadcast_to(bias, x.shape))


@dataclass
class GrnWeights:
    hidden: DenseWeights
    output: DenseWeights
    glu: GluWeights
    norm: LayerNormWeights


def init_grn(store: ParameterStore, name: str, d: int, rng: np.random.Generator) -> GrnWeights:
    return GrnWeights(
        hidden=init_dense(store, f"{name}/hidden", d, d, rng),
        output=init_dense(store, f"{name}/output", d, d, rng),
        glu=init_glu(store, f"{name}/glu", d, d, rng),
        norm=init_layer_norm(store, f"{name}/norm", d),
    )


def grn_forward(x, w: GrnWeights) -> Tensor:
    """LayerNorm(x + GLU(dense(elu(dense(x)))))"""
    x = as_tensor(x)
    if x.shape[-1] != w.hidden.n_in:
        raise DimensionError(f"grn {w.hidden.kernel.name}: input extent {x.shape[-1]} != {w.hidden.n_in}")
    h = dense_forward(elu(dense_forward(x, w.hidden)), w.output)
    return layer_norm_forward(add(x, glu_forward(h, w.glu)), w.norm.gain, w.norm.bias, w.norm.eps)


def dropout_apply(x, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity outside training"""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate {rate} outside [0, 1)", field="dropout_rate")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return mul(x, Tensor(keep / (1.0 - rate)))
