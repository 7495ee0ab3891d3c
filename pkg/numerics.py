"""Dense 64-bit tensors with reverse-mode automatic differentiation.

Every tensor op here records its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the recorded graph in
reverse topological order and accumulates into ``Parameter.grad``.

Shapes must match exactly for binary ops; the only implicit expansion is a
0-d scalar against a tensor. Anything else goes through ``broadcast_to``.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from errors import ConfigurationError, ContractError, DimensionError, NumericsError

logger = logging.getLogger(__name__)

DTYPE = np.float64


class Tensor:
    """Immutable n-dimensional float64 array plus its place in the graph"""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable = None, op: str = "const"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A learnable leaf tensor with a unique path-like name"""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value):
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=True, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParameterStore:
    """Ordered registry of uniquely named parameters"""

    def __init__(self):
        self._params = {}

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}", field=name)
        param = Parameter(name, value)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def named(self) -> list:
        return list(self._params.items())

    def count(self) -> int:
        """Total number of scalar weights"""
        return int(sum(p.size for p in self._params.values()))

    def zero_grad(self):
        for param in self._params.values():
            param.zero_grad()

    def state_dict(self) -> dict:
        return {name: param.data.copy() for name, param in self._params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ConfigurationError(
                f"parameter names differ (missing={sorted(missing)}, unexpected={sorted(extra)})",
                field="parameters")
        for name, param in self._params.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != param.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != model shape {param.shape}")
            param.data = value.copy()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _reduce_like(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # the only broadcast we ever do implicitly is a 0-d scalar
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# binary elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")

    def backward(g):
        return _reduce_like(g, a.shape), _reduce_like(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def backward(g):
        return _reduce_like(g, a.shape), _reduce_like(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")

    def backward(g):
        return _reduce_like(g * b.data, a.shape), _reduce_like(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first argument"""
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return _reduce_like(np.where(pick_a, g, 0.0), a.shape), _reduce_like(np.where(pick_a, 0.0, g), b.shape)

    return _node(np.maximum(a.data, b.data), (a, b), backward, "maximum")


# ---------------------------------------------------------------------------
# unary elementwise
# ---------------------------------------------------------------------------

def neg(x) -> Tensor:
    x = as_tensor(x)
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, factor: float) -> Tensor:
    """Multiply by a constant"""
    x = as_tensor(x)
    factor = float(factor)
    return _node(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    out = x.data ** exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _node(out, (x,), backward, "power")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # tanh form stays finite for large |x| and gives exactly 0.5 at 0
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    out = np.where(positive, x.data, alpha * np.expm1(np.minimum(x.data, 0.0)))

    def backward(g):
        return (g * np.where(positive, 1.0, out + alpha),)

    return _node(out, (x,), backward, "elu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "maximum": maximum,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "elu": elu,
    "exp": exp,
    "log": log,
    "neg": neg,
}


def elementwise(op: str, *args) -> Tensor:
    """Apply a named pointwise op, e.g. ``elementwise("tanh", x)``"""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigurationError(f"unknown elementwise op {op!r}", field="op") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """[..., m, k] @ [k, n] or [..., m, k] @ [..., k, n] with equal leading dims"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim == 2:
        k, n = b.shape

        def backward(g):
            a2 = a.data.reshape(-1, k)
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _node(a.data @ b.data, (a, b), backward, "matmul")

    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def reduce_sum(x, axis: int = None) -> Tensor:
    """Sum over everything, or over one axis keeping it as extent 1"""
    x = as_tensor(x)
    if axis is None:
        return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")
    out = x.data.sum(axis=axis, keepdims=True)
    return _node(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def reduce_mean(x, axis: int = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis), 1.0 / count)


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: tuple) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(x) -> Tensor:
    """Exchange the last two axes"""
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def broadcast_to(x, shape: tuple) -> Tensor:
    """Explicit numpy-style expansion; the gradient is summed back"""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(x.shape),)

    return _node(out, (x,), backward, "broadcast_to")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} ({e})") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tuple(tensors), backward, "stack")


def take(x, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis"""
    x = as_tensor(x)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        full = np.zeros(x.shape)
        full_view = np.moveaxis(full, axis, 0)
        full_view[index] = g
        return (full,)

    return _node(out, (x,), backward, "take")


def slice_last(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(f"slice_last: [{start}:{stop}] outside last extent of {x.shape}")
    out = x.data[..., start:stop]

    def backward(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    return _node(out, (x,), backward, "slice_last")


def softmax_last_axis(x) -> Tensor:
    """Max-shifted softmax over the last axis"""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_last_axis: needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# graph and backward
# ---------------------------------------------------------------------------

class Graph:
    """Nodes reachable from an output in topological order (parents first)"""

    def __init__(self, order: list):
        self.order = order

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order, seen = [], set()
        stack_ = [(output, False)]
        # iterative DFS: long LSTM unrolls exceed the recursion limit
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack_.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.order)

    def parameters(self) -> list:
        return [n for n in self.order if isinstance(n, Parameter)]


def backward(loss: Tensor, store: ParameterStore = None, accumulate: bool = False) -> dict:
    """Populate ``Parameter.grad`` for everything ``loss`` depends on.

    Without ``accumulate`` the gradients of ``store`` (and of every parameter
    in the graph) are reset first, so unreachable parameters end at zero.
    Returns ``{name: grad}``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericsError(f"loss is not finite ({loss.item()})")
    graph = Graph.from_output(loss)
    params = graph.parameters()
    if not accumulate:
        if store is not None:
            store.zero_grad()
        for p in params:
            p.zero_grad()

    pending = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg

    targets = list(store) if store is not None else params
    return {p.name: p.grad for p in targets}


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    checked: int
    worst: str
    passed: bool


def gradient_check(f: Callable[[], Tensor], params: Iterable[Parameter], step: float = 1e-5,
                   tol: float = 1e-6, max_coords: int = None, rng: np.random.Generator = None,
                   abs_floor: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` takes no arguments and closes over ``params``; the point is their
    current value. Relative error is |a - n| / max(|a|, |n|, abs_floor).
    ``max_coords`` checks a seeded random subset of coordinates per parameter.
    """
    if step <= 0:
        raise ConfigurationError("step must be positive", field="step")
    params = list(params)
    loss = f()
    backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}
    for p in params:
        if not np.all(np.isfinite(analytic[id(p)])):
            raise NumericsError(f"analytic gradient of {p.name} is not finite")
    rng = rng if rng is not None else np.random.default_rng(0)

    max_rel, max_abs, checked, worst = 0.0, 0.0, 0, ""
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            original = flat[i]
            flat[i] = original + step
            plus = f().item()
            flat[i] = original - step
            minus = f().item()
            flat[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericsError(f"f is not finite around {p.name}[{i}]")
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[id(p)].reshape(-1)[i]
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), abs_floor)
            checked += 1
            max_abs = max(max_abs, abs_err)
            if rel_err > max_rel:
                max_rel, worst = rel_err, f"{p.name}[{i}]"

    passed = max_rel < tol
    if not passed:
        logger.warning(f"Gradient check failed: max rel err {max_rel:.3e} at {worst}")
    return GradCheckReport(max_rel_err=max_rel, max_abs_err=max_abs, checked=checked, worst=worst, passed=passed)
