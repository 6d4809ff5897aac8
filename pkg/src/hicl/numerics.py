"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive checks its output for NaN/Inf and raises
:class:`NumericalError` naming the op, so a bad value never travels far.
Operations are recorded only while a :class:`Graph` is active (see
:func:`value_and_grad`); outside of one they run as plain numpy.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericalError", "NonDeterministicError", "Tensor", "Graph", "RngStream",
    "as_tensor", "add", "sub", "neg", "mul", "div", "matmul", "exp", "log",
    "log1p", "expm1", "sqrt", "square", "sum", "mean", "max", "broadcast_to",
    "reshape", "transpose", "getitem", "take", "concat", "detach", "softmax",
    "layer_norm", "gelu", "normalize_rows", "cosine_sim", "cosine_matrix",
    "value_and_grad", "finite_diff_check", "FiniteDiffReport",
]


class NumericalError(ArithmeticError):
    """A primitive produced a non-finite value."""


class NonDeterministicError(RuntimeError):
    pass


_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


@dataclass
class _Node:
    op: str
    out: "Tensor"
    parents: tuple
    backward: Callable


class Graph:
    """Records primitives executed inside ``with Graph():`` in insertion order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()
        return False

    def _record(self, op, out, parents, backward):
        self.nodes.append(_Node(op, out, parents, backward))

    def backward(self, output: "Tensor") -> dict[int, np.ndarray]:
        """Propagate d(output)/d(.) through the tape; returns grads keyed by id()."""
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if not np.isfinite(pg).all():
                    raise NumericalError(f"non-finite gradient in backward of '{node.op}'")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def _active_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 array that may participate in a recorded graph."""

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data  # a fresh leaf: the new tensor never links to data's graph
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericalError("non-finite value in tensor construction")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes): return transpose(self, axes or None)


def _scalar_error(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite output from '{op}'")
    req = any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, req)
    if req:
        g = _active_graph()
        if g is not None:
            g._record(op, out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericalError("division by zero in 'div'")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericalError("non-positive argument to 'log'")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def log1p(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= -1):
        raise NumericalError("argument <= -1 to 'log1p'")
    return _make("log1p", np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),))


def expm1(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.expm1(x.data)
    return _make("expm1", out, (x,), lambda g: (g * (out + 1.0),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def max(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max-reduce; ties share the incoming gradient equally."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    kept = x.data.max(axis=axes, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        hit = (x.data == kept).astype(np.float64)
        return (hit / hit.sum(axis=axes, keepdims=True) * g,)

    out = kept if keepdims else kept.reshape([n for i, n in enumerate(kept.shape) if i not in axes])
    return _make("max", out, (x,), backward)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    return _make("broadcast", np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, x.shape),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        z = np.zeros(x.shape)
        np.add.at(z, index, g)
        return (z,)

    return _make("getitem", np.array(x.data[index]), (x,), backward)


def take(table, ids) -> Tensor:
    """Gather rows of a 2-D ``table`` by an integer index array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)

    def backward(g):
        z = np.zeros(table.shape)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (z,)

    return _make("take", table.data[ids], (table,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def detach(x) -> Tensor:
    """Copy of ``x`` cut out of any graph."""
    return Tensor._wrap(as_tensor(x).data.copy(), False)


# ---------------------------------------------------------------------------
# composites

def neg(x) -> Tensor:
    return mul(x, -1.0)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def square(x) -> Tensor:
    x = as_tensor(x)
    return mul(x, x)


def sqrt(x) -> Tensor:
    return exp(mul(log(x), 0.5))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = int(np.prod([x.shape[a] for a in _norm_axis(axis, x.ndim)]))
    return div(sum(x, axis, keepdims), float(n))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    # shift is a constant for softmax; stopping its gradient is exact
    shifted = sub(x, detach(max(x, axis=axis, keepdims=True)))
    e = exp(shifted)
    return div(e, sum(e, axis=axis, keepdims=True))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    centered = sub(x, mean(x, axis=-1, keepdims=True))
    var = mean(square(centered), axis=-1, keepdims=True)
    inv_std = exp(mul(log(add(var, eps)), -0.5))
    return add(mul(mul(centered, inv_std), gain), bias)


def gelu(x) -> Tensor:
    # sigmoid approximation x * sigmoid(1.702 x); no overflow until x < -417
    x = as_tensor(x)
    return div(x, add(exp(mul(x, -1.702)), 1.0))


def normalize_rows(x) -> Tensor:
    x = as_tensor(x)
    norms_sq = sum(square(x), axis=-1, keepdims=True)
    if np.any(norms_sq.data == 0):
        raise NumericalError("zero-norm row in 'normalize_rows'")
    return div(x, sqrt(norms_sq))


def cosine_sim(u, v) -> Tensor:
    """uᵀv / (‖u‖‖v‖) for two 1-D tensors."""
    u, v = as_tensor(u), as_tensor(v)
    nu, nv = sum(square(u)), sum(square(v))
    if nu.data == 0 or nv.data == 0:
        raise NumericalError("cosine_sim of a zero-norm vector")
    return div(sum(mul(u, v)), mul(sqrt(nu), sqrt(nv)))


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` (n×d) and ``b`` (m×d)."""
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


# ---------------------------------------------------------------------------
# differentiation drivers

def value_and_grad(f: Callable[..., Tensor], inputs: Sequence):
    """Evaluate ``f(*inputs)`` and its gradient.

    Plain arrays/floats in ``inputs`` are treated as differentiable; Tensors
    keep their own ``requires_grad`` flag, and get ``None`` in the gradient
    list when it is off.
    """
    leaves = []
    for x in inputs:
        if isinstance(x, Tensor):
            leaves.append(x)
        else:
            leaves.append(Tensor(x, requires_grad=True))
    with Graph() as graph:
        out = f(*leaves)
    if not isinstance(out, Tensor) or out.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ValueError(f"value_and_grad needs a scalar-valued function, got {shape}")
    grads = graph.backward(out) if out.requires_grad else {}
    result = []
    for leaf in leaves:
        if not leaf.requires_grad:
            result.append(None)
        else:
            g = grads.get(id(leaf))
            result.append(Tensor._wrap(np.zeros(leaf.shape) if g is None else np.array(g), False))
    return out.item(), result


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    rel_errors: list[np.ndarray]  # per input; NaN where a coordinate was not probed
    worst: tuple[int, tuple] | None
    rel_tol: float
    checked: int = 0
    analytic: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.rel_tol


ROUNDOFF_ULPS = 16


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence, epsilon: float = 1e-6,
                      rel_tol: float = 1e-4, *, abs_floor: float = 1e-7,
                      max_coords: int | None = None, seed: int = 0) -> FiniteDiffReport:
    """Compare :func:`value_and_grad` against central differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor`` is the larger of ``abs_floor`` and ``noise / rel_tol``, and
    ``noise`` is the central difference's rounding resolution
    (``ROUNDOFF_ULPS`` units in the last place of f, divided by 2·epsilon).
    Without it a structurally zero derivative would report a few ulps of
    rounding as a 100% error.
    ``max_coords`` limits probing to that many randomly chosen coordinates per
    input (all coordinates when None).
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    base = [np.array(as_tensor(x).data) for x in inputs]

    def evaluate(arrays):
        return as_tensor(f(*[Tensor(a) for a in arrays])).item()

    first, second = evaluate(base), evaluate(base)
    if first != second:
        raise NonDeterministicError(
            f"two identical forward passes disagree ({first!r} vs {second!r})")

    _, grads = value_and_grad(f, [a.copy() for a in base])
    rng = np.random.default_rng(seed)
    rel_errors, worst, max_err, checked = [], None, 0.0, 0
    for k, arr in enumerate(base):
        errs = np.full(arr.shape, np.nan)
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = rng.choice(arr.size, size=max_coords, replace=False)
        analytic = grads[k].data
        for flat in flat_idx:
            idx = np.unravel_index(flat, arr.shape)
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += epsilon
            minus[idx] -= epsilon
            probe = list(base)
            probe[k] = plus
            f_plus = evaluate(probe)
            probe[k] = minus
            f_minus = evaluate(probe)
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = analytic[idx]
            noise = ROUNDOFF_ULPS * np.spacing(np.max([abs(f_plus), abs(f_minus)])) / (2 * epsilon)
            err = abs(a - numeric) / np.max([abs(a), abs(numeric), abs_floor, noise / rel_tol])
            errs[idx] = err
            checked += 1
            if worst is None or err > max_err:
                max_err = float(err)
                worst = (k, tuple(int(i) for i in idx))
        rel_errors.append(errs)
    return FiniteDiffReport(max_err, rel_errors, worst, rel_tol, checked,
                            [g.data for g in grads])


# ---------------------------------------------------------------------------
# randomness

PURPOSES = ("init", "dropout-a", "dropout-b", "data", "repetition")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, purpose, index).

    Each ``generator(index)`` call builds a fresh Philox generator, so draws
    depend only on the key and never on call history.
    """

    seed: int
    purpose: str

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown rng purpose {self.purpose!r}; expected one of {PURPOSES}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def generator(self, index: int = 0) -> np.random.Generator:
        key = [self.seed & 0xFFFFFFFF, self.seed >> 32, PURPOSES.index(self.purpose), int(index)]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
