"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every differentiable operation executed while a :class:`Tape` is active and
touching a tensor with ``requires_grad`` is appended to the tape in execution
order. :meth:`Tape.backward` walks the record in reverse, which is a valid
topological order by construction.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = x * x
    >>> float(tape.backward(loss)[x])
    6.0
"""
from __future__ import annotations

import contextvars
from typing import Callable, Iterable

import numpy as np

from .errors import DomainError, UsageError

NORM_FLOOR = 1e-15

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "hypball_tape", default=None
)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor({self.value!r}{tag})"

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of the differentiable operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def watch(self, *tensors: Tensor) -> None:
        """Register leaves that must appear in the gradient map even if unused."""
        for t in tensors:
            if not t.requires_grad:
                raise UsageError("only tensors with requires_grad can be watched")
            self.leaves.setdefault(id(t), t)

    def _record(self, node: Tensor) -> None:
        for p in node._parents:
            if p.requires_grad and p.is_leaf:
                self.leaves.setdefault(id(p), p)
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every leaf seen on this tape."""
        if self.consumed:
            raise UsageError("tape already consumed by a previous backward pass")
        if not isinstance(loss, Tensor) or loss.value.size != 1:
            raise UsageError("backward needs a scalar loss tensor")
        self.consumed = True
        grads: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        out = {}
        for key, leaf in self.leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64)
            out[leaf] = leaf.grad
        return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    tape = tape or _active_tape.get()
    if tape is None:
        raise UsageError("no tape: run the forward pass inside `with Tape()`")
    return tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _op(value, parents: Iterable[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active_tape.get()
    parents = tuple(parents)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        tape._record(out)
    return out


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _op(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _op(out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a):
    a = as_tensor(a)
    return _op(-a.value, (a,), lambda g: (-g,))


def power(a, p: float):
    a = as_tensor(a)
    av = a.value
    return _op(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise UsageError("matmul supports 2-D operands only")
    if av.shape[1] != bv.shape[0]:
        raise UsageError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    return _op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    a = as_tensor(a)
    return _op(a.value.T, (a,), lambda g: (g.T,))


# -------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _op(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True)) + m
    soft = np.exp(av - s)
    out = s if keepdims else np.squeeze(s, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _op(out, (a,), vjp)


# ------------------------------------------------------------- elementwise


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _op(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    av = a.value
    return _op(np.log(av), (a,), lambda g: (g / av,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _op(out, (a,), lambda g: (g * (1.0 - out * out),))


def arctanh(a):
    a = as_tensor(a)
    av = a.value
    return _op(np.arctanh(av), (a,), lambda g: (g / (1.0 - av * av),))


def arcsinh(a):
    a = as_tensor(a)
    av = a.value
    return _op(np.arcsinh(av), (a,), lambda g: (g / np.sqrt(1.0 + av * av),))


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return _op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, lo=None, hi=None):
    """Clip values; gradient passes inside the interval and is zero outside."""
    a = as_tensor(a)
    av = a.value
    out = np.clip(av, lo if lo is not None else -np.inf, hi if hi is not None else np.inf)
    inside = out == av
    return _op(out, (a,), lambda g: (g * inside,))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value <= b.value
    return _op(np.minimum(a.value, b.value), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value >= b.value
    return _op(np.maximum(a.value, b.value), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def where(mask, a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _op(np.where(mask, a.value, b.value), (a, b), lambda g: (g * mask, g * ~mask))


def tanhc(a):
    """tanh(u)/u with the removable singularity at 0 filled in."""
    a = as_tensor(a)
    u = a.value
    small = np.abs(u) < 1e-5
    safe = np.where(small, 1.0, u)
    t = np.tanh(safe)
    out = np.where(small, 1.0 - u * u / 3.0, t / safe)
    d = np.where(small, -2.0 * u / 3.0, ((1.0 - t * t) * safe - t) / (safe * safe))
    return _op(out, (a,), lambda g: (g * d,))


def artanhc(a):
    """arctanh(u)/u with the removable singularity at 0 filled in."""
    a = as_tensor(a)
    u = a.value
    small = np.abs(u) < 1e-5
    safe = np.where(small, 0.5, u)
    t = np.arctanh(safe)
    out = np.where(small, 1.0 + u * u / 3.0, t / safe)
    d = np.where(small, 2.0 * u / 3.0, (safe / (1.0 - safe * safe) - t) / (safe * safe))
    return _op(out, (a,), lambda g: (g * d,))


def norm(a, axis=-1, keepdims=True):
    """Euclidean norm; the gradient is set to zero where the norm is below NORM_FLOOR."""
    a = as_tensor(a)
    av = a.value
    out = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))
    safe = np.where(out < NORM_FLOOR, np.inf, out)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * av / safe,)

    return _op(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp)


# --------------------------------------------------------------- structure


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _op(a.value[idx], (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.value.shape
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def expand_dims(a, axis):
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.value, axis).shape)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _op(np.concatenate([t.value for t in tensors], axis=axis), tensors, vjp)


def stack(tensors, axis=0):
    tensors = [expand_dims(as_tensor(t), axis) for t in tensors]
    return concat(tensors, axis=axis)


# ------------------------------------------------------------ verification


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.copy()))
        flat[i] = orig - h
        fm = float(f(x.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"f is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def value_and_grad(f: Callable[[Tensor], Tensor], x) -> tuple[float, np.ndarray]:
    """Evaluate ``f`` on a fresh leaf and return (value, reverse-mode gradient)."""
    leaf = Tensor(x, requires_grad=True)
    with Tape() as tape:
        tape.watch(leaf)
        out = f(leaf)
    grads = tape.backward(as_tensor(out))
    return float(value_of(out)), grads[leaf]


def relative_error(actual, expected, floor: float = 1e-8) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(np.linalg.norm(expected), np.linalg.norm(actual), floor)
    return float(np.linalg.norm(actual - expected) / scale)
