"""Reverse-mode automatic differentiation on dense numpy arrays.

Everything in the model runs on this. A Tensor wraps an ndarray; every
operation records its parent tensors and a backward closure, and GradTape
replays the recorded graph in reverse topological order. Determinism is a
design constraint: the walk order depends only on graph structure, never on
object ids or hashes, so replaying a tape is bit-identical.

Ops never mutate their inputs. Broadcasting is supported where the model
needs it (bias adds, scalar arithmetic, batched matmul); this is not a
general broadcasting framework.
"""

from __future__ import annotations

import dataclasses
import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_DEBUG_CHECKS = False
_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op finiteness assertions (off by default for speed)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float array plus the autodiff bookkeeping for one graph node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite value produced by an operation")
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(p for p in parents if p.requires_grad)
            t._backward_fn = backward_fn
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward_fn = None
        return t

    # -- basic protocol --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward_fn = None
        return t

    def __repr__(self) -> str:
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad_flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        GradTape(self).run(grad)

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class GradTape:
    """Reverse pass over the op graph rooted at one output tensor.

    The topological order is a deterministic function of the graph
    structure (DFS over parent tuples), so two runs over the same graph
    produce bit-identical gradients.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.order = self._topo_order(root)

    @staticmethod
    def _topo_order(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if id(node) in seen:
                    continue
                seen.add(id(node))
            if i < len(node._parents):
                stack.append((node, i + 1))
                parent = node._parents[i]
                if id(parent) not in seen:
                    stack.append((parent, 0))
            else:
                order.append(node)
        return order

    def run(self, seed_grad: np.ndarray | None = None) -> None:
        root = self.root
        if seed_grad is None:
            if root.data.size != 1:
                raise ValueError("implicit gradient requires a scalar output")
            seed_grad = np.ones_like(root.data)
        for node in self.order:
            node.grad = None
        root.grad = np.asarray(seed_grad, dtype=root.data.dtype)
        for node in reversed(self.order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


# -- internals ------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce gradient g back to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


# -- arithmetic -------------------------------------------------------------------


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = _as_tensor(a)
        out = a.data + b

        def bw(g):
            _accum(a, g)

        return Tensor._make(out, (a,), bw)
    if _is_scalar(a):
        return add(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor._make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    if _is_scalar(a):
        return add(neg(b), a)
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor._make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = _as_tensor(a)
        out = a.data * b

        def bw(g):
            _accum(a, g * b)

        return Tensor._make(out, (a,), bw)
    if _is_scalar(a):
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._make(out, (a, b), bw)


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / b)
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = -a.data

    def bw(g):
        _accum(a, -g)

    return Tensor._make(out, (a,), bw)


def power(a, exponent: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    if not _is_scalar(exponent):
        raise TypeError("power expects a scalar constant exponent")
    a = _as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return Tensor._make(out, (a,), bw)


def matmul(a, b) -> Tensor:
    """np.matmul with batch broadcasting; both operands must be >= 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return Tensor._make(out, (a, b), bw)


# -- shape ops --------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = np.reshape(a.data, shape)

    def bw(g):
        _accum(a, np.reshape(g, a.data.shape))

    return Tensor._make(out, (a,), bw)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inverse))

    return Tensor._make(out, (a,), bw)


def flip(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    out = np.flip(a.data, axis=axis).copy()

    def bw(g):
        _accum(a, np.flip(g, axis=axis))

    return Tensor._make(out, (a,), bw)


def pad_axis(a, axis: int, before: int, after: int = 0) -> Tensor:
    """Zero-pad one axis (used for causal shifts)."""
    a = _as_tensor(a)
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(before, before + a.data.shape[axis])
    sl = tuple(sl)

    def bw(g):
        _accum(a, g[sl])

    return Tensor._make(out, (a,), bw)


def take(a, idx) -> Tensor:
    """Indexing with ints, slices, or integer arrays (gather)."""
    a = _as_tensor(a)
    out = np.asarray(a.data[idx])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return Tensor._make(out, (a,), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return Tensor._make(out, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.data.shape))

    return Tensor._make(out, (a,), bw)


def maximum_const(a, c: float) -> Tensor:
    """Elementwise max(a, c) against a scalar; subgradient 0 at the boundary."""
    a = _as_tensor(a)
    out = np.maximum(a.data, c)
    mask = a.data > c

    def bw(g):
        _accum(a, g * mask)

    return Tensor._make(out, (a,), bw)


# -- transcendental ----------------------------------------------------------------


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return Tensor._make(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return Tensor._make(out, (a,), bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        _accum(a, g * 0.5 / out)

    return Tensor._make(out, (a,), bw)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return Tensor._make(out, (a,), bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; both branches share it
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return Tensor._make(out, (a,), bw)


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)
    out = a.data * s

    def bw(g):
        _accum(a, g * (s + a.data * s * (1.0 - s)))

    return Tensor._make(out, (a,), bw)


def gelu(a) -> Tensor:
    """GELU in the tanh form; the derivative matches this form exactly."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accum(a, g * d)

    return Tensor._make(out, (a,), bw)


def elu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)

    def bw(g):
        _accum(a, g * np.where(x > 0, 1.0, neg_part + 1.0))

    return Tensor._make(out, (a,), bw)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)

    def bw(g):
        _accum(a, g * _sigmoid_np(x))

    return Tensor._make(out, (a,), bw)


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "elu": elu,
    "silu": silu,
    "softplus": softplus,
}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None
    return fn(x)


# -- structured ops -----------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    a = _as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"axis {axis} out of range for ndim {a.data.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - inner))

    return Tensor._make(out, (a,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if gain.data.shape[-1] != x.data.shape[-1] or bias.data.shape[-1] != x.data.shape[-1]:
        raise ValueError("gain/bias must match the normalized (last) axis")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    normalized = mul(centered, inv)
    return add(mul(normalized, gain), bias)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a seeded mask; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    x = _as_tensor(x)
    if rate == 0.0:
        return x
    scale = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = x.data * scale

    def bw(g):
        _accum(x, g * scale)

    return Tensor._make(out, (x,), bw)


def uniform_param(
    rng: np.random.Generator, shape, fan_in: int, dtype=np.float64
) -> Tensor:
    """Learnable tensor initialized uniform in +/- 1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def named_tensors(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Deterministic walk over Tensor fields in nested dataclasses and lists.

    Field declaration order and list position define the order, so two walks
    over structurally equal objects pair up one to one.
    """
    found: list[tuple[str, Tensor]] = []
    if isinstance(obj, Tensor):
        found.append((prefix or "tensor", obj))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            found.extend(named_tensors(getattr(obj, f.name), name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            found.extend(named_tensors(item, f"{prefix}[{i}]"))
    return found


# -- gradient checking ----------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between the analytic gradient of f at x and central differences.

    f must be a scalar-valued function of one Tensor. When `sample` is given,
    only that many coordinates (chosen by `rng`) are probed; the analytic
    gradient is still computed in full.
    """
    probe = Tensor(x.data, requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("f(x) is not finite")
    out.backward()
    analytic = np.zeros_like(probe.data) if probe.grad is None else np.array(probe.grad)

    n = probe.data.size
    if sample is not None and sample < n:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=sample, replace=False))
    else:
        coords = np.arange(n)

    flat = probe.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for k in coords:
            bumped = flat.copy()
            bumped[k] += h
            f_plus = float(f(Tensor(bumped.reshape(probe.data.shape))).data)
            bumped[k] = flat[k] - h
            f_minus = float(f(Tensor(bumped.reshape(probe.data.shape))).data)
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst


def grad_check_param(
    build: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """grad_check for a parameter embedded in a larger model.

    `build` evaluates the scalar loss using `param` wherever it lives. The
    analytic gradient is read off param.grad after one backward pass and
    compared against central differences applied to param.data in place
    (restored afterwards). Returns the max relative error over the probed
    coordinates.
    """
    out = build()
    if out.data.size != 1:
        raise ValueError("grad_check_param requires a scalar-valued build")
    out.backward()
    analytic = (
        param.grad.reshape(-1).copy()
        if param.grad is not None
        else np.zeros(param.data.size)
    )

    n = param.data.size
    if sample is not None and sample < n:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=sample, replace=False))
    else:
        coords = np.arange(n)

    worst = 0.0
    with no_grad():
        for k in coords:
            orig = param.data.flat[k]
            param.data.flat[k] = orig + h
            f_plus = float(build().data)
            param.data.flat[k] = orig - h
            f_minus = float(build().data)
            param.data.flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[k])
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
