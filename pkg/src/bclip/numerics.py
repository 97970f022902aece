"""Dense tensors with a fixed set of differentiable operations.

Every op below has a hand-written backward rule. Graph edges are only
recorded when at least one input requires a gradient, and never inside
``no_grad()``. Arrays are limited to rank 3; multi-head attention keeps to
that limit by folding heads into the leading axis (see ``split_heads``).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3
CHECK_FINITE = True

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this tensor; gradients accumulate into ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype) if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # Interior gradients are not needed once propagated.
                if node._parents:
                    node.grad = None

    # operator sugar over the sanctioned ops
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    # a sum is non-finite whenever any element is, so the full scan only runs on suspicion
    if CHECK_FINITE and not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(out, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)

    def backward(g):
        _accumulate(a, g * a.data.dtype.type(c))

    return _result(out, (a,), backward, "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _result(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    out = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _result(out, (a,), backward, "log")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    half = a.data.dtype.type(0.5)
    out = half * (1 + np.tanh(half * a.data))

    def backward(g):
        _accumulate(a, g * out * (1 - out))

    return _result(out, (a,), backward, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) as max(x, 0) + log1p(e^-|x|)."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        half = x.dtype.type(0.5)
        _accumulate(a, g * half * (1 + np.tanh(half * x)))

    return _result(out, (a,), backward, "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    inner = c * (x + k * x2 * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def backward(g):
        dinner = c * (1 + 3 * k * x2)
        _accumulate(a, g * (0.5 * (1 + th) + 0.5 * x * (1 - th**2) * dinner))

    return _result(out, (a,), backward, "gelu")


def clamp_max(a: Tensor, limit: float) -> Tensor:
    out = np.minimum(a.data, a.data.dtype.type(limit))

    def backward(g):
        _accumulate(a, g * (a.data < limit))

    return _result(out, (a,), backward, "clamp_max")


# --------------------------------------------------------------------------
# linear algebra and shape
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(a.data, -1, -2)

    def backward(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _result(out, (a,), backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    if out.ndim > MAX_RANK:
        raise DimensionError(f"reshape to rank {out.ndim}")

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(out, (a,), backward, "reshape")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, T, D) -> (B*heads, T, D/heads), heads contiguous per batch item."""
    b, t, d = x.shape
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    out = x.data.reshape(b, t, heads, dh).transpose(0, 2, 1, 3).reshape(b * heads, t, dh)

    def backward(g):
        _accumulate(x, g.reshape(b, heads, t, dh).transpose(0, 2, 1, 3).reshape(b, t, d))

    return _result(out, (x,), backward, "split_heads")


def merge_heads(x: Tensor, heads: int) -> Tensor:
    """Inverse of ``split_heads``."""
    bh, t, dh = x.shape
    if bh % heads:
        raise DimensionError(f"leading extent {bh} not divisible by {heads} heads")
    b = bh // heads
    out = x.data.reshape(b, heads, t, dh).transpose(0, 2, 1, 3).reshape(b, t, heads * dh)

    def backward(g):
        _accumulate(x, g.reshape(b, t, heads, dh).transpose(0, 2, 1, 3).reshape(bh, t, dh))

    return _result(out, (x,), backward, "merge_heads")


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic slicing or integer-array gather; backward scatters (adds on repeats)."""
    out = np.array(a.data[idx])
    fancy = _is_fancy(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        _accumulate(a, full)

    return _result(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _result(out, tensors, backward, "concat")


# --------------------------------------------------------------------------
# reductions and normalizations
# --------------------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _result(out, (a,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("softmax_rows expects a matrix")
    return softmax(x)


def log_softmax(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        _accumulate(a, g - p * g.sum(axis=-1, keepdims=True))

    return _result(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs a width of at least 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, g * xhat)
        if bias.requires_grad:
            _accumulate(bias, g)
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _result(out, (x, gain, bias), backward, "layer_norm")


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-normalize along the last axis; zero rows are an error."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    zero = np.argwhere(norm[..., 0] == 0)
    if len(zero):
        raise ValueError(f"zero-norm embedding at index {tuple(int(i) for i in zero[0])}")
    out = x.data / norm

    def backward(g):
        _accumulate(x, (g - out * (g * out).sum(axis=-1, keepdims=True)) / norm)

    return _result(out, (x,), backward, "l2_normalize")


# --------------------------------------------------------------------------
# parameters and gradient checking
# --------------------------------------------------------------------------


@dataclass(eq=False)
class Param:
    value: Tensor
    name: str
    trainable: bool = True

    def __post_init__(self):
        self.value.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    @property
    def shape(self) -> tuple:
        return self.value.shape


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Param],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is re-evaluated with each parameter coordinate nudged by +/- eps.
    The error per coordinate is |analytic - numeric| / max(1, |analytic|).
    ``max_coords`` caps the coordinates probed per parameter (random subset).
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside the supported range")
    params = [p for p in params if p.trainable]
    for p in params:
        p.value.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite at the base point")
    loss.backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for p in params:
        flat = p.value.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        ga = analytic[id(p)].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                up = f().item()
            flat[c] = orig - eps
            with no_grad():
                down = f().item()
            flat[c] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError(f"non-finite loss while probing {p.name}[{c}]")
            numeric = (up - down) / (2 * eps)
            err = abs(ga[c] - numeric) / max(1.0, abs(ga[c]))
            worst = max(worst, err)
    for p in params:
        p.value.zero_grad()
    return worst
