"""
Minimal reverse-mode autodiff over dense numpy arrays.

Everything runs in float64. A Tensor wraps a numpy array and records a
backward closure; backward() walks the graph in reverse topological order
and accumulates gradients additively. Broadcasting is restricted to
leading batch dimensions (bias-style adds); anything else must be
reshaped explicitly.
"""

from __future__ import annotations

import contextlib

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, value, parents=(), backward=None, requires_grad=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        if requires_grad is None:
            requires_grad = _GRAD_ENABLED and (
                backward is not None or any(p.requires_grad for p in parents)
            )
        if not _GRAD_ENABLED:
            requires_grad = False
        self.requires_grad = requires_grad
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    # -- graph -----------------------------------------------------------

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.value.shape != ():
            raise ShapeError("backward requires a scalar root, got shape %r" % (self.value.shape,))
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones((), dtype=DTYPE)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros(parent.value.shape, dtype=DTYPE)
                parent.grad += g

    # -- sugar -----------------------------------------------------------

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("use mul with a reciprocal constant or explicit ops")
        return mul(self, 1.0 / other)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={'set' if self.grad is not None else 'none'})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE), requires_grad=False)


def leaf(value) -> Tensor:
    """Trainable leaf tensor."""
    t = Tensor(np.asarray(value, dtype=DTYPE))
    t.requires_grad = True
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape` (leading dims only)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    if grad.shape != shape:
        raise ShapeError(f"broadcast beyond leading dims: grad {grad.shape} vs {shape}")
    return grad


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    # one shape must be a trailing suffix of the other
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    return small == big[len(big) - len(small):]


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}")
    out = a.value + b.value

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}")
    out = a.value * b.value

    def bwd(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Tensor(out, (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.value), (a,), lambda g: (g / a.value,))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value ** 2, (a,), lambda g: (2.0 * g * a.value,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    keep = a.value > 0
    return Tensor(a.value * keep, (a,), lambda g: (g * keep,))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    a = as_tensor(a)
    c = np.sqrt(2.0 / np.pi)
    x = a.value
    inner = c * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bwd(g):
        dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
        dgelu = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner
        return (g * dgelu,)

    return Tensor(out, (a,), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes must match, {a.shape} vs {b.shape}")
    take_a = a.value <= b.value
    out = np.where(take_a, a.value, b.value)
    return Tensor(out, (a, b), lambda g: (g * take_a, g * ~take_a))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes must match, {a.shape} vs {b.shape}")
    take_a = a.value >= b.value
    out = np.where(take_a, a.value, b.value)
    return Tensor(out, (a, b), lambda g: (g * take_a, g * ~take_a))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.value > lo) & (a.value < hi)
    return Tensor(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


# -- shaping -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor(out, tuple(tensors), bwd)


def transpose_last2(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),))


def transpose_12(a: Tensor) -> Tensor:
    """Swap axes 1 and 2 (head split/merge)."""
    a = as_tensor(a)
    return Tensor(a.value.swapaxes(1, 2), (a,), lambda g: (g.swapaxes(1, 2),))


# -- contractions --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def bwd(g):
        ga = _unbroadcast(g @ b.value.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.value.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return Tensor(out, (a, b), bwd)


# -- reductions ----------------------------------------------------------


def sum_(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor(out, (a,), bwd)


def mean_(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def dot_const(a: Tensor, w: np.ndarray) -> Tensor:
    """Weighted sum with a constant weight vector: sum(a * w)."""
    a = as_tensor(a)
    w = np.asarray(w, dtype=DTYPE)
    if a.shape != w.shape:
        raise ShapeError(f"dot_const: shapes differ, {a.shape} vs {w.shape}")
    return Tensor((a.value * w).sum(), (a,), lambda g: (g * w,))


# -- softmax / normalization --------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    x = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis with learned gain/bias."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeError("layer_norm: gain/bias must match last axis")
    mu = a.value.mean(axis=-1, keepdims=True)
    xc = a.value - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value
    n = a.shape[-1]

    def bwd(g):
        gxhat = g * gain.value
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return Tensor(out, (a, gain, bias), bwd)


# -- gathers -------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding: id out of range")
    out = table.value[ids]

    def bwd(g):
        gt = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor(out, (table,), bwd)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[...] = a[..., idx[...]] where idx has a's shape minus the last axis."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last: idx shape {idx.shape} vs {a.shape[:-1]}")
    out = np.take_along_axis(a.value, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return Tensor(out, (a,), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the first axis (fancy index, duplicates allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = a.value[idx]

    def bwd(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor(out, (a,), bwd)


def add_where(a: Tensor, mask: np.ndarray, fill: float) -> Tensor:
    """Add `fill` where mask is False (attention masking); grad passes through."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.value, a.value + fill)
    return Tensor(out, (a,), lambda g: (g,))


# -- gradient checking ---------------------------------------------------


class NonFiniteLoss(FloatingPointError):
    """Loss evaluated to NaN/Inf during a gradient check."""


def grad_check(loss_fn, params: dict, step: float = 1e-5, max_coords: int = 24,
               seed: int = 0) -> float:
    """
    Max relative error between analytic and central-difference gradients.

    `loss_fn(params) -> Tensor scalar` must be deterministic. `params` maps
    name -> leaf Tensor. A random coordinate subset (up to `max_coords` per
    tensor) is probed.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn(params)
    if not np.isfinite(loss.value):
        raise NonFiniteLoss("loss is not finite")
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape, dtype=DTYPE))
                for k, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            hi = loss_fn(params).item()
            flat[c] = orig - step
            lo = loss_fn(params).item()
            flat[c] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteLoss("loss is not finite during finite differencing")
            fd = (hi - lo) / (2.0 * step)
            an = analytic[name].reshape(-1)[c]
            err = abs(an - fd) / (abs(fd) + 1e-12)
            worst = max(worst, err)
    return worst
