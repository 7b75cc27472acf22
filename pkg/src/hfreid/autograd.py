"""Minimal reverse-mode autodiff over numpy arrays.

Dense tensors only, no general broadcasting: every op either requires exact
shape agreement or states the one broadcast case it supports (e.g. bias add
over the last axis). Ops are pure; the tape for one loss evaluation is
single-threaded.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NumericError", "GradCheckReport",
    "tensor", "no_grad", "stop_gradient", "grad_check",
    "add", "sub", "mul", "scale", "matmul", "exp", "log", "tanh", "relu",
    "gelu", "softmax", "log_softmax", "layer_norm", "mean", "sum_",
    "l2_norm", "normalize_rows", "euclidean", "take", "gather_batch", "concat", "reshape",
    "transpose", "expand", "attention", "linear",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the named op."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN/Inf) appeared where finite values are required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite values in result")


class Tensor:
    """A dense array plus the backward closure that produced it.

    `data` is never mutated by ops; parameter updates mutate `data` in place
    between tape evaluations, which is outside the autodiff contract.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # operator sugar (restricted to the explicit ops below)
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _result(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = req
    if req:
        out._prev = tuple(parents)
        out._backward = backward_fn(out)
    else:
        out._prev = ()
        out._backward = None
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_gradient(t):
    """Forward identity; contributes exactly zero gradient to `t`."""
    t = _as_tensor(t)
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.grad = None
    out.requires_grad = False
    out._prev = ()
    out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    """Elementwise add; also allows adding a 1-D bias over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias_case = b.ndim == 1 and a.ndim > 1 and a.shape[-1] == b.shape[0]
    if a.shape != b.shape and not bias_case:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
    data = a.data + b.data

    def backward(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                gb = g.reshape(-1, b.shape[0]).sum(axis=0) if bias_case else g
                b._accumulate(gb)
        return fn

    return _result(data, (a, b), backward, "add")


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not conform")
    data = a.data * b.data

    def backward(out):
        def fn():
            if a.requires_grad:
                a._accumulate(out.grad * b.data)
            if b.requires_grad:
                b._accumulate(out.grad * a.data)
        return fn

    return _result(data, (a, b), backward, "mul")


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    data = a.data * s

    def backward(out):
        def fn():
            if a.requires_grad:
                a._accumulate(out.grad * s)
        return fn

    return _result(data, (a,), backward, "scale")


def _reduce_to(g, shape):
    # sum leading broadcast axes introduced by np.matmul batch broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = np.matmul(a.data, b.data)

    def backward(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_reduce_to(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))
        return fn

    return _result(data, (a, b), backward, "matmul")


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(out):
        def fn():
            if a.requires_grad:
                a._accumulate(out.grad * out.data)
        return fn

    return _result(data, (a,), backward, "exp")


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    data = np.log(a.data)

    def backward(out):
        def fn():
            if a.requires_grad:
                a._accumulate(out.grad / a.data)
        return fn

    return _result(data, (a,), backward, "log")


def tanh(a):
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(out):
        def fn():
            if a.requires_grad:
                a._accumulate(out.grad * (1.0 - out.data * out.data))
        return fn

    return _result(data, (a,), backward, "tanh")


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(out):
        def fn():
            if a.requires_grad:
                a._accumulate(out.grad * (a.data > 0))
        return fn

    return _result(data, (a,), backward, "relu")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(out):
        def fn():
            if a.requires_grad:
                dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
                dgelu = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
                a._accumulate(out.grad * dgelu)
        return fn

    return _result(data, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# normalization / reductions


def softmax(a):
    """Softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(out):
        def fn():
            if a.requires_grad:
                g = out.grad
                y = out.data
                dot = (g * y).sum(axis=-1, keepdims=True)
                a._accumulate(y * (g - dot))
        return fn

    return _result(data, (a,), backward, "softmax")


def log_softmax(a):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def backward(out):
        def fn():
            if a.requires_grad:
                g = out.grad
                sm = np.exp(out.data)
                a._accumulate(g - sm * g.sum(axis=-1, keepdims=True))
        return fn

    return _result(data, (a,), backward, "log_softmax")


def layer_norm(a, gain, bias, eps=1e-6):
    """Layer normalization over the last axis with learned gain and bias."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(out):
        def fn():
            g = out.grad
            if bias.requires_grad:
                bias._accumulate(g.reshape(-1, d).sum(axis=0))
            if gain.requires_grad:
                gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
            if a.requires_grad:
                gx = g * gain.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                a._accumulate(inv * (gx - m1 - xhat * m2))
        return fn

    return _result(data, (a, gain, bias), backward, "layer_norm")


def sum_(a, axis=None):
    a = _as_tensor(a)
    data = np.asarray(a.data.sum(axis=axis))

    def backward(out):
        def fn():
            if a.requires_grad:
                g = out.grad
                if axis is None:
                    a._accumulate(np.broadcast_to(g, a.shape).copy())
                else:
                    a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())
        return fn

    return _result(data, (a,), backward, "sum")


def mean(a, axis=None):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def l2_norm(a, axis=-1, eps=1e-12):
    """Euclidean norm over `axis`; gradient is clipped at the origin."""
    a = _as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis)
    data = np.sqrt(sq)

    def backward(out):
        def fn():
            if a.requires_grad:
                denom = np.maximum(out.data, eps)
                g = out.grad / denom
                a._accumulate(np.expand_dims(g, axis) * a.data)
        return fn

    return _result(data, (a,), backward, "l2_norm")


def normalize_rows(a, eps=1e-12):
    """Scale each vector along the last axis to unit Euclidean length."""
    a = _as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norms <= eps):
        raise NumericError("normalize_rows: zero-length vector")
    data = a.data / norms

    def backward(out):
        def fn():
            if a.requires_grad:
                g = out.grad
                y = out.data
                dot = (g * y).sum(axis=-1, keepdims=True)
                a._accumulate((g - y * dot) / norms)
        return fn

    return _result(data, (a,), backward, "normalize_rows")


def euclidean(a, b, axis=-1):
    """Euclidean distance between a and b along `axis`."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"euclidean: shapes {a.shape} and {b.shape} do not conform")
    return l2_norm(sub(a, b), axis=axis)


# ---------------------------------------------------------------------------
# shape / indexing


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(out):
        def fn():
            if a.requires_grad:
                a._accumulate(out.grad.reshape(a.shape))
        return fn

    return _result(data, (a,), backward, "reshape")


def transpose(a, axes):
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(out):
        def fn():
            if a.requires_grad:
                a._accumulate(out.grad.transpose(inv))
        return fn

    return _result(data, (a,), backward, "transpose")


def expand(a, axis, n):
    """Insert a new axis of size n by repetition (backward sums over it)."""
    a = _as_tensor(a)
    data = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)

    def backward(out):
        def fn():
            if a.requires_grad:
                a._accumulate(out.grad.sum(axis=axis))
        return fn

    return _result(data, (a,), backward, "expand")


def take(a, indices, axis=0):
    """Gather slices along `axis` by integer indices (shared across batch)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ShapeError(f"take: index out of range for axis {axis} of shape {a.shape}")
    data = np.take(a.data, idx, axis=axis)

    def backward(out):
        def fn():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                moved = np.moveaxis(g, axis, 0)
                np.add.at(moved, idx, np.moveaxis(out.grad, axis, 0))
                a._accumulate(g)
        return fn

    return _result(data, (a,), backward, "take")


def gather_batch(a, indices):
    """Per-sample row gather: out[b, i] = a[b, indices[b, i]] for 3-D a."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_batch: a {a.shape} with indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError("gather_batch: index out of range")
    batch = np.arange(a.shape[0])[:, None]
    data = a.data[batch, idx]

    def backward(out):
        def fn():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                np.add.at(g, (batch, idx), out.grad)
                a._accumulate(g)
        return fn

    return _result(data, (a,), backward, "gather_batch")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(out):
        def fn():
            pieces = np.split(out.grad, splits, axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t._accumulate(g)
        return fn

    return _result(data, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# composite ops


def linear(x, w, b):
    """x @ w + b with a 1-D bias over the output axis."""
    return add(matmul(x, w), b)


def attention(q, k, v):
    """Scaled dot-product attention over the last two axes."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    dk = q.shape[-1]
    scores = scale(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(dk))
    return matmul(softmax(scores), v)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param_errors: dict = field(default_factory=dict)


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(loss_fn, params, eps=1e-5):
    """Compare analytic gradients of `loss_fn()` against central differences.

    `params` maps names to Tensors the loss closure reads; their `.data` is
    perturbed in place coordinate by coordinate.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError("grad_check: non-finite loss")
    loss.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    per_param = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_fn().data)
                flat[i] = orig - eps
                down = float(loss_fn().data)
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                worst = max(worst, _rel_err(analytic[name].reshape(-1)[i], numeric))
            per_param[name] = worst
    return GradCheckReport(max_rel_error=max(per_param.values(), default=0.0),
                           per_param_errors=per_param)
