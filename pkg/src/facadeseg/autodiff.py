"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is taped on the fly: every primitive that touches a tensor with
``requires_grad`` records a node holding its inputs and a closure that maps
the incoming gradient to per-input gradients.  Backward walks the tape once;
a second walk over the same graph raises ``GraphConsumed``.

All storage is float64.  Any primitive whose output contains a NaN/Inf while
its inputs were finite raises ``NumericOverflow`` instead of propagating the
value silently.
"""

from __future__ import annotations

import contextlib
import functools

import numpy as np
from scipy import special

from .errors import (
    GraphConsumed,
    NotScalar,
    NumericOverflow,
    ShapeMismatch,
)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic (thin wrappers over the primitives below)
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, out_data, inputs, backward_fn):
    if not np.all(np.isfinite(out_data)):
        raise NumericOverflow(f"non-finite output of primitive '{op}'")
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    node = Node(op, inputs, backward_fn) if track else None
    return Tensor(out_data, requires_grad=track, node=node)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -----------------------------------------------------------

def add(a, b):
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return _make("add", out, [a, b], lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    return _make("mul", out, [a, b], lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}")
    return _make("div", out, [a, b], lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data ** 2), b.shape)))


def scale(a, c):
    c = float(c)
    return _make("scalar-scale", a.data * c, [a], lambda g: (g * c,))


def powc(a, exponent):
    """Elementwise power by a Python constant."""
    e = float(exponent)
    out = a.data ** e
    return _make("powc", out, [a], lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a):
    out = np.exp(a.data)
    return _make("exp", out, [a], lambda g: (g * out,))


def log(a):
    out = np.log(a.data)
    return _make("log", out, [a], lambda g: (g / a.data,))


def sigmoid(a):
    out = special.expit(a.data)
    return _make("sigmoid", out, [a], lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """log(1+exp(x)) in overflow-safe form; gradient is sigmoid(x)."""
    z = a.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return _make("softplus", out, [a], lambda g: (g * special.expit(z),))


def gelu(a):
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
    out = x * phi

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (phi + x * pdf),)

    return _make("gelu", out, [a], backward)


# --- shape manipulation ----------------------------------------------------

def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}")
    return _make("reshape", out, [a], lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(int(x) for x in axes)
    inv = np.argsort(axes)
    out = a.data.transpose(axes)
    return _make("transpose", out, [a], lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(
            "concat: incompatible shapes " + str([t.shape for t in tensors]))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors)))

    return _make("concat", out, tensors, backward)


def slice_(a, index):
    """Basic slicing; `index` is anything numpy basic indexing accepts."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make("slice", out, [a], backward)


def gather_rows(a, indices):
    """Select rows of a 2-D tensor; also serves as embedding lookup."""
    if a.data.ndim != 2:
        raise ShapeMismatch(f"gather_rows expects 2-D input, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("embedding-lookup", out, [a], backward)


# --- reductions ------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make("sum", out, [a], backward)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --- linear algebra --------------------------------------------------------

def matmul(a, b):
    """2-D or batched (equal leading dims) matrix product."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-D operands: {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims: {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        if not (a.data.ndim == 2 and b.data.ndim == 2):
            raise ShapeMismatch(f"matmul batch dims: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2),
                np.swapaxes(a.data, -1, -2) @ g)

    return _make("matmul", out, [a, b], backward)


def softmax(a):
    """Softmax over the last axis (row-softmax)."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make("row-softmax", out, [a], backward)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        gxhat = g * gain.data
        dx = inv / n * (
            n * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return (dx, ggain, gbias)

    return _make("layer-norm", out, [a, gain, bias], backward)


# --- bilinear upsampling ---------------------------------------------------

@functools.lru_cache(maxsize=32)
def _upsample_matrix(h, w, H, W):
    """Interpolation matrix mapping an h*w grid to an H*W grid.

    align_corners=False convention: output pixel centre (x+0.5)/W maps to
    source coordinate (x+0.5)*w/W - 0.5, clamped to the valid range.
    """
    M = np.zeros((H * W, h * w))
    for y in range(H):
        sy = (y + 0.5) * h / H - 0.5
        y0 = int(np.floor(sy))
        ty = sy - y0
        y0c, y1c = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
        for x in range(W):
            sx = (x + 0.5) * w / W - 0.5
            x0 = int(np.floor(sx))
            tx = sx - x0
            x0c, x1c = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            M[y * W + x, y0c * w + x0c] += (1 - ty) * (1 - tx)
            M[y * W + x, y0c * w + x1c] += (1 - ty) * tx
            M[y * W + x, y1c * w + x0c] += ty * (1 - tx)
            M[y * W + x, y1c * w + x1c] += ty * tx
    M.setflags(write=False)
    return M

def bilinear_upsample_2d(a, out_h, out_w):
    """Bilinearly resample a 2-D grid to (out_h, out_w)."""
    if a.data.ndim != 2:
        raise ShapeMismatch(f"bilinear_upsample_2d expects 2-D input, got {a.shape}")
    h, w = a.data.shape
    M = _upsample_matrix(h, w, int(out_h), int(out_w))
    out = (M @ a.data.reshape(-1)).reshape(int(out_h), int(out_w))

    def backward(g):
        return ((M.T @ g.reshape(-1)).reshape(h, w),)

    return _make("bilinear-upsample-2d", out, [a], backward)


# --- generic dispatch ------------------------------------------------------

_PRIMITIVES = {
    "add": add,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
    "row-softmax": softmax,
    "sigmoid": sigmoid,
    "layer-norm": layer_norm,
    "gelu": gelu,
    "mean": tmean,
    "sum": tsum,
    "scalar-scale": scale,
    "embedding-lookup": gather_rows,
    "bilinear-upsample-2d": bilinear_upsample_2d,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "powc": powc,
}


def apply_primitive(kind, inputs, attrs=None):
    """Dispatch a primitive by tag.  `inputs` is a list of Tensors."""
    if kind not in _PRIMITIVES:
        raise KeyError(f"unknown primitive '{kind}'")
    fn = _PRIMITIVES[kind]
    attrs = attrs or {}
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# --- backward --------------------------------------------------------------

def backward(loss):
    """Populate .grad on every reachable requires_grad leaf of `loss`.

    The graph is single-use: a second call over any already-walked node
    raises GraphConsumed.  Leaf gradients accumulate (+=) across separate
    forward/backward passes, which is what gradient accumulation relies on.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward on tensor of shape {loss.shape}")
    if loss.node is None:
        if not loss.requires_grad:
            return
        _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    if loss.node.consumed:
        raise GraphConsumed("backward called twice on the same graph")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for parent in t.node.inputs:
            stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        node = t.node
        if node.consumed:
            raise GraphConsumed("backward called twice on the same graph")
        node.consumed = True
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, input_grads):
            if not parent.requires_grad or pg is None:
                continue
            if parent.node is None:
                _accumulate_leaf(parent, pg)
            else:
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _accumulate_leaf(t, g):
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g
