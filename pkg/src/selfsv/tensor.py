"""Minimal reverse-mode autodiff over numpy arrays.

Tensors wrap float32 (or float64, for high-precision gradient checking)
numpy buffers.  Ops build a graph as they run; ``Tensor.backward`` on a
scalar walks it once in reverse topological order and sums gradients into
every reachable tensor with ``requires_grad``.  Callers zero grads between
optimizer steps; accumulation across repeated use of a tensor is additive.

Forward math lives here; the strided-convolution inner loops are delegated
to :mod:`selfsv._kernels`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from . import _kernels

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class GraphError(RuntimeError):
    """Autodiff graph misuse (non-scalar backward, missing grad, ...)."""


def _as_array(data, dtype):
    # default dtype is float32; grad-check tests pass float64 explicitly
    return np.ascontiguousarray(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def assert_finite(self, context: str = "tensor"):
        """Raise if the buffer holds NaN or Inf (contract-violation check)."""
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {context}")

    # -- autodiff --------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        g0 = np.ones_like(self.data)
        self.grad = g0 if self.grad is None else self.grad + g0
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)

    # -- operator sugar --------------------------------------------------

    def __neg__(self):
        return neg(self)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else mul_scalar(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ShapeError(f".T needs a 2-D tensor, got shape {self.data.shape}")
        return transpose(self, (1, 0))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _node(data, parents, bwd) -> Tensor:
    """Graph node; drops the edges when no parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _acc(t: Tensor, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- constructors --------------------------------------------------------


def zeros(shape, requires_grad=False, dtype=None):
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad=False, dtype=None):
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad)


def randn(shape, rng: np.random.Generator, scale=1.0, requires_grad=False, dtype=None):
    data = (rng.standard_normal(shape) * scale).astype(dtype or DEFAULT_DTYPE)
    return Tensor(data, requires_grad)


# -- elementwise ---------------------------------------------------------


def neg(x: Tensor) -> Tensor:
    def bwd(g):
        _acc(x, -g)

    return _node(-x.data, (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), bwd)


def add_scalar(x: Tensor, c) -> Tensor:
    def bwd(g):
        _acc(x, g)

    return _node(x.data + x.data.dtype.type(c), (x,), bwd)


def mul_scalar(x: Tensor, c) -> Tensor:
    c = x.data.dtype.type(c)

    def bwd(g):
        _acc(x, g * c)

    return _node(x.data * c, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)

    def bwd(g):
        _acc(x, g * 0.5 / np.maximum(y, np.finfo(y.dtype).tiny))

    return _node(y, (x,), bwd)


def clip(x: Tensor, lo, hi) -> Tensor:
    # subgradient convention: zero outside [lo, hi]
    inside = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        _acc(x, g * inside)

    return _node(np.clip(x.data, lo, hi), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data).astype(x.data.dtype, copy=False)

    def bwd(g):
        _acc(x, g * y * (1.0 - y))

    return _node(y, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        _acc(x, g * (1.0 - y * y))

    return _node(y, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) gaussian error linear unit."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT2PI
        _acc(x, g * (cdf + d * pdf))

    return _node((d * cdf).astype(d.dtype, copy=False), (x,), bwd)


# -- shape manipulation --------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(g):
        _acc(x, g.reshape(x.data.shape))

    return _node(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        _acc(x, g.transpose(inv))

    return _node(x.data.transpose(axes), (x,), bwd)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    def bwd(g):
        _acc(x, g.swapaxes(a, b))

    return _node(x.data.swapaxes(a, b), (x,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(t, g[tuple(idx)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def slice_(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; every selected element appears once."""

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        _acc(x, gx)

    return _node(x.data[idx], (x,), bwd)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0 by integer array; duplicates allowed."""
    indices = np.asarray(indices)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices, g)
        _acc(x, gx)

    return _node(x.data[indices], (x,), bwd)


def embedding(weight: Tensor, indices) -> Tensor:
    """Row lookup into a (V, D) table; indices may have any shape."""
    indices = np.asarray(indices)
    if weight.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {weight.data.shape}")

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, indices.ravel(), g.reshape(-1, weight.data.shape[1]))
        _acc(weight, gw)

    return _node(weight.data[indices], (weight,), bwd)


# -- reductions ----------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def bwd(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, x.data.shape).copy())

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        n = x.data.shape[axis]
    inv = 1.0 / n

    def bwd(g):
        if axis is None:
            _acc(x, np.broadcast_to(g * inv, x.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(gg * inv, x.data.shape).copy())

    return _node(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd)


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}")

    def bwd(g):
        _acc(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _acc(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _node(a.data @ b.data, (a, b), bwd)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ w (+ bias broadcast over leading axes)."""
    out = matmul(x, w)
    return add(out, bias) if bias is not None else out


# -- neural-net ops ------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(x, y * (g - dot))

    return _node(y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        sum_axes = tuple(range(g.ndim - 1))
        _acc(gamma, (g * xhat).sum(axis=sum_axes))
        _acc(beta, g.sum(axis=sum_axes))
        gh = g * gamma.data
        gx = inv * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        _acc(x, gx)

    return _node(gamma.data * xhat + beta.data, (x, gamma, beta), bwd)


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """Strided/dilated 1-D convolution on (B, C, T) input.

    Weight is (C_out, C_in/groups, K).  Padding is symmetric zeros.
    """
    b, cin, t = x.data.shape
    cout, cin_g, kernel = w.data.shape
    if cin_g * groups != cin or cout % groups:
        raise ShapeError(
            f"conv1d channel mismatch: input {x.data.shape}, weight {w.data.shape}, groups {groups}"
        )
    tp = t + 2 * padding
    span = dilation * (kernel - 1) + 1
    if tp < span:
        raise ShapeError(
            f"conv1d input too short: padded length {tp} < receptive span {span}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    out = _kernels.conv1d_forward(xp, w.data, stride, dilation, groups)
    if bias is not None:
        out = out + bias.data[:, None]

    def bwd(g):
        g = np.ascontiguousarray(g)
        if bias is not None:
            _acc(bias, g.sum(axis=(0, 2)))
        if w.requires_grad:
            _acc(w, _kernels.conv1d_grad_weight(g, xp, kernel, stride, dilation, groups))
        if x.requires_grad:
            gxp = _kernels.conv1d_grad_input(g, w.data, tp, stride, dilation, groups)
            _acc(x, gxp[:, :, padding : tp - padding] if padding else gxp)

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class.

    logits (N, K); labels an int sequence of length N with values in [0, K).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, K) logits, got {logits.data.shape}")
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bwd(g):
        p = e / denom
        p[rows, labels] -= 1.0
        _acc(logits, (g / n) * p)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), bwd)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(x, (g - y * dot) / norm)

    return _node(y, (x,), bwd)


def cosine(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine similarity along an axis, in the autodiff graph."""
    return sum_(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)
