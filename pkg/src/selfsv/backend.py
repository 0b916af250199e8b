"""Speaker-embedding back-ends over encoder layer stacks.

Two heads share the same contract (LayerStack in, embedding out): MHFA,
which mixes layers with two learned weight sets and pools frames with
per-head attention, and a small TDNN head with dilated convolutions and
attentive statistics pooling.  Classification during fine-tuning uses
additive-angular-margin softmax.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .optim import add_param
from .tensor import ShapeError, Tensor


def layer_weights(raw: Tensor) -> Tensor:
    """Effective mixing weights: softmax over the raw L+1 values."""
    return tt.softmax(raw, axis=-1)


def layer_aggregate(raw: Tensor, stack: list) -> Tensor:
    """Eq.-style weighted sum over layers: sum_l softmax(raw)_l * H_l."""
    if raw.shape != (len(stack),):
        raise ShapeError(
            f"layer weight count {raw.shape} does not match stack size {len(stack)}"
        )
    w = layer_weights(raw)
    out = None
    for l, h in enumerate(stack):
        wl = tt.reshape(tt.slice_(w, (slice(l, l + 1),)), (1, 1, 1))
        term = tt.mul(h, wl)
        out = term if out is None else tt.add(out, term)
    return out


@dataclass
class MHFAConfig:
    n_heads: int = 8
    key_dim: int = 32
    value_dim: int = 64
    emb_dim: int = 64

    def __post_init__(self):
        if self.value_dim % self.n_heads:
            raise ValueError(
                f"value_dim {self.value_dim} not divisible by heads {self.n_heads}"
            )


class MHFAPooling:
    """Multi-head factorized attentive pooling with two layer-weight sets."""

    kind = "mhfa"

    def __init__(self, n_layers: int, dim: int, cfg: MHFAConfig, params: dict, rng,
                 prefix: str = "backend."):
        self.cfg = cfg
        self.dim = dim
        self.params = params
        self.prefix = prefix
        add = lambda name, t: add_param(params, prefix + name, t)
        add("wk_raw", tt.zeros((n_layers + 1,), requires_grad=True))
        add("wv_raw", tt.zeros((n_layers + 1,), requires_grad=True))
        add("key_proj", tt.randn((dim, cfg.key_dim), rng, scale=1 / math.sqrt(dim), requires_grad=True))
        add("value_proj", tt.randn((dim, cfg.value_dim), rng, scale=1 / math.sqrt(dim), requires_grad=True))
        add("head_queries", tt.randn((cfg.n_heads, cfg.key_dim), rng, scale=1 / math.sqrt(cfg.key_dim), requires_grad=True))
        add("out_proj", tt.randn((cfg.value_dim, cfg.emb_dim), rng, scale=1 / math.sqrt(cfg.value_dim), requires_grad=True))
        add("out_b", tt.zeros((cfg.emb_dim,), requires_grad=True))

    def _p(self, name):
        return self.params[self.prefix + name].tensor

    def attention(self, stack: list) -> Tensor:
        """(B, n_heads, T) per-head frame attention, rows sum to 1."""
        keys = tt.matmul(layer_aggregate(self._p("wk_raw"), stack), self._p("key_proj"))
        scores = tt.matmul(keys, tt.transpose(self._p("head_queries"), (1, 0)))
        return tt.softmax(tt.swapaxes(scores, 1, 2), axis=-1)

    def pool(self, stack: list) -> Tensor:
        b, t, d = stack[0].shape
        if d != self.dim:
            raise ShapeError(f"stack dim {d} != configured dim {self.dim}")
        cfg = self.cfg
        attn = self.attention(stack)  # (B, nh, T)
        values = tt.matmul(layer_aggregate(self._p("wv_raw"), stack), self._p("value_proj"))
        dv_h = cfg.value_dim // cfg.n_heads
        v = tt.swapaxes(tt.reshape(values, (b, t, cfg.n_heads, dv_h)), 1, 2)  # (B, nh, T, dv_h)
        pooled = tt.matmul(tt.reshape(attn, (b, cfg.n_heads, 1, t)), v)  # (B, nh, 1, dv_h)
        pooled = tt.reshape(pooled, (b, cfg.value_dim))
        return tt.linear(pooled, self._p("out_proj"), self._p("out_b"))


@dataclass
class TDNNConfig:
    channels: int = 64
    emb_dim: int = 64
    attn_dim: int = 32
    kernel: int = 3
    dilations: tuple = (2, 3)

    def __post_init__(self):
        self.dilations = tuple(self.dilations)

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)


class TDNNPooling:
    """Dilated convs with residual, then attentive statistics pooling."""

    kind = "tdnn"

    def __init__(self, n_layers: int, dim: int, cfg: TDNNConfig, params: dict, rng,
                 prefix: str = "backend."):
        self.cfg = cfg
        self.dim = dim
        self.params = params
        self.prefix = prefix
        add = lambda name, t: add_param(params, prefix + name, t)
        add("w_raw", tt.zeros((n_layers + 1,), requires_grad=True))
        k = cfg.kernel
        add("conv1.w", tt.randn((cfg.channels, dim, k), rng, scale=1 / math.sqrt(dim * k), requires_grad=True))
        add("conv1.b", tt.zeros((cfg.channels,), requires_grad=True))
        add("conv2.w", tt.randn((dim, cfg.channels, k), rng, scale=1 / math.sqrt(cfg.channels * k), requires_grad=True))
        add("conv2.b", tt.zeros((dim,), requires_grad=True))
        add("attn.w1", tt.randn((dim, cfg.attn_dim), rng, scale=1 / math.sqrt(dim), requires_grad=True))
        add("attn.b1", tt.zeros((cfg.attn_dim,), requires_grad=True))
        add("attn.w2", tt.randn((cfg.attn_dim, 1), rng, scale=1 / math.sqrt(cfg.attn_dim), requires_grad=True))
        add("out.w", tt.randn((2 * dim, cfg.emb_dim), rng, scale=1 / math.sqrt(2 * dim), requires_grad=True))
        add("out.b", tt.zeros((cfg.emb_dim,), requires_grad=True))

    def _p(self, name):
        return self.params[self.prefix + name].tensor

    @staticmethod
    def _pad_replicate(x: Tensor, pad: int) -> Tensor:
        # (B, C, T): repeat edge frames so constant inputs stay constant
        left = [tt.slice_(x, (slice(None), slice(None), slice(0, 1)))] * pad
        right = [tt.slice_(x, (slice(None), slice(None), slice(-1, None)))] * pad
        return tt.concat([*left, x, *right], axis=2)

    def pool(self, stack: list) -> Tensor:
        b, t, d = stack[0].shape
        rf = self.cfg.receptive_field
        if t < rf:
            raise ShapeError(f"need at least {rf} frames for the TDNN head, got {t}")
        x = layer_aggregate(self._p("w_raw"), stack)
        h = tt.swapaxes(x, 1, 2)  # (B, D, T)
        d1, d2 = self.cfg.dilations
        k = self.cfg.kernel
        c1 = tt.conv1d(self._pad_replicate(h, (k - 1) * d1 // 2), self._p("conv1.w"),
                       self._p("conv1.b"), dilation=d1)
        c1 = tt.gelu(c1)
        c2 = tt.conv1d(self._pad_replicate(c1, (k - 1) * d2 // 2), self._p("conv2.w"),
                       self._p("conv2.b"), dilation=d2)
        h = tt.add(h, c2)  # residual
        frames = tt.swapaxes(h, 1, 2)  # (B, T, D)

        e = tt.tanh(tt.linear(frames, self._p("attn.w1"), self._p("attn.b1")))
        e = tt.matmul(e, self._p("attn.w2"))  # (B, T, 1)
        alpha = tt.softmax(tt.swapaxes(e, 1, 2), axis=-1)  # (B, 1, T)
        mean = tt.reshape(tt.matmul(alpha, frames), (b, d))
        sq = tt.reshape(tt.matmul(alpha, tt.mul(frames, frames)), (b, d))
        var = tt.sub(sq, tt.mul(mean, mean))
        std = tt.sqrt(tt.add_scalar(tt.clip(var, 0.0, np.inf), 1e-6))
        pooled = tt.concat([mean, std], axis=1)
        return tt.linear(pooled, self._p("out.w"), self._p("out.b"))


@dataclass
class AAMConfig:
    n_classes: int
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def aam_softmax_loss(y: Tensor, labels, weights: Tensor, cfg: AAMConfig) -> Tensor:
    """Additive angular margin softmax: s*cos(theta_true + m) vs s*cos(theta).

    Uses the safe expansion cos(t+m) = cos t cos m - sin t sin m, falling
    back to cos t - m*sin(m) where t+m would pass pi.  Embedding and class
    rows are length-normalized internally.
    """
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError(f"label out of range [0, {cfg.n_classes})")
    yn = tt.l2_normalize(y, axis=-1)
    wn = tt.l2_normalize(weights, axis=-1)
    cos = tt.matmul(yn, tt.transpose(wn, (1, 0)))  # (B, C)
    cos = tt.clip(cos, -1.0 + 1e-7, 1.0 - 1e-7)
    sin = tt.sqrt(tt.add_scalar(tt.mul_scalar(tt.mul(cos, cos), -1.0), 1.0))
    cos_m, sin_m = math.cos(cfg.margin), math.sin(cfg.margin)
    phi = tt.sub(tt.mul_scalar(cos, cos_m), tt.mul_scalar(sin, sin_m))
    # where cos(t) <= cos(pi - m), cos(t + m) is past the monotone range
    th = math.cos(math.pi - cfg.margin)
    mm = math.sin(math.pi - cfg.margin) * cfg.margin
    safe = Tensor((cos.data > th), dtype=cos.data.dtype)  # stop-grad selector
    unsafe = tt.add_scalar(tt.mul_scalar(safe, -1.0), 1.0)
    phi = tt.add(tt.mul(phi, safe), tt.mul(tt.add_scalar(cos, -mm), unsafe))
    onehot = Tensor(np.eye(cfg.n_classes)[labels], dtype=cos.data.dtype)
    logits = tt.mul_scalar(tt.add(cos, tt.mul(tt.sub(phi, cos), onehot)), cfg.scale)
    return tt.cross_entropy(logits, labels)
