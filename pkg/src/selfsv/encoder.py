"""Pre-trainable speech encoder.

A stack of strided 1-D convolutions plus a layer norm turns raw
waveform into frame vectors H_0 (200 Hz at the default total stride
of 80); span masking
optionally replaces frames with a learned embedding; L Transformer or
Conformer blocks produce H_1..H_L.  All layer outputs are returned so
back-ends can learn their own layer mixtures.

Everything runs batched as (B, T, D).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .optim import add_param
from .tensor import ShapeError, Tensor

VARIANTS = ("transformer", "conformer")


@dataclass
class EncoderConfig:
    variant: str = "transformer"
    n_layers: int = 4
    dim: int = 64
    heads: int = 4
    ffn_mult: int = 4
    cnn_strides: tuple = (5, 4, 2, 2)
    cnn_kernels: tuple | None = None  # None: kernel == stride per layer
    conv_kernel: int = 7  # conformer depthwise kernel, odd

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if any(s < 1 for s in self.cnn_strides):
            raise ValueError(f"strides must be >= 1, got {self.cnn_strides}")
        self.cnn_strides = tuple(self.cnn_strides)
        if self.cnn_kernels is None:
            self.cnn_kernels = self.cnn_strides
        self.cnn_kernels = tuple(self.cnn_kernels)
        if len(self.cnn_kernels) != len(self.cnn_strides):
            raise ValueError("cnn_kernels and cnn_strides must have equal length")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.cnn_strides))


@dataclass
class MaskConfig:
    mask_prob: float = 0.08
    span_len: int = 10

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        if self.span_len < 1:
            raise ValueError(f"span_len must be >= 1, got {self.span_len}")


def frame_count(n_samples: int, cfg: EncoderConfig) -> int:
    t = n_samples
    for k, s in zip(cfg.cnn_kernels, cfg.cnn_strides):
        t = (t - k) // s + 1
    return t


def min_samples(cfg: EncoderConfig, t_out: int = 2) -> int:
    n = t_out
    for k, s in zip(reversed(cfg.cnn_kernels), reversed(cfg.cnn_strides)):
        n = (n - 1) * s + k
    return n


def sinusoid_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((t, d), dtype=np.float32)
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe


class Encoder:
    """Owns parameters under the "encoder." prefix in a shared param dict."""

    def __init__(self, cfg: EncoderConfig, params: dict, rng, prefix: str = "encoder."):
        self.cfg = cfg
        self.params = params
        self.prefix = prefix
        d = cfg.dim
        cin = 1
        for i, (k, _) in enumerate(zip(cfg.cnn_kernels, cfg.cnn_strides)):
            self._add(rng, f"cnn.{i}.w", (d, cin, k), fan_in=cin * k)
            self._add_zeros(f"cnn.{i}.b", (d,))
            cin = d
        self._block_norm("cnn_ln", d)
        for l in range(cfg.n_layers):
            p = f"layer{l}."
            if cfg.variant == "transformer":
                self._block_norm(p + "ln1", d)
                self._attn(rng, p, d)
                self._block_norm(p + "ln2", d)
                self._ffn(rng, p + "ffn", d, cfg.ffn_mult)
            else:
                self._block_norm(p + "ln_ffn1", d)
                self._ffn(rng, p + "ffn1", d, cfg.ffn_mult)
                self._block_norm(p + "ln_attn", d)
                self._attn(rng, p, d)
                self._block_norm(p + "ln_conv", d)
                self._add(rng, p + "conv.pw1", (d, 2 * d), fan_in=d)
                self._add_zeros(p + "conv.pw1_b", (2 * d,))
                self._add(rng, p + "conv.dw", (d, 1, cfg.conv_kernel), fan_in=cfg.conv_kernel)
                self._block_norm(p + "conv.ln", d)
                self._add(rng, p + "conv.pw2", (d, d), fan_in=d)
                self._add_zeros(p + "conv.pw2_b", (d,))
                self._block_norm(p + "ln_ffn2", d)
                self._ffn(rng, p + "ffn2", d, cfg.ffn_mult)
                self._block_norm(p + "ln_final", d)

    # parameter helpers -------------------------------------------------
    def _add(self, rng, name, shape, fan_in):
        t = tt.randn(shape, rng, scale=1.0 / math.sqrt(fan_in), requires_grad=True)
        add_param(self.params, self.prefix + name, t)

    def _add_zeros(self, name, shape):
        add_param(self.params, self.prefix + name, tt.zeros(shape, requires_grad=True))

    def _block_norm(self, name, d):
        add_param(self.params, self.prefix + name + ".g", tt.ones((d,), requires_grad=True))
        add_param(self.params, self.prefix + name + ".b", tt.zeros((d,), requires_grad=True))

    def _attn(self, rng, p, d):
        for nm in ("wq", "wk", "wv", "wo"):
            self._add(rng, p + "attn." + nm, (d, d), fan_in=d)
            self._add_zeros(p + "attn." + nm + "_b", (d,))

    def _ffn(self, rng, p, d, mult):
        self._add(rng, p + ".w1", (d, mult * d), fan_in=d)
        self._add_zeros(p + ".b1", (mult * d,))
        self._add(rng, p + ".w2", (mult * d, d), fan_in=mult * d)
        self._add_zeros(p + ".b2", (d,))

    def _p(self, name) -> Tensor:
        return self.params[self.prefix + name].tensor

    # forward ------------------------------------------------------------
    def cnn_encode(self, wave: Tensor) -> Tensor:
        """(B, N) samples -> (B, T, D) frame vectors H_0."""
        b, n = wave.shape
        t_out = frame_count(n, self.cfg)
        if t_out < 2:
            raise ShapeError(
                f"waveform too short: {n} samples yields {t_out} frames, "
                f"need at least {min_samples(self.cfg)} samples"
            )
        x = tt.reshape(wave, (b, 1, n))
        for i, (k, s) in enumerate(zip(self.cfg.cnn_kernels, self.cfg.cnn_strides)):
            x = tt.conv1d(x, self._p(f"cnn.{i}.w"), self._p(f"cnn.{i}.b"), stride=s)
            x = tt.gelu(x)
        # normalize frames before positions are added: raw conv output is
        # orders of magnitude below the sinusoid scale and would drown in it
        return self._ln(tt.swapaxes(x, 1, 2), "cnn_ln")

    def _ln(self, x, name):
        return tt.layer_norm(x, self._p(name + ".g"), self._p(name + ".b"))

    def _ffn_fwd(self, x, p):
        h = tt.gelu(tt.linear(x, self._p(p + ".w1"), self._p(p + ".b1")))
        return tt.linear(h, self._p(p + ".w2"), self._p(p + ".b2"))

    def _attn_fwd(self, x, p):
        b, t, d = x.shape
        nh = self.cfg.heads
        dh = d // nh
        q = tt.linear(x, self._p(p + "attn.wq"), self._p(p + "attn.wq_b"))
        k = tt.linear(x, self._p(p + "attn.wk"), self._p(p + "attn.wk_b"))
        v = tt.linear(x, self._p(p + "attn.wv"), self._p(p + "attn.wv_b"))
        # (B, T, D) -> (B, nh, T, dh)
        split = lambda z: tt.swapaxes(tt.reshape(z, (b, t, nh, dh)), 1, 2)
        q, k, v = split(q), split(k), split(v)
        scores = tt.mul_scalar(tt.matmul(q, tt.swapaxes(k, 2, 3)), 1.0 / math.sqrt(dh))
        attn = tt.softmax(scores, axis=-1)
        ctx = tt.matmul(attn, v)
        ctx = tt.reshape(tt.swapaxes(ctx, 1, 2), (b, t, d))
        return tt.linear(ctx, self._p(p + "attn.wo"), self._p(p + "attn.wo_b"))

    def _conv_module(self, x, p):
        b, t, d = x.shape
        h = tt.linear(x, self._p(p + "conv.pw1"), self._p(p + "conv.pw1_b"))
        a = tt.slice_(h, (slice(None), slice(None), slice(0, d)))
        g = tt.slice_(h, (slice(None), slice(None), slice(d, 2 * d)))
        h = tt.mul(a, tt.sigmoid(g))  # gated linear unit
        h = tt.swapaxes(h, 1, 2)  # (B, D, T)
        pad = self.cfg.conv_kernel // 2
        h = tt.conv1d(h, self._p(p + "conv.dw"), stride=1, padding=pad, groups=d)
        h = tt.swapaxes(h, 1, 2)
        h = self._ln(h, p + "conv.ln")
        h = tt.mul(h, tt.sigmoid(h))  # swish
        return tt.linear(h, self._p(p + "conv.pw2"), self._p(p + "conv.pw2_b"))

    def encode(self, h0: Tensor) -> list:
        """(B, T, D) -> [H_0, H_1, .., H_L]; raises naming the first non-finite layer."""
        if h0.ndim != 3 or h0.shape[2] != self.cfg.dim:
            raise ShapeError(f"encode expects (B, T, {self.cfg.dim}), got {h0.shape}")
        stack = [h0]
        h0.assert_finite("encoder layer 0 (CNN output)")
        pos = Tensor(sinusoid_positions(h0.shape[1], self.cfg.dim)[None])
        x = tt.add(h0, pos)
        for l in range(self.cfg.n_layers):
            p = f"layer{l}."
            if self.cfg.variant == "transformer":
                x = tt.add(x, self._attn_fwd(self._ln(x, p + "ln1"), p))
                x = tt.add(x, self._ffn_fwd(self._ln(x, p + "ln2"), p + "ffn"))
            else:
                x = tt.add(x, tt.mul_scalar(self._ffn_fwd(self._ln(x, p + "ln_ffn1"), p + "ffn1"), 0.5))
                x = tt.add(x, self._attn_fwd(self._ln(x, p + "ln_attn"), p))
                x = tt.add(x, self._conv_module(self._ln(x, p + "ln_conv"), p))
                x = tt.add(x, tt.mul_scalar(self._ffn_fwd(self._ln(x, p + "ln_ffn2"), p + "ffn2"), 0.5))
                x = self._ln(x, p + "ln_final")
            x.assert_finite(f"encoder layer {l + 1}")
            stack.append(x)
        return stack

    def forward_wave(self, wave: Tensor) -> list:
        return self.encode(self.cnn_encode(wave))


def sample_mask(batch: int, t: int, cfg: MaskConfig, rng) -> np.ndarray:
    """Boolean (B, T): spans of span_len starting at frames drawn with mask_prob."""
    starts = rng.random((batch, t)) < cfg.mask_prob
    mask = np.zeros((batch, t), dtype=bool)
    for off in range(cfg.span_len):
        mask[:, off:] |= starts[:, : t - off] if off else starts
    return mask


def apply_mask(h0: Tensor, cfg: MaskConfig, seed_or_rng, mask_emb: Tensor):
    """Replace masked frames of (B, T, D) with the learned embedding.

    Returns (masked H_0, list of sorted masked-frame index arrays, one per
    batch row).  Composed in-graph so the embedding receives gradients.
    """
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    b, t, d = h0.shape
    if t < cfg.span_len:
        raise ShapeError(f"sequence length {t} shorter than mask span {cfg.span_len}")
    mask = sample_mask(b, t, cfg, rng)
    indices = [np.flatnonzero(mask[i]) for i in range(b)]
    if not mask.any():
        return h0, indices
    keep = Tensor(~mask[:, :, None])
    fill = Tensor(mask[:, :, None].astype(np.float32))
    emb = tt.reshape(mask_emb, (1, 1, d))
    masked = tt.add(tt.mul(h0, keep), tt.mul(emb, fill))
    return masked, indices
