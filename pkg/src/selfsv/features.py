"""MFCC extraction and waveform augmentation.

The MFCC pipeline feeds the first clustering pass: pre-emphasis,
Hamming-windowed frames, magnitude FFT, mel filterbank, floored log,
orthonormal DCT-II, optional delta and delta-delta appended.

Augmentation replaces recorded noise/reverb corpora with generated
white or babble-like noise at a requested SNR and a synthetic
exponential-decay reverberation, all deterministic under a seed.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.signal

from .audio import SAMPLE_RATE, Waveform


@dataclass
class MFCCConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 24
    n_coeffs: int = 13
    use_deltas: bool = True
    log_floor: float = 1e-10
    pre_emphasis: float = 0.97

    def __post_init__(self):
        if self.n_coeffs > self.n_mels:
            raise ValueError(f"n_coeffs {self.n_coeffs} > n_mels {self.n_mels}")
        if self.window_ms < self.hop_ms:
            raise ValueError(f"window {self.window_ms} ms < hop {self.hop_ms} ms")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def dim(self) -> int:
        return self.n_coeffs * (3 if self.use_deltas else 1)


@dataclass
class FrameMatrix:
    frames: np.ndarray  # (T, D) float32
    frame_rate: float  # frames per second


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (n_mels, n_fft//2 + 1), mel-spaced 0..Nyquist."""
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bins - lo) / max(mid - lo, 1e-12)
        down = (hi - bins) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def frame_count(n_samples: int, window: int, hop: int) -> int:
    return 1 + (n_samples - window) // hop


def mfcc(w: Waveform, cfg: MFCCConfig | None = None) -> FrameMatrix:
    """Deterministic MFCC matrix, (T, n_coeffs) or (T, 3*n_coeffs) with deltas."""
    cfg = cfg or MFCCConfig()
    sr = w.sample_rate
    window = round(sr * cfg.window_ms / 1000.0)
    hop = round(sr * cfg.hop_ms / 1000.0)
    x = w.samples.astype(np.float64)
    if x.size < window:
        raise ValueError(f"audio too short for MFCC: {x.size} samples < window {window}")

    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - cfg.pre_emphasis * x[:-1]

    t = frame_count(x.size, window, hop)
    frames = np.lib.stride_tricks.sliding_window_view(emph, window)[:: hop][:t]
    frames = frames * np.hamming(window)

    n_fft = 1
    while n_fft < window:
        n_fft *= 2
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    fb = mel_filterbank(cfg.n_mels, n_fft, sr)
    mel = np.log(np.maximum(mag @ fb.T, cfg.log_floor))
    coeffs = scipy.fft.dct(mel, type=2, norm="ortho", axis=1)[:, : cfg.n_coeffs]

    if cfg.use_deltas:
        d1 = deltas(coeffs)
        d2 = deltas(d1)
        coeffs = np.concatenate([coeffs, d1, d2], axis=1)
    return FrameMatrix(coeffs.astype(np.float32), 1000.0 / cfg.hop_ms)


def deltas(x: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-width frames with edge replication."""
    pad = np.concatenate([x[:1].repeat(width, axis=0), x, x[-1:].repeat(width, axis=0)])
    out = np.zeros_like(x)
    for k in range(1, width + 1):
        out += k * (pad[width + k : width + k + x.shape[0]] - pad[width - k : width - k + x.shape[0]])
    return out / (2.0 * sum(k * k for k in range(1, width + 1)))


def white_noise(n_samples: int, seed_or_rng, rms: float = 0.1) -> Waveform:
    rng = _rng(seed_or_rng)
    x = rng.standard_normal(n_samples)
    x *= rms / max(np.sqrt(np.mean(x * x)), 1e-12)
    return Waveform(np.clip(x, -1.0, 1.0))


def babble_noise(n_samples: int, seed_or_rng, rms: float = 0.1) -> Waveform:
    """Speech-band noise with syllabic-rate amplitude modulation."""
    rng = _rng(seed_or_rng)
    sr = SAMPLE_RATE
    x = np.zeros(n_samples)
    t = np.arange(n_samples) / sr
    for _ in range(6):
        band = rng.standard_normal(n_samples)
        sos = scipy.signal.butter(
            2, [rng.uniform(150, 400), rng.uniform(800, 2500)], btype="band", fs=sr, output="sos"
        )
        band = scipy.signal.sosfilt(sos, band)
        rate = rng.uniform(2.0, 6.0)
        x += band * (1.0 + 0.6 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    x *= rms / max(np.sqrt(np.mean(x * x)), 1e-12)
    return Waveform(np.clip(x, -1.0, 1.0))


def add_noise_snr(w: Waveform, noise: Waveform, snr_db: float, seed_or_rng=0) -> Waveform:
    """Mix noise into the signal at the requested SNR (power ratio in dB).

    The noise is cropped (random offset) or looped to the signal length,
    then scaled so signal_power / noise_power hits snr_db exactly.
    ``snr_db=inf`` returns the input unchanged.
    """
    if np.isinf(snr_db) and snr_db > 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    if noise.sample_rate != w.sample_rate:
        raise ValueError(
            f"noise rate {noise.sample_rate} != signal rate {w.sample_rate}"
        )
    x = w.samples.astype(np.float64)
    p_sig = float(np.mean(x * x))
    if p_sig == 0.0:
        raise ValueError("cannot set SNR on a silent signal")

    rng = _rng(seed_or_rng)
    ns = noise.samples.astype(np.float64)
    if ns.size >= x.size:
        off = int(rng.integers(0, ns.size - x.size + 1))
        nseg = ns[off : off + x.size]
    else:
        reps = -(-x.size // ns.size)
        nseg = np.tile(ns, reps)[: x.size]
    p_noise = float(np.mean(nseg * nseg))
    if p_noise == 0.0:
        raise ValueError("noise segment is silent")
    scale = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    out = np.clip(x + scale * nseg, -1.0, 1.0)
    return Waveform(out.astype(np.float32), w.sample_rate)


def synth_reverb(w: Waveform, rt60_s: float, seed_or_rng=0) -> Waveform:
    """Convolve with an exponentially decaying white-noise impulse response.

    The IR envelope reaches -60 dB at rt60_s; output is truncated to the
    input length and renormalized to the input peak.
    """
    if rt60_s <= 0:
        raise ValueError(f"rt60 must be positive, got {rt60_s}")
    rng = _rng(seed_or_rng)
    sr = w.sample_rate
    n_ir = max(int(round(rt60_s * sr)), 2)
    decay = 10.0 ** (-3.0 * np.arange(n_ir) / n_ir)
    ir = rng.standard_normal(n_ir) * decay
    ir[0] = 1.0
    out = scipy.signal.fftconvolve(w.samples.astype(np.float64), ir)[: w.samples.size]
    peak_in = float(np.max(np.abs(w.samples)))
    peak_out = float(np.max(np.abs(out)))
    if peak_out > 0 and peak_in > 0:
        out *= peak_in / peak_out
    return Waveform(out.astype(np.float32), sr)


def random_crop(w: Waveform, seconds: float, seed_or_rng=0) -> Waveform:
    """Contiguous random crop; shorter inputs are wrap-padded first."""
    rng = _rng(seed_or_rng)
    n = int(round(seconds * w.sample_rate))
    x = w.samples
    if n > x.size:
        reps = -(-n // x.size)
        x = np.tile(x, reps)
    off = int(rng.integers(0, x.size - n + 1))
    return Waveform(x[off : off + n].copy(), w.sample_rate)


@dataclass
class AugmentConfig:
    prob: float = 0.6
    snr_lo: float = 0.0
    snr_hi: float = 15.0
    rt60_lo: float = 0.1
    rt60_hi: float = 0.5


def augment(w: Waveform, seed_or_rng, cfg: AugmentConfig | None = None) -> Waveform:
    """With probability cfg.prob, apply one random corruption (noise or reverb)."""
    cfg = cfg or AugmentConfig()
    rng = _rng(seed_or_rng)
    if rng.random() >= cfg.prob:
        return w
    kind = rng.integers(0, 3)
    if kind == 0:
        noise = white_noise(w.samples.size, rng)
    elif kind == 1:
        noise = babble_noise(w.samples.size, rng)
    else:
        return synth_reverb(w, rng.uniform(cfg.rt60_lo, cfg.rt60_hi), rng)
    return add_noise_snr(w, noise, rng.uniform(cfg.snr_lo, cfg.snr_hi), rng)


def config_as_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
