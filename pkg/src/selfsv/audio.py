"""PCM WAV input/output.

Only one on-disk format exists in this codebase: RIFF PCM, 16-bit,
mono, little-endian, 16 kHz by default.  Samples live in memory as
float32 in [-1, 1], scaled by 1/32768.
"""

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
_SCALE = 32768.0


class AudioFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise AudioFormatError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("waveform contains non-finite samples")

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


def load_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a PCM WAV file; rejects anything but 16-bit mono at the expected rate."""
    path = Path(path)
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise AudioFormatError(f"{path}: channels = {f.getnchannels()}, need mono")
        if f.getsampwidth() != 2:
            raise AudioFormatError(
                f"{path}: bit depth = {8 * f.getsampwidth()}, need 16-bit"
            )
        if f.getframerate() != expected_rate:
            raise AudioFormatError(
                f"{path}: sample rate = {f.getframerate()}, need {expected_rate}"
            )
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / _SCALE
    return Waveform(samples, expected_rate)


def save_wav(path, w: Waveform) -> None:
    """Write 16-bit mono PCM; quantization round-trips exactly through load_wav."""
    path = Path(path)
    x = np.clip(np.round(w.samples * _SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(x.tobytes())
