"""Deterministic synthetic multi-speaker corpus and verification trials.

Each speaker is a fixed vocal-tract-like filter (three resonant peaks)
plus a base pitch; utterances are harmonic excitation with a wandering
F0, jitter, aspiration noise, pauses, and slow amplitude modulation.
Identity lives in the filter and pitch, content in the seed, which is
all the downstream pipeline needs: speaker identity must be a learnable
latent, realism is irrelevant.

Everything is a pure function of (seed, counts, seconds).
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from .audio import SAMPLE_RATE, Waveform, save_wav

TRAIN, EVAL = "train", "eval"


@dataclass
class SpeakerProfile:
    speaker_id: str
    f0_base: float  # Hz
    formants: tuple  # ((freq_hz, q, gain), ...) fixed per speaker
    jitter: float  # relative cycle-level pitch wobble


@dataclass
class CorpusManifest:
    entries: list  # of (relative_path, speaker_id, split)
    corpus_seed: int
    root: Path | None = None

    def paths(self, split=None):
        return [e[0] for e in self.entries if split is None or e[2] == split]

    def speaker_of(self, path: str) -> str:
        for p, spk, _ in self.entries:
            if p == path:
                return spk
        raise KeyError(path)


@dataclass
class TrialList:
    trials: list  # of (label int 1/0, path_a, path_b)


def make_profile(corpus_seed: int, speaker_index: int) -> SpeakerProfile:
    """Profile is a pure function of (corpus_seed, speaker index)."""
    rng = np.random.default_rng(np.random.SeedSequence([corpus_seed, speaker_index]))
    f0 = rng.uniform(90.0, 260.0)
    bands = [(300.0, 900.0), (900.0, 2200.0), (2200.0, 3500.0)]
    formants = tuple(
        (rng.uniform(lo, hi), rng.uniform(3.0, 10.0), rng.uniform(0.5, 2.5))
        for lo, hi in bands
    )
    return SpeakerProfile(
        speaker_id=f"spk{speaker_index:03d}",
        f0_base=f0,
        formants=formants,
        jitter=rng.uniform(0.005, 0.03),
    )


def generate_utterance(profile: SpeakerProfile, seconds: float, seed_or_rng) -> Waveform:
    """Speech-like audio for one speaker; same (profile, seed) is bit-identical."""
    if not 1.0 <= seconds <= 20.0:
        raise ValueError(f"utterance length {seconds}s outside [1, 20]")
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    sr = SAMPLE_RATE
    n = int(round(seconds * sr))
    t = np.arange(n) / sr

    # F0 contour: slow wander around the base plus cycle-rate jitter
    n_knots = max(int(seconds * 3), 2)
    knots = profile.f0_base * (1.0 + rng.uniform(-0.15, 0.15, size=n_knots))
    f0 = np.interp(t, np.linspace(0.0, seconds, n_knots), knots)
    f0 = f0 * (1.0 + profile.jitter * rng.standard_normal(n))
    phase = 2.0 * np.pi * np.cumsum(f0) / sr

    n_harm = max(int(6000.0 / (profile.f0_base * 1.2)), 3)
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        x += np.sin(h * phase) / h
    x += 0.03 * rng.standard_normal(n)

    # fixed per-speaker resonances
    for freq, q, gain in profile.formants:
        b, a = scipy.signal.iirpeak(freq, q, fs=sr)
        x = x + gain * scipy.signal.lfilter(b, a, x)

    # pauses drop to breath level, never true silence, so frame energies
    # vary with content but stay far above the MFCC log floor
    gate = np.ones(n)
    n_pause = int(rng.integers(1, 4))
    budget = rng.uniform(0.05, 0.15) * n
    for _ in range(n_pause):
        length = int(budget / n_pause)
        start = int(rng.integers(0, max(n - length, 1)))
        gate[start : start + length] = 0.06
    win = int(0.02 * sr)
    gate = np.convolve(gate, np.hamming(win) / np.hamming(win).sum(), mode="same")

    # syllabic-rate amplitude modulation
    am = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    x = x * gate * am + 0.004 * rng.standard_normal(n)

    # fixed loudness across utterances, then protect the peak
    rms = np.sqrt(np.mean(x * x))
    if rms > 0:
        x = 0.12 * x / rms
    peak = np.max(np.abs(x))
    if peak > 0.95:
        x = 0.95 * x / peak
    return Waveform(x.astype(np.float32), sr)


def default_eval_speakers(n_speakers: int) -> int:
    return max(2, n_speakers // 3)


def generate_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    seconds: float,
    seed: int,
    out_dir,
    eval_speakers: int | None = None,
    eval_utts: int | None = None,
) -> CorpusManifest:
    """Write WAVs plus manifest.tsv under out_dir and return the manifest.

    ``n_speakers`` counts all speakers; the last ``eval_speakers`` of them
    (default n/3, at least 2) form a disjoint eval split with
    ``eval_utts`` utterances each (default: same as train).
    """
    if eval_speakers is None:
        eval_speakers = default_eval_speakers(n_speakers)
    if eval_utts is None:
        eval_utts = utts_per_speaker
    if eval_speakers >= n_speakers:
        raise ValueError(
            f"eval_speakers {eval_speakers} must leave at least one train speaker of {n_speakers}"
        )
    out_dir = Path(out_dir)
    n_train = n_speakers - eval_speakers
    entries = []
    for si in range(n_speakers):
        split = TRAIN if si < n_train else EVAL
        profile = make_profile(seed, si)
        n_utts = utts_per_speaker if split == TRAIN else eval_utts
        spk_dir = out_dir / "wav" / profile.speaker_id
        spk_dir.mkdir(parents=True, exist_ok=True)
        for ui in range(n_utts):
            rng = np.random.default_rng(np.random.SeedSequence([seed, si, ui]))
            w = generate_utterance(profile, seconds, rng)
            rel = f"wav/{profile.speaker_id}/utt{ui:03d}.wav"
            try:
                save_wav(out_dir / rel, w)
            except OSError as err:
                raise OSError(f"failed writing {out_dir / rel}: {err}") from err
            entries.append((rel, profile.speaker_id, split))
    manifest = CorpusManifest(entries, seed, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def write_manifest(manifest: CorpusManifest, path) -> None:
    lines = [f"{p}\t{spk}\t{split}" for p, spk, split in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rel, spk, split = line.split("\t")
        if split not in (TRAIN, EVAL):
            raise ValueError(f"{path}: unknown split {split!r}")
        entries.append((rel, spk, split))
    return CorpusManifest(entries, corpus_seed=-1, root=path.parent)


def write_trials(
    manifest: CorpusManifest, n_target: int, n_nontarget: int, seed: int
) -> TrialList:
    """Sample verification trials from the eval split, without duplicates."""
    pool = [(p, spk) for p, spk, split in manifest.entries if split == EVAL]
    targets = []
    nontargets = []
    for i in range(len(pool)):
        for j in range(i + 1, len(pool)):
            pair = (pool[i][0], pool[j][0])
            if pool[i][1] == pool[j][1]:
                targets.append(pair)
            else:
                nontargets.append(pair)
    if n_target > len(targets) or n_nontarget > len(nontargets):
        raise ValueError(
            f"requested {n_target}+{n_nontarget} trials, eval split offers "
            f"{len(targets)} target / {len(nontargets)} nontarget pairs"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(pool)]))
    t_idx = rng.choice(len(targets), size=n_target, replace=False)
    n_idx = rng.choice(len(nontargets), size=n_nontarget, replace=False)
    trials = [(1, *targets[i]) for i in t_idx] + [(0, *nontargets[i]) for i in n_idx]
    return TrialList(trials)


def write_trials_file(trials: TrialList, path) -> None:
    lines = [f"{lab} {a} {b}" for lab, a, b in trials.trials]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trials(path) -> TrialList:
    trials = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        lab, a, b = line.split(" ")
        if lab not in ("0", "1"):
            raise ValueError(f"{path}: trial label must be 0 or 1, got {lab!r}")
        trials.append((int(lab), a, b))
    return TrialList(trials)
