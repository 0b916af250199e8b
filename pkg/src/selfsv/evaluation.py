"""Embedding extraction, trial scoring, and verification metrics.

EER sweeps thresholds at score midpoints with P_miss counting targets
strictly below and P_fa counting nontargets at or above the threshold,
interpolating linearly between the two operating points where
P_miss - P_fa changes sign.  minDCF sweeps the same midpoints plus both
infinities and normalizes by the better of the two do-nothing
decisions, so values land in [0, 1].
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, load_wav
from .checkpoint import STAGE_FINETUNED, STAGE_LMT, Checkpoint, build_backend, build_encoder
from .corpus import TrialList
from .tensor import Tensor


@dataclass
class ScoreSet:
    scores: np.ndarray  # (N,) float64
    labels: np.ndarray  # (N,) bool, True = target

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be aligned 1-D arrays")


@dataclass(frozen=True)
class DCFConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError(f"p_target must lie in (0, 1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


@dataclass
class MetricsReport:
    eer: float
    dcf1: float  # p_target = 0.01
    dcf5: float  # p_target = 0.05
    n_trials: int


class Embedder:
    """Rebuilds the scoring model from a checkpoint and embeds full utterances.

    Counts forward passes so callers can verify per-path caching.
    """

    def __init__(self, ckpt: Checkpoint):
        if ckpt.stage not in (STAGE_FINETUNED, STAGE_LMT):
            raise ValueError(
                f"embedding extraction needs a fine-tuned checkpoint, got stage {ckpt.stage!r}"
            )
        params = {}
        self.encoder = build_encoder(ckpt, params)
        self.head = build_backend(ckpt, params)
        self.forward_count = 0

    def embed(self, w: Waveform) -> np.ndarray:
        self.forward_count += 1
        stack = self.encoder.forward_wave(Tensor(w.samples[None, :]))
        return np.array(self.head.pool(stack).data[0], dtype=np.float32)


def extract_embedding(ckpt: Checkpoint, w: Waveform) -> np.ndarray:
    return Embedder(ckpt).embed(w)


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cannot cosine-score a zero embedding")
    return float(np.dot(a, b) / (na * nb))


def score_trials(embedder, trials: TrialList, root) -> ScoreSet:
    """Score every trial in order, embedding each unique path once."""
    if isinstance(embedder, Checkpoint):
        embedder = Embedder(embedder)
    root = Path(root)
    cache = {}

    def emb(rel):
        if rel not in cache:
            cache[rel] = embedder.embed(load_wav(root / rel))
        return cache[rel]

    scores = np.empty(len(trials.trials), dtype=np.float64)
    labels = np.empty(len(trials.trials), dtype=bool)
    for i, (label, a, b) in enumerate(trials.trials):
        scores[i] = cosine_score(emb(a), emb(b))
        labels[i] = bool(label)
    return ScoreSet(scores, labels)


def _operating_points(s: ScoreSet):
    """Thresholds at -inf, score midpoints, +inf with P_miss/P_fa at each."""
    tar = np.sort(s.scores[s.labels])
    non = np.sort(s.scores[~s.labels])
    if tar.size == 0 or non.size == 0:
        raise ValueError("metrics need at least one target and one nontarget trial")
    uniq = np.unique(s.scores)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    thr = np.concatenate([[-np.inf], mids, [np.inf]])
    p_miss = np.searchsorted(tar, thr, side="left") / tar.size  # targets < thr
    p_fa = (non.size - np.searchsorted(non, thr, side="left")) / non.size  # nontargets >= thr
    return thr, p_miss, p_fa


def eer(s: ScoreSet) -> float:
    _, p_miss, p_fa = _operating_points(s)
    d = p_miss - p_fa  # nondecreasing in the threshold: -1 at -inf, +1 at +inf
    i = int(np.searchsorted(d >= 0.0, True))
    if d[i] == 0.0:
        return float(p_miss[i])
    t = -d[i - 1] / (d[i] - d[i - 1])
    return float(p_miss[i - 1] + t * (p_miss[i] - p_miss[i - 1]))


def min_dcf(s: ScoreSet, cfg: DCFConfig) -> float:
    _, p_miss, p_fa = _operating_points(s)
    cost = cfg.c_miss * p_miss * cfg.p_target + cfg.c_fa * p_fa * (1.0 - cfg.p_target)
    norm = min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1.0 - cfg.p_target))
    return float(np.min(cost) / norm)


def evaluate(s: ScoreSet) -> MetricsReport:
    return MetricsReport(
        eer=eer(s),
        dcf1=min_dcf(s, DCFConfig(p_target=0.01)),
        dcf5=min_dcf(s, DCFConfig(p_target=0.05)),
        n_trials=int(s.scores.size),
    )


def write_scores_csv(path, s: ScoreSet) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trial_index", "label", "score"])
        for i, (label, score) in enumerate(zip(s.labels, s.scores)):
            w.writerow([i, int(label), repr(float(score))])


def write_report_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["EER", repr(float(report.eer))])
        w.writerow(["DCF1", repr(float(report.dcf1))])
        w.writerow(["DCF5", repr(float(report.dcf5))])


def read_report_csv(path) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["metric", "value"]:
        raise ValueError(f"{path}: not a metrics report")
    return {name: float(value) for name, value in rows[1:]}
