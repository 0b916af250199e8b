"""Pseudo-label construction for masked-prediction pretraining.

Iteration 1 clusters MFCC frames and maps the cluster ids onto the
encoder's coarser frame grid by nearest frame-center time.  Iteration 2
runs a previous pretraining checkpoint over the corpus, clusters a
mid-layer latent, and labels every encoder frame 1:1.  Label files pair
a JSON header with a flat int32 payload so training can slice per-
utterance label runs without re-clustering.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, load_wav
from .checkpoint import Checkpoint, build_encoder
from .corpus import TRAIN, CorpusManifest
from .encoder import EncoderConfig, frame_count
from .features import MFCCConfig, mfcc
from .kmeans import Codebook, kmeans_assign, kmeans_fit
from .tensor import Tensor

_LABEL_MAGIC = b"SVL0"


@dataclass
class LabelSet:
    """Cluster ids per utterance, aligned to the encoder frame grid."""

    labels: dict  # relative path -> (T,) int32
    k: int
    feature_kind: str

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"need k >= 2, got {self.k}")
        for path, ids in self.labels.items():
            ids = np.ascontiguousarray(ids, dtype=np.int32)
            if ids.ndim != 1:
                raise ValueError(f"{path}: labels must be 1-D")
            self.labels[path] = ids


def mfcc_frame_times(n_frames: int, cfg: MFCCConfig, sample_rate: int) -> np.ndarray:
    """Center time in seconds of each analysis window."""
    hop = int(round(cfg.hop_ms * sample_rate / 1000.0))
    window = int(round(cfg.window_ms * sample_rate / 1000.0))
    return (np.arange(n_frames) * hop + window / 2.0) / sample_rate


def encoder_frame_times(n_frames: int, cfg: EncoderConfig, sample_rate: int) -> np.ndarray:
    stride = cfg.total_stride
    return (np.arange(n_frames) + 0.5) * stride / sample_rate


def resample_nearest(labels: np.ndarray, src_times: np.ndarray,
                     dst_times: np.ndarray) -> np.ndarray:
    """Pick, for every destination time, the label whose source time is closest."""
    if labels.shape[0] != src_times.shape[0]:
        raise ValueError("labels and src_times disagree on length")
    if labels.shape[0] == 0:
        raise ValueError("cannot resample from zero source frames")
    right = np.searchsorted(src_times, dst_times)
    right = np.clip(right, 1, len(src_times) - 1)
    left = right - 1
    pick_right = (src_times[right] - dst_times) < (dst_times - src_times[left])
    idx = np.where(pick_right, right, left)
    return labels[idx].astype(np.int32)


def _subsample(frames: np.ndarray, cap: int, seed: int) -> np.ndarray:
    if frames.shape[0] <= cap:
        return frames
    rng = np.random.default_rng(np.random.SeedSequence([seed, frames.shape[0]]))
    idx = np.sort(rng.choice(frames.shape[0], size=cap, replace=False))
    return frames[idx]


def build_targets_iter1(
    manifest: CorpusManifest,
    k: int = 32,
    seed: int = 0,
    mfcc_cfg: MFCCConfig | None = None,
    encoder_cfg: EncoderConfig | None = None,
    max_fit_frames: int = 200_000,
) -> tuple:
    """Cluster training-split MFCCs; returns (codebook, LabelSet)."""
    mfcc_cfg = mfcc_cfg or MFCCConfig()
    encoder_cfg = encoder_cfg or EncoderConfig()
    if manifest.root is None:
        raise ValueError("manifest has no root directory")
    per_utt = {}
    waves = {}
    for rel in manifest.paths(TRAIN):
        w = load_wav(Path(manifest.root) / rel)
        waves[rel] = w
        per_utt[rel] = mfcc(w, mfcc_cfg).frames
    if not per_utt:
        raise ValueError("manifest has no training utterances")
    pool = _subsample(np.concatenate(list(per_utt.values()), axis=0), max_fit_frames, seed)
    codebook = kmeans_fit(pool, k, seed=seed, feature_kind="mfcc")
    labels = {}
    for rel, frames in per_utt.items():
        ids = kmeans_assign(frames, codebook)
        t_enc = frame_count(len(waves[rel].samples), encoder_cfg)
        labels[rel] = resample_nearest(
            ids,
            mfcc_frame_times(frames.shape[0], mfcc_cfg, waves[rel].sample_rate),
            encoder_frame_times(t_enc, encoder_cfg, waves[rel].sample_rate),
        )
    return codebook, LabelSet(labels, k, "mfcc")


def default_latent_layer(n_layers: int) -> int:
    return int(round(n_layers / 2))


def encode_latents(ckpt: Checkpoint, wave: Waveform, layer_index: int) -> np.ndarray:
    """Frozen forward pass; returns the (T, D) hidden states of one layer."""
    params = {}
    enc = build_encoder(ckpt, params)
    stack = enc.forward_wave(Tensor(wave.samples[None, :]))
    return stack[layer_index].data[0]


def build_targets_iter2(
    manifest: CorpusManifest,
    ckpt: Checkpoint,
    layer_index: int | None = None,
    k: int = 64,
    seed: int = 0,
    max_fit_frames: int = 200_000,
) -> tuple:
    """Cluster mid-layer latents of a pretrained encoder; returns (codebook, LabelSet)."""
    if not ckpt.is_pretrain:
        raise ValueError(
            f"re-clustering needs a pretraining checkpoint, got stage {ckpt.stage!r}"
        )
    n_layers = ckpt.encoder_cfg.n_layers
    if layer_index is None:
        layer_index = default_latent_layer(n_layers)
    if not 0 <= layer_index <= n_layers:
        raise ValueError(f"layer_index {layer_index} outside [0, {n_layers}]")
    if manifest.root is None:
        raise ValueError("manifest has no root directory")
    params = {}
    enc = build_encoder(ckpt, params)
    per_utt = {}
    for rel in manifest.paths(TRAIN):
        w = load_wav(Path(manifest.root) / rel)
        stack = enc.forward_wave(Tensor(w.samples[None, :]))
        per_utt[rel] = stack[layer_index].data[0]
    if not per_utt:
        raise ValueError("manifest has no training utterances")
    pool = _subsample(np.concatenate(list(per_utt.values()), axis=0), max_fit_frames, seed)
    kind = f"latent:{layer_index}"
    codebook = kmeans_fit(pool, k, seed=seed, feature_kind=kind)
    labels = {rel: kmeans_assign(h, codebook) for rel, h in per_utt.items()}
    return codebook, LabelSet(labels, k, kind)


def save_labels(path, labels: LabelSet) -> None:
    entries = []
    chunks = []
    offset = 0
    for rel in sorted(labels.labels):
        ids = labels.labels[rel]
        entries.append({"path": rel, "offset": offset, "count": int(ids.shape[0])})
        chunks.append(ids.astype("<i4"))
        offset += ids.shape[0]
    header = json.dumps(
        {"k": labels.k, "feature_kind": labels.feature_kind, "entries": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_LABEL_MAGIC)
        f.write(np.uint32(len(header)).tobytes())
        f.write(header)
        if chunks:
            f.write(np.concatenate(chunks).tobytes())


def load_labels(path) -> LabelSet:
    blob = Path(path).read_bytes()
    if blob[:4] != _LABEL_MAGIC:
        raise ValueError(f"{path}: not a label file")
    hlen = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    meta = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    payload = np.frombuffer(blob[8 + hlen :], dtype="<i4")
    labels = {}
    for ent in meta["entries"]:
        start, count = ent["offset"], ent["count"]
        if start + count > payload.shape[0]:
            raise ValueError(f"{path}: payload ends before labels for {ent['path']!r}")
        labels[ent["path"]] = payload[start : start + count].astype(np.int32)
    return LabelSet(labels, meta["k"], meta["feature_kind"])


def disagreement(a: LabelSet, b: LabelSet) -> float:
    """Fraction of frames labeled differently; label ids are compared as partitions.

    Cluster ids from independent k-means runs are arbitrary, so ids are
    first greedily matched by co-occurrence before counting mismatches.
    """
    paths = sorted(set(a.labels) & set(b.labels))
    if not paths:
        raise ValueError("label sets share no utterances")
    xs = np.concatenate([a.labels[p] for p in paths])
    ys = np.concatenate([b.labels[p] for p in paths])
    if xs.shape != ys.shape:
        raise ValueError("label sets disagree on frame counts")
    joint = np.zeros((a.k, b.k), dtype=np.int64)
    np.add.at(joint, (xs, ys), 1)
    mapping = {}
    used = set()
    # greedy assignment, largest co-occurrence first
    order = np.dstack(np.unravel_index(np.argsort(joint, axis=None)[::-1], joint.shape))[0]
    for i, j in order:
        if int(i) not in mapping and int(j) not in used:
            mapping[int(i)] = int(j)
            used.add(int(j))
    remapped = np.array([mapping.get(int(x), -1) for x in xs])
    return float(np.mean(remapped != ys))
