"""Training loops: masked-prediction pretraining and speaker fine-tuning.

Pretraining predicts frozen cluster ids at masked encoder frames with a
linear head over the last layer, cross-entropy restricted to the masked
positions.  The full run does two iterations: MFCC-cluster targets
first, then targets re-clustered from a mid-layer latent of the
iteration-1 model, training from scratch again by default.

Fine-tuning attaches a pooling back-end and an additive-angular-margin
classifier over the training speakers.  Modes: "random_init" trains
everything from scratch, "frozen" keeps pretrained encoder weights
fixed, "learnable" updates them.  Large-margin tuning continues from a
fine-tuned checkpoint with a larger margin and longer crops.
"""

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .audio import SAMPLE_RATE, Waveform, load_wav
from .backend import (
    AAMConfig,
    MHFAConfig,
    MHFAPooling,
    TDNNConfig,
    TDNNPooling,
    aam_softmax_loss,
)
from .checkpoint import (
    STAGE_FINETUNED,
    STAGE_LMT,
    STAGE_PRETRAIN1,
    STAGE_PRETRAIN2,
    Checkpoint,
    build_encoder,
    fill_params,
    load_checkpoint,
    save_checkpoint,
)
from .corpus import TRAIN, CorpusManifest
from .encoder import Encoder, EncoderConfig, MaskConfig, apply_mask, frame_count
from .features import AugmentConfig, augment, random_crop
from .kmeans import save_codebook
from .optim import AdamState, adam_step, add_param, param_digest, zero_grads
from .targets import LabelSet, build_targets_iter1, build_targets_iter2, save_labels
from .tensor import Tensor

MODES = ("random_init", "frozen", "learnable")
BACKENDS = ("mhfa", "tdnn")


@dataclass
class PretrainConfig:
    steps: int = 3000  # per clustering iteration
    batch_size: int = 8
    crop_seconds: float = 1.25
    k_iter1: int = 32
    k_iter2: int = 64
    lr_peak: float = 5e-4
    warmup_frac: float = 0.08
    mask: MaskConfig = field(default_factory=MaskConfig)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop_seconds <= 0:
            raise ValueError("crop_seconds must be positive")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must lie in (0, 1), got {self.warmup_frac}")


@dataclass
class FinetuneConfig:
    mode: str = "learnable"
    backend: str = "mhfa"
    epochs: int = 10
    margin: float = 0.2
    scale: float = 30.0
    lr: float = 5e-4
    lr_decay: float = 0.9  # per epoch: lr * decay**epoch
    crop_seconds: float = 2.0
    batch_size: int = 16
    seed: int = 0
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")


@dataclass
class LMTConfig:
    margin: float = 0.5
    crop_seconds: float = 5.0
    epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.crop_seconds <= 0:
            raise ValueError("crop_seconds must be positive")


def pretrain_lr(step: int, cfg: PretrainConfig) -> float:
    """Linear warmup over the first warmup_frac of steps, then linear decay."""
    warm = max(1, int(round(cfg.steps * cfg.warmup_frac)))
    if step < warm:
        return cfg.lr_peak * (step + 1) / warm
    return cfg.lr_peak * max(0.0, 1.0 - (step - warm) / max(1, cfg.steps - warm))


class PretrainModel:
    """Encoder plus mask embedding and a linear head onto K cluster ids."""

    def __init__(self, enc_cfg: EncoderConfig, k: int, params: dict, rng):
        self.encoder = Encoder(enc_cfg, params, rng)
        self.k = k
        self.params = params
        d = enc_cfg.dim
        add_param(params, "pretrain.mask_emb", tt.randn((d,), rng, scale=0.1, requires_grad=True))
        add_param(params, "pretrain.proj.w",
                  tt.randn((d, k), rng, scale=1.0 / math.sqrt(d), requires_grad=True))
        add_param(params, "pretrain.proj.b", tt.zeros((k,), requires_grad=True))

    def _p(self, name):
        return self.params[name].tensor

    def loss(self, waves: np.ndarray, labels: np.ndarray, mask_cfg: MaskConfig, rng):
        """Masked-frame cross-entropy; (None, 0) when the draw masked nothing."""
        h0 = self.encoder.cnn_encode(Tensor(waves))
        masked, idx = apply_mask(h0, mask_cfg, rng, self._p("pretrain.mask_emb"))
        n_masked = int(sum(len(i) for i in idx))
        if n_masked == 0:
            return None, 0
        stack = self.encoder.encode(masked)
        logits = tt.linear(stack[-1], self._p("pretrain.proj.w"), self._p("pretrain.proj.b"))
        b, t, k = logits.shape
        rows = np.concatenate([i + bi * t for bi, i in enumerate(idx)])
        picked = tt.take_rows(tt.reshape(logits, (b * t, k)), rows)
        target = np.concatenate([labels[bi][i] for bi, i in enumerate(idx)])
        return tt.cross_entropy(picked, target), n_masked


def pretrain_step(model: PretrainModel, waves, labels, mask_cfg, state: AdamState, rng):
    """One optimizer step; returns the loss value or None for an empty mask."""
    zero_grads(model.params)
    loss, n_masked = model.loss(waves, labels, mask_cfg, rng)
    if loss is None:
        return None
    loss.backward()
    adam_step(model.params, state)
    return float(loss.data)


class _TrainSet:
    """Training-split waveforms cached in memory, with speaker class ids."""

    def __init__(self, manifest: CorpusManifest):
        if manifest.root is None:
            raise ValueError("manifest has no root directory")
        root = Path(manifest.root)
        self.rels = manifest.paths(TRAIN)
        if not self.rels:
            raise ValueError("manifest has no training utterances")
        self.waves = {rel: load_wav(root / rel) for rel in self.rels}
        self.speakers = sorted({manifest.speaker_of(rel) for rel in self.rels})
        spk_index = {s: i for i, s in enumerate(self.speakers)}
        self.class_of = {rel: spk_index[manifest.speaker_of(rel)] for rel in self.rels}


def _pretrain_batch(ds: _TrainSet, labels: LabelSet, enc_cfg: EncoderConfig,
                    crop_n: int, batch_size: int, rng):
    """Crops quantized to the encoder stride so stored labels slice exactly."""
    stride = enc_cfg.total_stride
    t_crop = frame_count(crop_n, enc_cfg)
    waves = np.empty((batch_size, crop_n), dtype=np.float32)
    labs = np.empty((batch_size, t_crop), dtype=np.int64)
    picks = rng.integers(0, len(ds.rels), size=batch_size)
    for j, pick in enumerate(picks):
        rel = ds.rels[int(pick)]
        x = ds.waves[rel].samples
        ids = labels.labels[rel]
        if x.size < crop_n:
            reps = -(-crop_n // x.size)
            x = np.tile(x, reps)
            ids = np.resize(ids, frame_count(x.size, enc_cfg))
        off = int(rng.integers(0, x.size - crop_n + 1))
        off -= off % stride
        waves[j] = x[off : off + crop_n]
        labs[j] = ids[off // stride : off // stride + t_crop]
    return waves, labs


def run_pretrain_iteration(
    manifest: CorpusManifest,
    labels: LabelSet,
    enc_cfg: EncoderConfig,
    cfg: PretrainConfig,
    iteration: int,
    out_dir,
    init_arrays: dict | None = None,
):
    """Train one clustering iteration from scratch (or warm-started arrays).

    Returns (checkpoint path, loss CSV path, losses, skipped batch count).
    """
    if iteration not in (1, 2):
        raise ValueError(f"iteration must be 1 or 2, got {iteration}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _TrainSet(manifest)
    missing = [rel for rel in ds.rels if rel not in labels.labels]
    if missing:
        raise ValueError(f"labels missing for {missing[0]!r} and {len(missing) - 1} more")
    params = {}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, iteration]))
    model = PretrainModel(enc_cfg, labels.k, params, rng)
    if init_arrays is not None:
        # warm start reuses encoder weights; the head targets a new codebook
        fill_params(params, init_arrays, "encoder.")
        if "pretrain.mask_emb" in init_arrays:
            fill_params(params, init_arrays, "pretrain.mask_emb")
    state = AdamState(params, lr=cfg.lr_peak)
    crop_n = int(round(cfg.crop_seconds * SAMPLE_RATE))
    losses = []
    skipped = 0
    csv_path = out / f"pretrain_iter{iteration}_loss.csv"
    with open(csv_path, "w") as f:
        f.write("step,loss\n")
        for step in range(cfg.steps):
            state.lr = pretrain_lr(step, cfg)
            waves, labs = _pretrain_batch(ds, labels, enc_cfg, crop_n, cfg.batch_size, rng)
            value = pretrain_step(model, waves, labs, cfg.mask, state, rng)
            if value is None:
                skipped += 1
                warnings.warn(f"step {step}: mask drew no frames, batch skipped")
                continue
            losses.append(value)
            f.write(f"{step},{value!r}\n")
    stage = STAGE_PRETRAIN1 if iteration == 1 else STAGE_PRETRAIN2
    ckpt_path = out / f"pretrain_iter{iteration}.ckpt"
    save_checkpoint(ckpt_path, stage, enc_cfg, params, extra={
        "k": labels.k,
        "feature_kind": labels.feature_kind,
        "steps": cfg.steps,
        "skipped_batches": skipped,
    })
    return ckpt_path, csv_path, losses, skipped


def run_pretraining(
    manifest: CorpusManifest,
    enc_cfg: EncoderConfig | None = None,
    cfg: PretrainConfig | None = None,
    out_dir=".",
    warm_start_iter2: bool = False,
):
    """Both clustering iterations end to end; returns paths and loss curves."""
    enc_cfg = enc_cfg or EncoderConfig()
    cfg = cfg or PretrainConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cb1, ls1 = build_targets_iter1(manifest, k=cfg.k_iter1, seed=cfg.seed, encoder_cfg=enc_cfg)
    save_codebook(out / "codebook_iter1.svt", cb1)
    save_labels(out / "labels_iter1.svl", ls1)
    ck1, csv1, losses1, _ = run_pretrain_iteration(manifest, ls1, enc_cfg, cfg, 1, out)

    ckpt1 = load_checkpoint(ck1)
    cb2, ls2 = build_targets_iter2(manifest, ckpt1, k=cfg.k_iter2, seed=cfg.seed)
    save_codebook(out / "codebook_iter2.svt", cb2)
    save_labels(out / "labels_iter2.svl", ls2)
    init = ckpt1.arrays if warm_start_iter2 else None
    ck2, csv2, losses2, _ = run_pretrain_iteration(
        manifest, ls2, enc_cfg, cfg, 2, out, init_arrays=init
    )
    return {
        "ckpt_iter1": ck1,
        "ckpt_iter2": ck2,
        "loss_csv_iter1": csv1,
        "loss_csv_iter2": csv2,
        "losses_iter1": losses1,
        "losses_iter2": losses2,
        "labels_iter1": out / "labels_iter1.svl",
        "labels_iter2": out / "labels_iter2.svl",
    }


class SpeakerModel:
    """Encoder, pooling back-end, and AAM classifier over the train speakers."""

    def __init__(self, enc_cfg: EncoderConfig, backend: str, n_classes: int,
                 params: dict, rng, margin: float, scale: float,
                 backend_cfg=None):
        self.encoder = Encoder(enc_cfg, params, rng)
        if backend == "mhfa":
            self.backend_cfg = backend_cfg or MHFAConfig()
            self.head = MHFAPooling(enc_cfg.n_layers, enc_cfg.dim, self.backend_cfg, params, rng)
        elif backend == "tdnn":
            self.backend_cfg = backend_cfg or TDNNConfig()
            self.head = TDNNPooling(enc_cfg.n_layers, enc_cfg.dim, self.backend_cfg, params, rng)
        else:
            raise ValueError(f"backend must be one of {BACKENDS}, got {backend!r}")
        self.params = params
        self.aam = AAMConfig(n_classes=n_classes, margin=margin, scale=scale)
        emb = self.backend_cfg.emb_dim
        add_param(params, "classifier.w",
                  tt.randn((n_classes, emb), rng, scale=1.0 / math.sqrt(emb), requires_grad=True))

    def embed(self, waves: np.ndarray) -> Tensor:
        stack = self.encoder.forward_wave(Tensor(waves))
        return self.head.pool(stack)

    def loss(self, waves: np.ndarray, class_ids) -> Tensor:
        return aam_softmax_loss(self.embed(waves), class_ids,
                                self.params["classifier.w"].tensor, self.aam)

    def predict(self, waves: np.ndarray) -> np.ndarray:
        """Class ids by cosine against the classifier rows (no gradients)."""
        y = self.embed(waves).data
        w = self.params["classifier.w"].tensor.data
        y = y / np.linalg.norm(y, axis=1, keepdims=True)
        w = w / np.linalg.norm(w, axis=1, keepdims=True)
        return np.argmax(y @ w.T, axis=1)


def _center_crop(w: Waveform, crop_n: int) -> np.ndarray:
    x = w.samples
    if x.size < crop_n:
        x = np.tile(x, -(-crop_n // x.size))
    off = (x.size - crop_n) // 2
    return x[off : off + crop_n]


def train_accuracy(model: SpeakerModel, ds: _TrainSet, crop_seconds: float,
                   batch_size: int = 16) -> float:
    """Accuracy on deterministic center crops of every training utterance."""
    crop_n = int(round(crop_seconds * SAMPLE_RATE))
    hits = 0
    for lo in range(0, len(ds.rels), batch_size):
        chunk = ds.rels[lo : lo + batch_size]
        waves = np.stack([_center_crop(ds.waves[rel], crop_n) for rel in chunk])
        pred = model.predict(waves)
        hits += int(np.sum(pred == np.array([ds.class_of[rel] for rel in chunk])))
    return hits / len(ds.rels)


def _supervised_epochs(model: SpeakerModel, ds: _TrainSet, params: dict,
                       epochs: int, epoch_offset: int, lr: float, lr_decay: float,
                       crop_seconds: float, batch_size: int, aug_cfg: AugmentConfig,
                       rng, loss_file) -> list:
    state = AdamState(params, lr=lr)
    losses = []
    step = 0
    for epoch in range(epochs):
        state.lr = lr * lr_decay ** (epoch_offset + epoch)
        order = rng.permutation(len(ds.rels))
        for lo in range(0, len(order), batch_size):
            chunk = [ds.rels[int(i)] for i in order[lo : lo + batch_size]]
            crops = []
            for rel in chunk:
                w = random_crop(ds.waves[rel], crop_seconds, rng)
                crops.append(augment(w, rng, aug_cfg).samples)
            waves = np.stack(crops)
            ids = np.array([ds.class_of[rel] for rel in chunk])
            zero_grads(params)
            loss = model.loss(waves, ids)
            loss.backward()
            adam_step(params, state)
            value = float(loss.data)
            losses.append(value)
            loss_file.write(f"{step},{value!r}\n")
            step += 1
    return losses


def run_finetune(
    manifest: CorpusManifest,
    cfg: FinetuneConfig,
    out_dir,
    pretrained=None,
    enc_cfg: EncoderConfig | None = None,
) -> dict:
    """Supervised fine-tuning; saves a "finetuned" checkpoint.

    pretrained may be a path or a loaded Checkpoint.  mode "random_init"
    must not get one; "frozen" and "learnable" require one.
    """
    if cfg.mode == "random_init":
        if pretrained is not None:
            raise ValueError("mode 'random_init' must not receive a pretrained checkpoint")
    elif pretrained is None:
        raise ValueError(f"mode {cfg.mode!r} requires a pretrained checkpoint")
    ckpt = None
    if pretrained is not None:
        ckpt = pretrained if isinstance(pretrained, Checkpoint) else load_checkpoint(pretrained)
        if not ckpt.is_pretrain:
            raise ValueError(f"expected a pretraining checkpoint, got stage {ckpt.stage!r}")
        enc_cfg = ckpt.encoder_cfg
    else:
        enc_cfg = enc_cfg or EncoderConfig()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _TrainSet(manifest)
    params = {}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    model = SpeakerModel(enc_cfg, cfg.backend, len(ds.speakers), params, rng,
                         cfg.margin, cfg.scale)
    if ckpt is not None:
        fill_params(params, ckpt.arrays, "encoder.")
    if cfg.mode == "frozen":
        for name, p in params.items():
            if name.startswith("encoder."):
                p.set_trainable(False)
    digest_before = param_digest(params, "encoder.")

    csv_path = out / "finetune_loss.csv"
    with open(csv_path, "w") as f:
        f.write("step,loss\n")
        losses = _supervised_epochs(
            model, ds, params, cfg.epochs, 0, cfg.lr, cfg.lr_decay,
            cfg.crop_seconds, cfg.batch_size, cfg.augment_cfg, rng, f,
        )
    digest_after = param_digest(params, "encoder.")
    accuracy = train_accuracy(model, ds, cfg.crop_seconds)

    ckpt_path = out / "finetuned.ckpt"
    save_checkpoint(ckpt_path, STAGE_FINETUNED, enc_cfg, params, extra={
        "backend_kind": cfg.backend,
        "backend_cfg": dataclasses.asdict(model.backend_cfg),
        "mode": cfg.mode,
        "margin": cfg.margin,
        "scale": cfg.scale,
        "n_classes": len(ds.speakers),
        "speakers": ds.speakers,
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "lr_decay": cfg.lr_decay,
        "pretrained_stage": None if ckpt is None else ckpt.stage,
        "encoder_digest_before": digest_before,
        "encoder_digest_after": digest_after,
        "train_accuracy": accuracy,
    })
    return {
        "ckpt": ckpt_path,
        "loss_csv": csv_path,
        "losses": losses,
        "train_accuracy": accuracy,
        "encoder_digest_before": digest_before,
        "encoder_digest_after": digest_after,
    }


def large_margin_tune(ckpt, manifest: CorpusManifest, cfg: LMTConfig, out_dir) -> dict:
    """Continue a fine-tuned model with a larger margin and longer crops."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if ckpt.stage != STAGE_FINETUNED:
        raise ValueError(
            f"large-margin tuning needs a 'finetuned' checkpoint, got stage {ckpt.stage!r}"
        )
    extra = ckpt.extra
    if cfg.margin < extra["margin"]:
        raise ValueError(
            f"margin must not shrink: {cfg.margin} < fine-tune margin {extra['margin']}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _TrainSet(manifest)
    if ds.speakers != list(extra["speakers"]):
        raise ValueError("manifest speakers do not match the fine-tuned class list")

    params = {}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
    backend_cfg_cls = MHFAConfig if extra["backend_kind"] == "mhfa" else TDNNConfig
    model = SpeakerModel(
        ckpt.encoder_cfg, extra["backend_kind"], extra["n_classes"], params, rng,
        cfg.margin, extra["scale"], backend_cfg=backend_cfg_cls(**extra["backend_cfg"]),
    )
    fill_params(params, ckpt.arrays, "")
    if extra["mode"] == "frozen":
        for name, p in params.items():
            if name.startswith("encoder."):
                p.set_trainable(False)
    digest_before = param_digest(params, "encoder.")

    csv_path = out / "lmt_loss.csv"
    with open(csv_path, "w") as f:
        f.write("step,loss\n")
        losses = _supervised_epochs(
            model, ds, params, cfg.epochs, extra["epochs"], extra["lr"], extra["lr_decay"],
            cfg.crop_seconds, 16, AugmentConfig(), rng, f,
        )
    accuracy = train_accuracy(model, ds, cfg.crop_seconds)

    new_extra = dict(extra)
    new_extra.update({
        "margin": cfg.margin,
        "epochs": extra["epochs"] + cfg.epochs,
        "encoder_digest_before": digest_before,
        "encoder_digest_after": param_digest(params, "encoder."),
        "train_accuracy": accuracy,
    })
    ckpt_path = out / "lmt.ckpt"
    save_checkpoint(ckpt_path, STAGE_LMT, ckpt.encoder_cfg, params, extra=new_extra)
    return {
        "ckpt": ckpt_path,
        "loss_csv": csv_path,
        "losses": losses,
        "train_accuracy": accuracy,
    }
