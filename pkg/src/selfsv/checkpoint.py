"""Model checkpoints: named float32 arrays plus a JSON config snapshot.

A checkpoint carries every parameter under its prefixed name
("encoder.", "pretrain.", "backend.", "classifier."), the encoder
hyperparameters, a stage tag, and stage-specific extras.  Loading
rebuilds the exact architecture and fills the same parameter names, so
save -> load -> forward is bit-identical.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .backend import MHFAConfig, MHFAPooling, TDNNConfig, TDNNPooling
from .encoder import Encoder, EncoderConfig
from .store import read_arrays, write_arrays

STAGE_PRETRAIN1 = "pretrain_iter1"
STAGE_PRETRAIN2 = "pretrain_iter2"
STAGE_FINETUNED = "finetuned"
STAGE_LMT = "lmt"
STAGES = (STAGE_PRETRAIN1, STAGE_PRETRAIN2, STAGE_FINETUNED, STAGE_LMT)


@dataclass
class Checkpoint:
    stage: str
    encoder_cfg: EncoderConfig
    arrays: dict
    extra: dict

    @property
    def is_pretrain(self) -> bool:
        return self.stage in (STAGE_PRETRAIN1, STAGE_PRETRAIN2)


def save_checkpoint(path, stage: str, encoder_cfg: EncoderConfig, params: dict,
                    extra: dict | None = None) -> None:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")
    arrays = {name: p.tensor.data for name, p in sorted(params.items())}
    meta = {
        "stage": stage,
        "encoder_cfg": dataclasses.asdict(encoder_cfg),
        "extra": extra or {},
    }
    write_arrays(path, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_arrays(path)
    stage = meta.get("stage")
    if stage not in STAGES:
        raise ValueError(f"{path}: unknown checkpoint stage {stage!r}")
    cfg = EncoderConfig(**meta["encoder_cfg"])
    return Checkpoint(stage, cfg, arrays, meta.get("extra", {}))


def fill_params(params: dict, arrays: dict, prefix: str) -> None:
    """Copy stored arrays into freshly built parameters, name by name."""
    for name, p in params.items():
        if not name.startswith(prefix):
            continue
        if name not in arrays:
            raise KeyError(f"checkpoint missing parameter {name!r}")
        stored = arrays[name]
        if tuple(stored.shape) != tuple(p.tensor.shape):
            raise ValueError(
                f"parameter {name!r}: stored shape {stored.shape} != model shape {p.tensor.shape}"
            )
        p.tensor.data = np.ascontiguousarray(stored, dtype=p.tensor.data.dtype)


def build_encoder(ckpt: Checkpoint, params: dict) -> Encoder:
    enc = Encoder(ckpt.encoder_cfg, params, np.random.default_rng(0))
    fill_params(params, ckpt.arrays, "encoder.")
    return enc


def build_backend(ckpt: Checkpoint, params: dict):
    kind = ckpt.extra.get("backend_kind")
    n_layers = ckpt.encoder_cfg.n_layers
    dim = ckpt.encoder_cfg.dim
    rng = np.random.default_rng(0)
    if kind == "mhfa":
        head = MHFAPooling(n_layers, dim, MHFAConfig(**ckpt.extra["backend_cfg"]), params, rng)
    elif kind == "tdnn":
        cfg = TDNNConfig(**ckpt.extra["backend_cfg"])
        head = TDNNPooling(n_layers, dim, cfg, params, rng)
    else:
        raise ValueError(f"unknown backend_kind {kind!r} in checkpoint")
    fill_params(params, ckpt.arrays, "backend.")
    return head
