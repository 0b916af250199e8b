"""Checkpoint round trips: arrays byte-exact, forwards bit-identical."""

import dataclasses

import numpy as np
import pytest

from selfsv.checkpoint import (
    STAGES,
    build_backend,
    build_encoder,
    fill_params,
    load_checkpoint,
    save_checkpoint,
)
from selfsv.backend import MHFAConfig, MHFAPooling, TDNNConfig, TDNNPooling
from selfsv.encoder import Encoder, EncoderConfig
from selfsv.store import write_arrays
from selfsv.tensor import Tensor


def _small_encoder(seed=0):
    cfg = EncoderConfig(n_layers=2, dim=16, heads=2)
    params = {}
    enc = Encoder(cfg, params, np.random.default_rng(seed))
    return cfg, params, enc


def test_round_trip_arrays_exact(tmp_path):
    cfg, params, _ = _small_encoder()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, "pretrain_iter1", cfg, params, extra={"k": 8})
    ck = load_checkpoint(path)
    assert ck.stage == "pretrain_iter1"
    assert ck.encoder_cfg == cfg
    assert ck.extra == {"k": 8}
    assert set(ck.arrays) == set(params)
    for name, p in params.items():
        assert np.array_equal(ck.arrays[name], p.tensor.data)


def test_forward_bit_identical_after_load(tmp_path):
    cfg, params, enc = _small_encoder(3)
    rng = np.random.default_rng(0)
    wave = rng.standard_normal((2, 16000)).astype(np.float32)
    before = enc.forward_wave(Tensor(wave))[-1].data
    path = tmp_path / "b.ckpt"
    save_checkpoint(path, "pretrain_iter2", cfg, params)
    params2 = {}
    enc2 = build_encoder(load_checkpoint(path), params2)
    after = enc2.forward_wave(Tensor(wave))[-1].data
    assert np.array_equal(before, after)


def test_backend_round_trip_both_kinds(tmp_path):
    for kind, head_cls, head_cfg in (
        ("mhfa", MHFAPooling, MHFAConfig(n_heads=2, key_dim=8, value_dim=16, emb_dim=12)),
        ("tdnn", TDNNPooling, TDNNConfig(channels=8, emb_dim=12, attn_dim=6)),
    ):
        cfg, params, enc = _small_encoder(4)
        head = head_cls(cfg.n_layers, cfg.dim, head_cfg, params, np.random.default_rng(1))
        wave = np.random.default_rng(2).standard_normal((1, 16000)).astype(np.float32)
        want = head.pool(enc.forward_wave(Tensor(wave))).data
        path = tmp_path / f"{kind}.ckpt"
        save_checkpoint(path, "finetuned", cfg, params, extra={
            "backend_kind": kind,
            "backend_cfg": dataclasses.asdict(head_cfg),
        })
        ck = load_checkpoint(path)
        params2 = {}
        enc2 = build_encoder(ck, params2)
        head2 = build_backend(ck, params2)
        got = head2.pool(enc2.forward_wave(Tensor(wave))).data
        assert np.array_equal(want, got), kind


def test_unknown_stage_rejected(tmp_path):
    cfg, params, _ = _small_encoder()
    with pytest.raises(ValueError, match="stage"):
        save_checkpoint(tmp_path / "x.ckpt", "warmup", cfg, params)
    # a tampered file is caught on load too
    write_arrays(tmp_path / "y.ckpt", {"encoder.cnn.0.w": np.zeros((1, 1, 1), np.float32)},
                 {"stage": "bogus", "encoder_cfg": {}})
    with pytest.raises(ValueError, match="stage"):
        load_checkpoint(tmp_path / "y.ckpt")


def test_fill_params_missing_and_mismatched():
    cfg, params, _ = _small_encoder()
    arrays = {n: p.tensor.data.copy() for n, p in params.items()}
    name = next(iter(arrays))
    removed = arrays.pop(name)
    with pytest.raises(KeyError, match="missing"):
        fill_params(params, arrays, "encoder.")
    arrays[name] = removed.reshape(removed.shape + (1,))[..., 0:0]
    with pytest.raises(ValueError, match="shape"):
        fill_params(params, arrays, "encoder.")


def test_stage_vocabulary_is_pipeline_ordered():
    assert STAGES == ("pretrain_iter1", "pretrain_iter2", "finetuned", "lmt")


def test_unknown_backend_kind_rejected(tmp_path):
    cfg, params, _ = _small_encoder()
    save_checkpoint(tmp_path / "z.ckpt", "finetuned", cfg, params,
                    extra={"backend_kind": "avgpool", "backend_cfg": {}})
    ck = load_checkpoint(tmp_path / "z.ckpt")
    with pytest.raises(ValueError, match="backend_kind"):
        build_backend(ck, {})
