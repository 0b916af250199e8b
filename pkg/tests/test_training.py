"""Training loops: masking semantics, schedules, modes, checkpoint stages."""

import math

import numpy as np
import pytest

import selfsv.training as training
from selfsv.checkpoint import load_checkpoint
from selfsv.encoder import EncoderConfig, MaskConfig, apply_mask, frame_count
from selfsv.optim import AdamState
from selfsv.targets import disagreement, load_labels
from selfsv.training import (
    FinetuneConfig,
    LMTConfig,
    PretrainConfig,
    PretrainModel,
    large_margin_tune,
    pretrain_lr,
    pretrain_step,
    run_finetune,
    run_pretrain_iteration,
)

ENC = EncoderConfig(n_layers=2, dim=32, heads=4)


def _model(k=8, seed=0):
    params = {}
    return PretrainModel(ENC, k, params, np.random.default_rng(seed)), params


def _batch(k=8, b=2, n=8000, seed=1):
    rng = np.random.default_rng(seed)
    waves = rng.standard_normal((b, n)).astype(np.float32) * 0.1
    labels = rng.integers(0, k, size=(b, frame_count(n, ENC)))
    return waves, labels


# -- learning-rate schedule --------------------------------------------------

def test_lr_warms_up_then_decays_linearly():
    cfg = PretrainConfig(steps=100, warmup_frac=0.08, lr_peak=5e-4)
    lrs = [pretrain_lr(s, cfg) for s in range(100)]
    warm = 8
    assert lrs[warm - 1] == pytest.approx(cfg.lr_peak)
    assert all(b > a for a, b in zip(lrs[: warm - 1], lrs[1:warm]))
    assert all(b < a for a, b in zip(lrs[warm:], lrs[warm + 1 :]))
    assert lrs[-1] > 0.0
    # linear in both segments
    assert lrs[3] == pytest.approx(cfg.lr_peak * 4 / 8)
    mid = warm + (100 - warm) // 2
    assert lrs[mid] == pytest.approx(cfg.lr_peak * (1 - (mid - warm) / 92))


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(steps=0)
    with pytest.raises(ValueError):
        PretrainConfig(warmup_frac=1.5)
    with pytest.raises(ValueError):
        FinetuneConfig(mode="finetune-everything")
    with pytest.raises(ValueError):
        FinetuneConfig(backend="gru")
    with pytest.raises(ValueError):
        LMTConfig(epochs=0)


# -- pretrain loss semantics --------------------------------------------------

def test_uniform_logits_cost_ln_k():
    model, params = _model(k=8)
    params["pretrain.proj.w"].tensor.data[:] = 0.0
    params["pretrain.proj.b"].tensor.data[:] = 0.0
    waves, labels = _batch(k=8)
    loss, n_masked = model.loss(waves, labels, MaskConfig(), np.random.default_rng(3))
    assert n_masked > 0
    assert float(loss.data) == pytest.approx(math.log(8), abs=1e-5)


def test_loss_ignores_labels_at_unmasked_frames():
    model, _ = _model()
    waves, labels = _batch()
    mask_cfg = MaskConfig()
    loss_a, _ = model.loss(waves, labels, mask_cfg, np.random.default_rng(9))
    # recover the mask with an identically seeded generator, then rewrite
    # every unmasked label
    h0 = model.encoder.cnn_encode(training.Tensor(waves))
    _, idx = apply_mask(h0, mask_cfg, np.random.default_rng(9),
                        model._p("pretrain.mask_emb"))
    tampered = labels.copy()
    for bi, masked in enumerate(idx):
        keep = np.zeros(labels.shape[1], dtype=bool)
        keep[masked] = True
        tampered[bi, ~keep] = (tampered[bi, ~keep] + 1) % model.k
    loss_b, _ = model.loss(waves, tampered, mask_cfg, np.random.default_rng(9))
    assert float(loss_a.data) == float(loss_b.data)


def test_loss_ignores_waveform_under_masked_frames():
    # masked frames are replaced by the mask embedding before the stack,
    # so the audio beneath them cannot reach the loss
    model, _ = _model()
    waves, labels = _batch()
    mask_cfg = MaskConfig(mask_prob=0.15, span_len=4)
    h0 = model.encoder.cnn_encode(training.Tensor(waves))
    _, idx = apply_mask(h0, mask_cfg, np.random.default_rng(21),
                        model._p("pretrain.mask_emb"))
    assert sum(len(i) for i in idx) > 0
    stride = ENC.total_stride
    tampered = waves.copy()
    for bi, masked in enumerate(idx):
        for f in masked:
            tampered[bi, f * stride : (f + 1) * stride] = 17.0
    loss_a, _ = model.loss(waves, labels, mask_cfg, np.random.default_rng(21))
    loss_b, _ = model.loss(tampered, labels, mask_cfg, np.random.default_rng(21))
    assert float(loss_a.data) == float(loss_b.data)


def test_empty_mask_skips_batch():
    model, params = _model()
    waves, labels = _batch()
    state = AdamState(params, lr=1e-3)
    before = params["pretrain.proj.w"].tensor.data.copy()
    out = pretrain_step(model, waves, labels, MaskConfig(mask_prob=0.0, span_len=1),
                        state, np.random.default_rng(0))
    assert out is None
    assert np.array_equal(before, params["pretrain.proj.w"].tensor.data)


def test_pretrain_step_reduces_loss_on_repeated_batch():
    model, params = _model(k=4, seed=2)
    waves, labels = _batch(k=4, b=2, n=8000, seed=3)
    state = AdamState(params, lr=3e-3)
    first = None
    last = None
    for i in range(30):
        val = pretrain_step(model, waves, labels, MaskConfig(mask_prob=0.2, span_len=3),
                            state, np.random.default_rng(5))  # same mask each step
        assert val is not None
        first = val if first is None else first
        last = val
    assert last < first


# -- pretrain iterations -------------------------------------------------------

def test_iteration_artifacts_and_determinism(tiny_corpus, tiny_enc_cfg, tmp_path):
    manifest, _ = tiny_corpus
    from selfsv.targets import build_targets_iter1
    _, labels = build_targets_iter1(manifest, k=8, seed=3, encoder_cfg=tiny_enc_cfg)
    cfg = PretrainConfig(steps=6, batch_size=4, k_iter1=8, seed=9)
    ck_a, csv_a, losses_a, skipped_a = run_pretrain_iteration(
        manifest, labels, tiny_enc_cfg, cfg, 1, tmp_path / "a")
    ck_b, _, losses_b, _ = run_pretrain_iteration(
        manifest, labels, tiny_enc_cfg, cfg, 1, tmp_path / "b")
    assert losses_a == losses_b
    assert ck_a.read_bytes() == ck_b.read_bytes()
    assert skipped_a == 0
    rows = csv_a.read_text().splitlines()
    assert rows[0] == "step,loss"
    assert len(rows) == 1 + 6
    assert load_checkpoint(ck_a).stage == "pretrain_iter1"


def test_all_batches_skipped_still_saves(tiny_corpus, tiny_enc_cfg, tmp_path):
    manifest, _ = tiny_corpus
    from selfsv.targets import build_targets_iter1
    _, labels = build_targets_iter1(manifest, k=8, seed=3, encoder_cfg=tiny_enc_cfg)
    cfg = PretrainConfig(steps=3, batch_size=2, seed=1,
                         mask=MaskConfig(mask_prob=0.0, span_len=1))
    with pytest.warns(UserWarning, match="skipped"):
        ck, csv_path, losses, skipped = run_pretrain_iteration(
            manifest, labels, tiny_enc_cfg, cfg, 1, tmp_path)
    assert skipped == 3 and losses == []
    assert csv_path.read_text() == "step,loss\n"
    assert ck.exists()


def test_run_pretraining_products(tiny_pretrain):
    ck2 = load_checkpoint(tiny_pretrain["ckpt_iter2"])
    assert ck2.stage == "pretrain_iter2"
    assert ck2.extra["feature_kind"].startswith("latent:")
    # iteration 2 trains against a real re-clustering, not a copy
    l1 = load_labels(tiny_pretrain["labels_iter1"])
    l2 = load_labels(tiny_pretrain["labels_iter2"])
    assert disagreement(l1, l2) > 0.0
    assert tiny_pretrain["losses_iter2"][-1] < math.log(l2.k)


def test_warm_start_reuses_encoder(tiny_corpus, tiny_enc_cfg, tiny_pretrain, tmp_path):
    manifest, _ = tiny_corpus
    ck1 = load_checkpoint(tiny_pretrain["ckpt_iter1"])
    from selfsv.targets import build_targets_iter2
    _, labels = build_targets_iter2(manifest, ck1, k=10, seed=4)
    cfg = PretrainConfig(steps=1, batch_size=2, seed=9)
    ck_path, _, _, _ = run_pretrain_iteration(
        manifest, labels, tiny_enc_cfg, cfg, 2, tmp_path, init_arrays=ck1.arrays)
    warm = load_checkpoint(ck_path)
    # after a single tiny step the encoder must sit near the donor weights
    name = "encoder.cnn.0.w"
    assert np.allclose(warm.arrays[name], ck1.arrays[name], atol=5e-3)


# -- fine-tuning ---------------------------------------------------------------

def test_mode_checkpoint_pairing_is_enforced(tiny_corpus, tiny_pretrain, tmp_path):
    manifest, _ = tiny_corpus
    with pytest.raises(ValueError, match="random_init"):
        run_finetune(manifest, FinetuneConfig(mode="random_init", epochs=1),
                     tmp_path, pretrained=tiny_pretrain["ckpt_iter2"])
    for mode in ("frozen", "learnable"):
        with pytest.raises(ValueError, match="requires"):
            run_finetune(manifest, FinetuneConfig(mode=mode, epochs=1), tmp_path)


def test_finetune_rejects_non_pretrain_checkpoint(tiny_corpus, tiny_finetuned, tmp_path):
    manifest, _ = tiny_corpus
    with pytest.raises(ValueError, match="pretraining checkpoint"):
        run_finetune(manifest, FinetuneConfig(mode="learnable", epochs=1),
                     tmp_path, pretrained=tiny_finetuned["ckpt"])


def test_frozen_keeps_encoder_digest(tiny_corpus, tiny_pretrain, tmp_path):
    manifest, _ = tiny_corpus
    cfg = FinetuneConfig(mode="frozen", epochs=1, batch_size=4, seed=2)
    res = run_finetune(manifest, cfg, tmp_path, pretrained=tiny_pretrain["ckpt_iter2"])
    assert res["encoder_digest_before"] == res["encoder_digest_after"]
    # and the stored weights equal the donor's encoder weights bit for bit
    donor = load_checkpoint(tiny_pretrain["ckpt_iter2"])
    tuned = load_checkpoint(res["ckpt"])
    for name, arr in donor.arrays.items():
        if name.startswith("encoder."):
            assert np.array_equal(arr, tuned.arrays[name]), name


def test_learnable_moves_encoder_digest(tiny_finetuned):
    assert tiny_finetuned["encoder_digest_before"] != tiny_finetuned["encoder_digest_after"]


def test_finetuned_checkpoint_metadata(tiny_finetuned):
    ck = load_checkpoint(tiny_finetuned["ckpt"])
    assert ck.stage == "finetuned"
    assert ck.extra["backend_kind"] == "mhfa"
    assert ck.extra["mode"] == "learnable"
    assert ck.extra["n_classes"] == len(ck.extra["speakers"])
    assert "classifier.w" in ck.arrays
    rows = tiny_finetuned["loss_csv"].read_text().splitlines()
    assert rows[0] == "step,loss"
    assert len(rows) > 1


def test_epoch_lr_follows_exact_decay(tiny_corpus, tiny_pretrain, tmp_path, monkeypatch):
    manifest, _ = tiny_corpus
    seen = []
    real = training.adam_step

    def spy(params, state):
        seen.append(state.lr)
        return real(params, state)

    monkeypatch.setattr(training, "adam_step", spy)
    cfg = FinetuneConfig(mode="frozen", epochs=3, batch_size=16, lr=5e-4, seed=0)
    run_finetune(manifest, cfg, tmp_path, pretrained=tiny_pretrain["ckpt_iter2"])
    assert sorted(set(seen), reverse=True) == [5e-4 * 0.9**e for e in range(3)]


def test_random_init_trains_without_checkpoint(tiny_corpus, tmp_path):
    manifest, _ = tiny_corpus
    cfg = FinetuneConfig(mode="random_init", backend="tdnn", epochs=1, batch_size=4, seed=7)
    res = run_finetune(manifest, cfg, tmp_path, enc_cfg=ENC)
    ck = load_checkpoint(res["ckpt"])
    assert ck.extra["backend_kind"] == "tdnn"
    assert 0.0 <= res["train_accuracy"] <= 1.0


# -- large-margin tuning ---------------------------------------------------------

def test_lmt_requires_finetuned_stage(tiny_corpus, tiny_pretrain, tmp_path):
    manifest, _ = tiny_corpus
    with pytest.raises(ValueError, match="finetuned"):
        large_margin_tune(tiny_pretrain["ckpt_iter2"], manifest,
                          LMTConfig(epochs=1), tmp_path)


def test_lmt_margin_must_not_shrink(tiny_corpus, tiny_finetuned, tmp_path):
    manifest, _ = tiny_corpus
    with pytest.raises(ValueError, match="margin"):
        large_margin_tune(tiny_finetuned["ckpt"], manifest,
                          LMTConfig(margin=0.1, epochs=1), tmp_path)


def test_lmt_saves_lmt_stage_with_long_crops(tiny_corpus, tiny_finetuned, tmp_path):
    manifest, _ = tiny_corpus
    cfg = LMTConfig(margin=0.5, crop_seconds=2.5, epochs=1, seed=3)
    res = large_margin_tune(tiny_finetuned["ckpt"], manifest, cfg, tmp_path)
    ck = load_checkpoint(res["ckpt"])
    assert ck.stage == "lmt"
    assert ck.extra["margin"] == 0.5
    donor = load_checkpoint(tiny_finetuned["ckpt"])
    assert ck.extra["epochs"] == donor.extra["epochs"] + 1
