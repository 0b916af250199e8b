import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from selfsv.corpus import generate_corpus, write_trials, write_trials_file
from selfsv.encoder import EncoderConfig
from selfsv.training import FinetuneConfig, PretrainConfig, run_finetune, run_pretraining


@pytest.fixture(scope="session")
def tiny_enc_cfg():
    return EncoderConfig(n_layers=2, dim=32, heads=4)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """5 speakers (2 eval) x 3 utterances x 2 s, with a trial list."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_corpus(5, 3, 2.0, 11, root)
    trials = write_trials(manifest, 4, 8, 11)
    write_trials_file(trials, root / "trials.txt")
    return manifest, trials


@pytest.fixture(scope="session")
def tiny_pretrain(tmp_path_factory, tiny_corpus, tiny_enc_cfg):
    """Both clustering iterations at toy scale; returns run_pretraining's dict."""
    manifest, _ = tiny_corpus
    out = tmp_path_factory.mktemp("pretrain")
    cfg = PretrainConfig(steps=50, batch_size=4, k_iter1=8, k_iter2=10, seed=5)
    return run_pretraining(manifest, tiny_enc_cfg, cfg, out)


@pytest.fixture(scope="session")
def tiny_finetuned(tmp_path_factory, tiny_corpus, tiny_pretrain):
    """Learnable MHFA fine-tune on top of the tiny pretraining run."""
    manifest, _ = tiny_corpus
    out = tmp_path_factory.mktemp("finetune")
    cfg = FinetuneConfig(mode="learnable", backend="mhfa", epochs=2, batch_size=4, seed=5)
    return run_finetune(manifest, cfg, out, pretrained=tiny_pretrain["ckpt_iter2"])
