"""Desk-scale masked-prediction speech pretraining and speaker verification.

Pipeline: synthesize a labeled multi-speaker corpus, cluster acoustic
features into discrete targets, pretrain a small speech encoder with a
masked-prediction objective, fine-tune a speaker embedding back-end, and
score verification trials with EER / minDCF.
"""

__version__ = "0.1.0"
