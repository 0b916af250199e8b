"""Named trainable parameters and the Adam optimizer.

Parameters are grouped in plain insertion-ordered dicts keyed by unique
names; frozen (``trainable=False``) parameters are never touched by the
optimizer.  Betas/eps follow common Transformer practice (0.9 / 0.98 /
1e-6); only the learning rate is a tuning knob here.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import GraphError, Tensor


class Parameter:
    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, tensor: Tensor, trainable: bool = True):
        self.name = name
        self.tensor = tensor
        self.tensor.requires_grad = trainable
        self.trainable = trainable

    def set_trainable(self, trainable: bool):
        # requires_grad tracks trainability so frozen subgraphs skip backward
        self.trainable = trainable
        self.tensor.requires_grad = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


def add_param(params: dict, name: str, tensor: Tensor, trainable: bool = True) -> Parameter:
    if name in params:
        raise ValueError(f"duplicate parameter name: {name}")
    p = Parameter(name, tensor, trainable)
    params[name] = p
    return p


def zero_grads(params: dict):
    for p in params.values():
        p.tensor.grad = None


def param_digest(params: dict, prefix: str = "") -> str:
    """SHA-256 over the selected parameters' raw bytes, order-stable."""
    h = hashlib.sha256()
    for name in sorted(params):
        if not name.startswith(prefix):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].tensor.data, dtype="<f4").tobytes())
    return h.hexdigest()


class AdamState:
    """Adam moments plus hyperparameters for one parameter collection."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-6):
        if lr <= 0 or beta1 <= 0 or beta2 <= 0 or eps <= 0:
            raise ValueError("Adam hyperparameters must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = {
            n: np.zeros_like(p.tensor.data) for n, p in params.items() if p.trainable
        }
        self.second_moment = {
            n: np.zeros_like(p.tensor.data) for n, p in params.items() if p.trainable
        }


def adam_step(params: dict, state: AdamState):
    """One bias-corrected Adam update over the trainable parameters."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            raise GraphError(f"no gradient for trainable parameter {name!r}")
        if name not in state.first_moment:
            # parameter unfrozen after state creation
            state.first_moment[name] = np.zeros_like(p.tensor.data)
            state.second_moment[name] = np.zeros_like(p.tensor.data)
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.tensor.data -= update.astype(p.tensor.data.dtype, copy=False)
