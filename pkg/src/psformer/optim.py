"""Optimizers over the flat parameter vector, plus the cosine schedule.

Adam uses bias correction and decoupled weight decay; SGD uses momentum
0.9 with classic (coupled) weight decay. Both operate in place on the
flat float64 parameter buffer, so every model view updates with them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def apply(self, params, grads):
        if params.shape != grads.shape:
            raise ContractError("parameter and gradient extents disagree")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.step)
        v_hat = self.v / (1.0 - self.beta2 ** self.step)
        params -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps))
        if self.weight_decay:
            params -= self.lr * self.weight_decay * params


@dataclass
class SGDState:
    lr: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    velocity: np.ndarray | None = None

    def apply(self, params, grads):
        if params.shape != grads.shape:
            raise ContractError("parameter and gradient extents disagree")
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        update = grads + self.weight_decay * params if self.weight_decay else grads
        self.velocity *= self.momentum
        self.velocity += update
        params -= self.lr * self.velocity


def make_optimizer(name, lr, weight_decay):
    if name == "adam":
        return AdamState(lr=lr, weight_decay=weight_decay)
    if name == "sgd":
        return SGDState(lr=lr, weight_decay=weight_decay)
    raise ContractError(f"unknown optimizer {name!r}")


def cosine_schedule(epoch, epochs, lr, lr_min):
    """lr_min + (lr - lr_min) * (1 + cos(pi * epoch / (epochs - 1))) / 2."""
    if not 0 <= epoch < epochs:
        raise ContractError(f"epoch {epoch} outside [0, {epochs})")
    if epochs == 1:
        return lr
    return lr_min + (lr - lr_min) * (1.0 + math.cos(math.pi * epoch / (epochs - 1))) / 2.0
