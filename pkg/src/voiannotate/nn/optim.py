"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import VoiError
from .layers import ParameterStore


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.lr <= 0:
            raise VoiError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise VoiError("betas must lie in (0, 1)")


def adam_step(store: ParameterStore, grads, cfg: AdamConfig, t: int, names=None):
    """One Adam update at step index t >= 1.

    `grads` maps parameter names to gradient arrays; when None the gradients
    accumulated on the tensors themselves are used (missing ones are zero).
    """
    if t < 1:
        raise VoiError("Adam step index starts at 1")
    if names is None:
        names = store.trainable_names()
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name in names:
        p = store.params[name]
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise VoiError(f"gradient shape {g.shape} mismatches parameter '{name}' {p.data.shape}")
        st = store.state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        st["m"] = cfg.beta1 * st["m"] + (1.0 - cfg.beta1) * g
        st["v"] = cfg.beta2 * st["v"] + (1.0 - cfg.beta2) * g * g
        m_hat = st["m"] / bc1
        v_hat = st["v"] / bc2
        p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


class Adam:
    """Stateful wrapper tracking its own step counter over a name subset."""

    def __init__(self, store: ParameterStore, cfg: AdamConfig = AdamConfig(), names=None):
        self.store = store
        self.cfg = cfg
        self.names = list(names) if names is not None else None
        self.t = 0

    def step(self, grads=None):
        self.t += 1
        adam_step(self.store, grads, self.cfg, self.t, names=self.names)
