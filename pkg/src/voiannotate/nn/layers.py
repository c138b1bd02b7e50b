"""Parameter registry and the layer set used by the translator and classifier."""

from __future__ import annotations

import numpy as np

from ..geometry import VoiError
from .tensor import (
    Tensor,
    add,
    conv2d,
    conv2d_transpose,
    matmul,
    mul,
    norm_affine,
)


class ParameterStore:
    """Named parameters plus per-parameter optimizer state.

    Names are unique and shapes frozen at creation; non-trainable entries
    (normalization running statistics) ride along for checkpointing but are
    ignored by the optimizer.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self.state: dict[str, dict] = {}

    def create(self, name: str, array, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise VoiError(f"duplicate parameter name '{name}'")
        t = Tensor(np.array(array), requires_grad=trainable)
        self.params[name] = t
        self._trainable[name] = trainable
        return t

    def is_trainable(self, name) -> bool:
        return self._trainable[name]

    def trainable_names(self, prefix: str = ""):
        return [n for n, tr in self._trainable.items() if tr and n.startswith(prefix)]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def load_values(self, values: dict):
        for name, arr in values.items():
            if name not in self.params:
                raise VoiError(f"checkpoint parameter '{name}' unknown to this model")
            p = self.params[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise VoiError(f"shape mismatch for '{name}': {arr.shape} vs {p.data.shape}")
            p.data = np.asarray(arr, dtype=p.data.dtype)

    def num_values(self) -> int:
        return sum(p.data.size for p in self.params.values())


def he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


def xavier_std(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


class Conv2d:
    def __init__(self, store, name, in_ch, out_ch, k=3, stride=1, padding="same", rng=None, gain="relu", bias=True):
        fan_in = in_ch * k * k
        std = he_std(fan_in) if gain == "relu" else xavier_std(fan_in, out_ch * k * k)
        self.w = store.create(f"{name}/w", rng.normal(0.0, std, size=(out_ch, in_ch, k, k)))
        self.b = store.create(f"{name}/b", np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose2d:
    def __init__(self, store, name, in_ch, out_ch, k=3, stride=2, padding=1, rng=None, bias=True):
        fan_in = in_ch * k * k
        self.w = store.create(f"{name}/w", rng.normal(0.0, he_std(fan_in), size=(in_ch, out_ch, k, k)))
        self.b = store.create(f"{name}/b", np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv2d_transpose(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Dense:
    def __init__(self, store, name, in_f, out_f, rng=None, gain="relu"):
        std = he_std(in_f) if gain == "relu" else xavier_std(in_f, out_f)
        self.w = store.create(f"{name}/w", rng.normal(0.0, std, size=(in_f, out_f)))
        self.b = store.create(f"{name}/b", np.zeros(out_f))

    def __call__(self, x):
        return add(matmul(x, self.w), self.b)


class BatchNorm2d:
    """Per-channel normalization over (N,H,W) with exponential moving
    averages (momentum 0.99) for inference."""

    def __init__(self, store, name, ch, eps=1e-5, momentum=0.99):
        self.gamma = store.create(f"{name}/gamma", np.ones((1, ch, 1, 1)))
        self.beta = store.create(f"{name}/beta", np.zeros((1, ch, 1, 1)))
        self.running_mean = store.create(f"{name}/running_mean", np.zeros((1, ch, 1, 1)), trainable=False)
        self.running_var = store.create(f"{name}/running_var", np.ones((1, ch, 1, 1)), trainable=False)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, train=True):
        if train:
            out, mu, var = norm_affine(x, self.gamma, self.beta, (0, 2, 3), self.eps)
            m = self.momentum
            self.running_mean.data = m * self.running_mean.data + (1 - m) * mu
            self.running_var.data = m * self.running_var.data + (1 - m) * var
            return out
        inv = ((self.running_var.data + self.eps) ** -0.5).astype(x.data.dtype)
        scale = self.gamma.data * inv
        shift = self.beta.data - self.running_mean.data * scale
        return add(mul(x, Tensor(scale)), Tensor(shift.astype(x.data.dtype)))


class InstanceNorm2d:
    """Per-instance, per-channel normalization over (H,W); used by the
    image translator where batch statistics would leak across images."""

    def __init__(self, store, name, ch, eps=1e-5, affine=True):
        self.gamma = store.create(f"{name}/gamma", np.ones((1, ch, 1, 1))) if affine else None
        self.beta = store.create(f"{name}/beta", np.zeros((1, ch, 1, 1))) if affine else None
        self.eps = eps

    def __call__(self, x, train=True):
        out, _mu, _var = norm_affine(x, self.gamma, self.beta, (2, 3), self.eps)
        return out
