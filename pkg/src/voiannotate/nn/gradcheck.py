"""Finite-difference verification of recorded gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, mul, tsum


def _rel_err(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _sample_coords(arr, max_coords, rng):
    flat = arr.size
    if flat <= max_coords:
        return np.arange(flat)
    return rng.choice(flat, size=max_coords, replace=False)


def grad_check(fn, input_arrays, *, dtype=np.float64, h=None, max_coords=64, seed=0):
    """Max relative error between recorded and central-difference gradients.

    `fn` maps a list of Tensors to a Tensor of any shape; a fixed random
    projection turns the output into the scalar being differentiated. The
    step h defaults to 1e-6 at 64-bit and 1e-3 at 32-bit. Error at each
    sampled coordinate is |a - b| / max(1, |a|, |b|).
    """
    dtype = np.dtype(dtype)
    if h is None:
        h = 1e-6 if dtype == np.float64 else 1e-3
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=dtype) for a in input_arrays]
    xs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(xs)
    u = Tensor(rng.standard_normal(out.data.shape).astype(dtype))

    def scalar(tensors):
        return float(tsum(mul(fn(tensors), u)).data)

    loss = tsum(mul(out, u))
    loss.backward()

    worst = 0.0
    for i, x in enumerate(xs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        for flat_idx in _sample_coords(arrays[i], max_coords, rng):
            idx = np.unravel_index(flat_idx, arrays[i].shape)
            bumped = [Tensor(a.copy()) for a in arrays]
            bumped[i].data[idx] += h
            up = scalar(bumped)
            bumped[i].data[idx] -= 2 * h
            down = scalar(bumped)
            fd = (up - down) / (2 * h)
            worst = max(worst, _rel_err(float(analytic[idx]), fd))
    return worst


def grad_check_params(loss_fn, store, names=None, *, h=1e-6, max_coords=8, seed=0):
    """Finite-difference check of a model loss against store parameters.

    `loss_fn()` must rebuild the loss from the store's current values; the
    check perturbs parameter entries in place, so run it on a throwaway model.
    """
    rng = np.random.default_rng(seed)
    if names is None:
        names = store.trainable_names()
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {n: (store.params[n].grad.copy() if store.params[n].grad is not None else np.zeros_like(store.params[n].data)) for n in names}

    worst = 0.0
    for name in names:
        p = store.params[name]
        for flat_idx in _sample_coords(p.data, max_coords, rng):
            idx = np.unravel_index(flat_idx, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = float(loss_fn().data)
            p.data[idx] = orig - h
            down = float(loss_fn().data)
            p.data[idx] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, _rel_err(float(analytic[name][idx]), fd))
    return worst
