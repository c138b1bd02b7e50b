"""Independent brute-force oracles the fast implementations are checked
against. These deliberately avoid the library's analytic code paths."""

from __future__ import annotations

import numpy as np

from voiannotate.geometry import Box, Cylinder, Material, Scene, VOI, vec3


def march_ray(scene, origin, direction, max_t=8.0, step=1e-4, chunk=16384):
    """First containment along the ray by exhaustive point-in-shape marching.

    Returns (t, class_index) or (None, None). Ties at one sample point go to
    the lower primitive index, mirroring the scene's priority order.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    prims = scene.primitives()
    n_steps = int(max_t / step)
    for lo in range(1, n_steps, chunk):
        ts = (lo + np.arange(min(chunk, n_steps - lo))) * step
        pts = origin + ts[:, None] * direction
        inside = np.zeros((len(prims), len(ts)), dtype=bool)
        for pi, (shape, _m, _c) in enumerate(prims):
            inside[pi] = shape.contains(pts)
        any_hit = inside.any(axis=0)
        if any_hit.any():
            j = int(np.argmax(any_hit))
            pi = int(np.argmax(inside[:, j]))
            return float(ts[j]), prims[pi][2]
    return None, None


def random_scene(rng, n_prims=6):
    """Scene of random boxes/cylinders within a ~3 m cube around the origin."""
    vois = []
    background = []
    for i in range(n_prims):
        center = rng.uniform(-1.2, 1.2, size=3)
        if rng.uniform() < 0.5:
            half = rng.uniform(0.05, 0.4, size=3)
            q = rng.standard_normal(4)
            q /= np.linalg.norm(q)
            shape = Box(center, half, q)
        else:
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            shape = Cylinder(center, axis, rng.uniform(0.05, 0.35), rng.uniform(0.1, 0.8))
        if i < max(1, n_prims - 2):
            vois.append(VOI(f"voi{i}", len(vois), shape, Material()))
        else:
            background.append((shape, Material(), 0))
    k = len(vois)
    background = [(s, m, k if j % 2 == 0 else k + 1) for j, (s, m, _c) in enumerate(background)]
    return Scene(vois=vois, background=background)


def random_rays(rng, count):
    """Rays from a shell around the scene aimed loosely at the middle."""
    origins = rng.uniform(-1.0, 1.0, size=(count, 3))
    origins *= (2.5 / np.maximum(1e-9, np.linalg.norm(origins, axis=1)))[:, None]
    targets = rng.uniform(-0.8, 0.8, size=(count, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    return origins, dirs


def brute_force_weighted_metrics(counts):
    """Explicit-loop weighted precision/recall/F1 for a confusion matrix."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.shape[0]
    total = counts.sum()
    wp = wr = wf = 0.0
    for i in range(n):
        tp = counts[i, i]
        support = counts[i, :].sum()
        predicted = counts[:, i].sum()
        precision = tp / predicted if predicted > 0 else 0.0
        recall = tp / support if support > 0 else 0.0
        f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) > 0 else 0.0
        weight = support / total
        wp += weight * precision
        wr += weight * recall
        wf += weight * f1
    return wp, wr, wf


def brute_force_frames(start_ms, end_ms, fps, n_frames):
    """Inclusive filter over every frame timestamp, the slow way."""
    return [i for i in range(n_frames) if start_ms <= 1000.0 * i / fps <= end_ms]
