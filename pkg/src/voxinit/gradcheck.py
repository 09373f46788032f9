"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from voxinit.autodiff import Tape, Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, coords: Sequence[tuple], h: float = 1e-5) -> np.ndarray:
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        orig = t.data[c]
        t.data[c] = orig + h
        fp = float(fn().data)
        t.data[c] = orig - h
        fm = float(fn().data)
        t.data[c] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], n_coords: int = 100,
                    h: float = 1e-5, seed: int = 0) -> float:
    """Max element-wise relative error between tape and finite-difference gradients.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call. Up to
    ``n_coords`` coordinates are sampled over all inputs jointly. The error is
    |a - n| / max(|a|, |n|, 1e-8), with absolute agreement below 1e-9 counted
    as exact.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = fn()
    backward(tape, loss, wrt=inputs)
    rng = np.random.default_rng(seed)
    sizes = np.array([t.size for t in inputs])
    total = int(sizes.sum())
    flat = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for k, t in enumerate(inputs):
        mine = flat[(flat >= offsets[k]) & (flat < offsets[k + 1])] - offsets[k]
        if mine.size == 0:
            continue
        coords = [np.unravel_index(i, t.shape) for i in mine]
        num = numerical_grad(fn, t, coords, h)
        ana = np.array([t.grad[c] for c in coords])
        diff = np.abs(ana - num)
        scale = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        rel = np.where(diff < 1e-9, 0.0, diff / scale)
        worst = max(worst, float(rel.max()))
    return worst
