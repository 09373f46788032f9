"""Masked & shuffled views of a volume for self-supervised training.

A volume ``x`` of shape [C, H, W, D] is cut along depth into B equal slabs,
the slabs are permuted, and a random subset of cubic mask patches is then
overwritten with a fill value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TransformConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PermutationRecord:
    """``order[f]`` is the original sub-volume index placed at slot ``f``."""

    B: int
    order: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        order = tuple(int(o) for o in self.order)
        object.__setattr__(self, "order", order)
        if self.B < 1 or len(order) != self.B or sorted(order) != list(range(self.B)):
            raise TransformConfigError(f"order {order} is not a permutation of range({self.B})")

    @classmethod
    def identity(cls, B: int) -> "PermutationRecord":
        return cls(B, tuple(range(B)))

    def one_hot(self) -> np.ndarray:
        """[B classes, B slots] matrix with entry (k, f) = 1 iff slot f holds sub-volume k."""
        m = np.zeros((self.B, self.B))
        m[list(self.order), np.arange(self.B)] = 1.0
        return m

    def inverse(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.argsort(self.order))


@dataclass(frozen=True)
class MaskRecord:
    ratio: float
    patch: tuple[int, int, int]
    grid: np.ndarray  # bool over the patch grid, True = masked
    fill_value: float = 0.0

    @property
    def n_masked(self) -> int:
        return int(self.grid.sum())

    def voxel_mask(self) -> np.ndarray:
        """Expand the patch grid to a boolean [H, W, D] voxel mask."""
        p = self.patch
        return self.grid.repeat(p[0], 0).repeat(p[1], 1).repeat(p[2], 2)


@dataclass(frozen=True)
class TransformConfig:
    B: int = 4
    mask_ratio: float = 0.40
    mask_patch: tuple[int, int, int] = (4, 4, 4)
    fill_value: float = 0.0
    depth_axis: int = 3


def _patch3(p) -> tuple[int, int, int]:
    if isinstance(p, (int, np.integer)):
        return (int(p),) * 3
    p = tuple(int(v) for v in p)
    if len(p) != 3:
        raise TransformConfigError(f"mask patch must have 3 sizes, got {p}")
    return p


def masked_patch_count(ratio: float, total: int) -> int:
    """round-half-up(ratio * total)."""
    return int(math.floor(ratio * total + 0.5))


def depth_last(x: np.ndarray, depth_axis: int = 3) -> np.ndarray:
    """Put the depth axis last so slabs are cut along the final axis."""
    if x.ndim != 4:
        raise TransformConfigError(f"expected a [C,H,W,D] volume, got shape {x.shape}")
    return np.moveaxis(x, depth_axis, 3) if depth_axis % 4 != 3 else x


def partition_depth(x: np.ndarray, B: int) -> list[np.ndarray]:
    D = x.shape[-1]
    if B < 1 or D % B:
        raise TransformConfigError(f"depth D={D} is not divisible into B={B} equal sub-volumes")
    t = D // B
    return [x[..., j * t:(j + 1) * t] for j in range(B)]


def shuffle_subvolumes(x: np.ndarray, perm: PermutationRecord) -> np.ndarray:
    slabs = partition_depth(x, perm.B)
    return np.concatenate([slabs[o] for o in perm.order], axis=-1)


def unshuffle(x_shuffled: np.ndarray, perm: PermutationRecord) -> np.ndarray:
    slabs = partition_depth(x_shuffled, perm.B)
    return np.concatenate([slabs[f] for f in perm.inverse()], axis=-1)


def random_permutation(B: int, rng: np.random.Generator, seed: int | None = None) -> PermutationRecord:
    return PermutationRecord(B, tuple(int(i) for i in rng.permutation(B)), seed)


def sample_mask(spatial: tuple[int, int, int], ratio: float, patch, rng: np.random.Generator,
                fill_value: float = 0.0) -> MaskRecord:
    if not 0.0 <= ratio <= 1.0:
        raise TransformConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    patch = _patch3(patch)
    if any(n % p for n, p in zip(spatial, patch)):
        raise TransformConfigError(f"mask patch {patch} does not divide volume {spatial}")
    grid_shape = tuple(n // p for n, p in zip(spatial, patch))
    total = math.prod(grid_shape)
    chosen = rng.choice(total, size=masked_patch_count(ratio, total), replace=False)
    grid = np.zeros(total, dtype=bool)
    grid[chosen] = True
    return MaskRecord(float(ratio), patch, grid.reshape(grid_shape), float(fill_value))


def apply_mask(x: np.ndarray, mask: MaskRecord) -> np.ndarray:
    """Fill every masked patch, in all channels; other voxels are copied unchanged."""
    vox = mask.voxel_mask()
    if vox.shape != x.shape[1:]:
        raise TransformConfigError(f"mask covers {vox.shape}, volume is {x.shape[1:]}")
    out = x.copy()
    out[:, vox] = mask.fill_value
    return out


def make_masked_shuffled(x: np.ndarray, cfg: TransformConfig, rng: np.random.Generator | int):
    """Return ``(X'', perm, mask, X')``; ``X'`` is the reconstruction target."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    x = depth_last(x, cfg.depth_axis)
    perm = random_permutation(cfg.B, rng)
    shuffled = shuffle_subvolumes(x, perm)
    mask = sample_mask(x.shape[1:], cfg.mask_ratio, cfg.mask_patch, rng, cfg.fill_value)
    return apply_mask(shuffled, mask), perm, mask, shuffled
