"""Random per-patch visibility masks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..numerics.rng import SeededRng


def visible_count(num_patches: int, mask_ratio: float) -> int:
    """round(T * (1 - ratio)), half away from zero, and at least 1."""
    if num_patches < 1:
        raise ConfigError("need at least one patch")
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {mask_ratio}")
    x = num_patches * (1.0 - mask_ratio)
    # tolerate representation error such as 10 * (1 - 0.8) = 1.9999999999999996
    k = int(math.floor(round(x, 9) + 0.5))
    return max(1, min(num_patches, k))


@dataclass
class MaskPattern:
    visible: np.ndarray  # bool, shape (T,) or (B, T)
    mask_ratio: float

    @property
    def num_patches(self) -> int:
        return self.visible.shape[-1]

    def visible_indices(self) -> np.ndarray:
        """Ascending visible indices, shape (K,) or (B, K)."""
        return _indices(self.visible)

    def masked_indices(self) -> np.ndarray:
        return _indices(~self.visible)

    @property
    def num_visible(self) -> int:
        return int(self.visible.reshape(-1, self.num_patches)[0].sum())

    @property
    def num_masked(self) -> int:
        return self.num_patches - self.num_visible


def _indices(flags: np.ndarray) -> np.ndarray:
    if flags.ndim == 1:
        return np.flatnonzero(flags)
    counts = flags.sum(axis=1)
    if len(counts) and (counts != counts[0]).any():
        raise ConfigError("batched mask rows must have equal counts")
    return np.nonzero(flags)[1].reshape(flags.shape[0], -1)


def sample_mask(num_patches: int, mask_ratio: float, rng: SeededRng) -> MaskPattern:
    """Uniformly random visible subset of size ``visible_count(T, ratio)``."""
    k = visible_count(num_patches, mask_ratio)
    order = rng.permutation(num_patches)
    visible = np.zeros(num_patches, dtype=bool)
    visible[order[:k]] = True
    return MaskPattern(visible, mask_ratio)


def sample_masks(batch: int, num_patches: int, mask_ratio: float, rng: SeededRng) -> MaskPattern:
    """Independent masks for each of ``batch`` samples, stacked to (B, T)."""
    k = visible_count(num_patches, mask_ratio)
    order = np.argsort(rng.uniform((batch, num_patches)), axis=1, kind="stable")
    visible = np.zeros((batch, num_patches), dtype=bool)
    np.put_along_axis(visible, order[:, :k], True, axis=1)
    return MaskPattern(visible, mask_ratio)


def full_mask(num_patches: int, batch: int | None = None) -> MaskPattern:
    shape = (num_patches,) if batch is None else (batch, num_patches)
    return MaskPattern(np.ones(shape, dtype=bool), 0.0)
