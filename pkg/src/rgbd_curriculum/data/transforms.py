"""Augmentation, depth normalization, patchify and per-patch target normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import convolve1d

from ..errors import ConfigError
from ..numerics.rng import SeededRng
from .scenes import RgbdSample, SceneConfig


@dataclass(frozen=True)
class AugmentConfig:
    blur_sigma: tuple[float, float] = (0.1, 1.5)
    blur_prob: float = 0.5
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(rgb: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return rgb
    k = gaussian_kernel(sigma)
    out = convolve1d(rgb.astype(np.float64), k, axis=0, mode="reflect")
    return convolve1d(out, k, axis=1, mode="reflect")


def _gray(rgb: np.ndarray) -> np.ndarray:
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def color_jitter(rgb: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Apply multiplicative brightness, contrast and saturation factors in that order."""
    out = rgb * brightness if brightness != 1.0 else rgb
    if contrast != 1.0:
        m = _gray(out).mean()
        out = (out - m) * contrast + m
    if saturation != 1.0:
        g = _gray(out)[..., None]
        out = (out - g) * saturation + g
    return out


def augment(sample: RgbdSample, rng: SeededRng, cfg: AugmentConfig = AugmentConfig()) -> RgbdSample:
    """Blur and color-jitter the RGB channels; depth and labels pass through untouched."""
    rgb = sample.rgb.astype(np.float64)
    lo, hi = cfg.blur_sigma
    apply_blur = rng.uniform() < cfg.blur_prob
    sigma = rng.uniform(low=lo, high=hi) if hi > 0 else 0.0
    if apply_blur and sigma > 0:
        rgb = gaussian_blur(rgb, sigma)
    factors = [1.0 + rng.uniform(low=-s, high=s) if s > 0 else 1.0
               for s in (cfg.brightness, cfg.contrast, cfg.saturation)]
    rgb = np.clip(color_jitter(rgb, *factors), 0.0, 1.0)
    return replace(sample, rgb=rgb.astype(sample.rgb.dtype), meta=dict(sample.meta))


def augment_batch(rgb: np.ndarray, rng: SeededRng, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Per-image augmentation of an (N, H, W, 3) batch of RGB arrays."""
    out = np.empty_like(rgb)
    for i, img in enumerate(rgb):
        r = rng.child(i)
        s = RgbdSample(rgb=img, depth=np.zeros(img.shape[:2], dtype=img.dtype))
        out[i] = augment(s, r, cfg).rgb
    return out


def normalize_depth_array(depth: np.ndarray, depth_min: float, depth_max: float) -> np.ndarray:
    return (depth - depth_min) / (depth_max - depth_min)


def normalize_depth(sample: RgbdSample, cfg: SceneConfig = SceneConfig()) -> RgbdSample:
    """Map metric depth linearly from [d_min, d_max] onto [0, 1]."""
    depth = normalize_depth_array(sample.depth, cfg.depth_min, cfg.depth_max).astype(sample.depth.dtype)
    return replace(sample, depth=depth, meta={**sample.meta, "depth_normalized": True})


@dataclass
class PatchTensor:
    patches: np.ndarray  # (T, p, p, c); extra leading batch axes are allowed
    grid: tuple[int, int]
    modality: str = "rgb"

    @property
    def count(self) -> int:
        return self.grid[0] * self.grid[1]

    def flat(self) -> np.ndarray:
        """Patches flattened to (..., T, p*p*c)."""
        return self.patches.reshape(*self.patches.shape[:-3], -1)


def patchify_array(image: np.ndarray, p: int) -> np.ndarray:
    """(..., H, W, c) -> (..., T, p, p, c) in row-major grid order."""
    *lead, H, W, c = image.shape
    if p <= 0 or H % p or W % p:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = image.reshape(*lead, gh, p, gw, p, c)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)  # (..., gh, gw, p, p, c)
    return x.reshape(*lead, gh * gw, p, p, c)


def unpatchify_array(patches: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    *lead, T, p, q, c = patches.shape
    gh, gw = grid
    if T != gh * gw:
        raise ConfigError(f"{T} patches do not fill a {gh}x{gw} grid")
    x = patches.reshape(*lead, gh, gw, p, q, c)
    n = len(lead)
    x = np.moveaxis(x, n + 1, n + 2)  # (..., gh, p, gw, q, c)
    return x.reshape(*lead, gh * p, gw * q, c)


def patchify(image: np.ndarray, p: int, modality: str = "rgb") -> PatchTensor:
    if image.ndim == 2:
        image = image[..., None]
    H, W = image.shape[-3], image.shape[-2]
    return PatchTensor(patchify_array(image, p), (H // p if p else 0, W // p if p else 0), modality)


def unpatchify(pt: PatchTensor) -> np.ndarray:
    return unpatchify_array(pt.patches, pt.grid)


def depth_to_patch_input(depth_patches: np.ndarray) -> np.ndarray:
    """Replicate single-channel depth patches (..., T, p, p, 1) to three channels."""
    return np.repeat(depth_patches, 3, axis=-1)


def per_patch_normalize(patches: np.ndarray, eps: float = 1e-6):
    """Zero-mean, unit (population) std per patch over the last axis.

    ``patches`` is (..., T, n). Returns ``(normalized, mean, std)`` with std
    floored at ``eps`` so constant patches map to zeros.
    """
    mean = patches.mean(axis=-1, keepdims=True)
    std = np.maximum(patches.std(axis=-1, keepdims=True), eps)
    return (patches - mean) / std, mean, std


def per_patch_denormalize(normalized: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return normalized * std + mean
