"""Stage objectives: patch InfoNCE, masked depth reconstruction, noise prediction."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data.masking import MaskPattern
from .errors import ConfigError, ContractError
from .numerics import ops
from .numerics.rng import SeededRng
from .numerics.tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.01
    tau: float = 0.07
    sigma_max: float = 0.25

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if min(self.alpha, self.beta, self.sigma_max) < 0:
            raise ConfigError("alpha, beta and sigma_max must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NoiseRecord:
    sigma: np.ndarray  # (B,)
    eps: np.ndarray  # shaped like the depth patches, (B, T, n)

    def added(self) -> np.ndarray:
        return self.sigma.reshape(-1, *([1] * (self.eps.ndim - 1))) * self.eps


def _check_unit_rows(z: Tensor, what: str) -> None:
    norms = np.sqrt((z.data.astype(np.float64) ** 2).sum(axis=-1))
    if np.abs(norms - 1.0).max(initial=0.0) > 1e-3:
        raise ContractError(f"{what} rows must be l2-normalized (max |norm-1| = {np.abs(norms - 1).max():.2e})")


def info_nce(z_rgb: Tensor, z_depth: Tensor, tau: float, cross_batch: bool = False) -> Tensor:
    """Symmetric patch-level InfoNCE.

    Inputs are (N, d) or (B, N, d) with unit rows; position i in one modality is
    the positive for position i in the other. With a batch axis, negatives are
    the other patches of the same image unless ``cross_batch`` pools all
    B*N patches. Returns the mean of the rgb->depth and depth->rgb terms.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    if z_rgb.shape != z_depth.shape:
        raise ContractError(f"embedding shapes differ: {z_rgb.shape} vs {z_depth.shape}")
    _check_unit_rows(z_rgb, "z_rgb")
    _check_unit_rows(z_depth, "z_depth")
    if z_rgb.ndim == 2:
        z_rgb = ops.reshape(z_rgb, (1, *z_rgb.shape))
        z_depth = ops.reshape(z_depth, (1, *z_depth.shape))
    if cross_batch:
        B, N, d = z_rgb.shape
        z_rgb = ops.reshape(z_rgb, (1, B * N, d))
        z_depth = ops.reshape(z_depth, (1, B * N, d))
    B, N, _ = z_rgb.shape
    logits = ops.scalar_mul(ops.matmul(z_rgb, ops.transpose(z_depth)), 1.0 / tau)  # (B, N, N)
    eye = Tensor(np.broadcast_to(np.eye(N), (B, N, N)))
    r2d = ops.sum(ops.mul(ops.log_softmax(logits, axis=-1), eye))
    d2r = ops.sum(ops.mul(ops.log_softmax(logits, axis=-2), eye))
    return ops.scalar_mul(r2d + d2r, -0.5 / (B * N))


def _as_batched_ids(ids: np.ndarray, batch: int) -> np.ndarray:
    return np.broadcast_to(ids, (batch, ids.size)) if ids.ndim == 1 else ids


def _masked_mse(pred: Tensor, target: np.ndarray | Tensor, ids: np.ndarray) -> Tensor:
    if pred.ndim == 2:
        pred = ops.reshape(pred, (1, *pred.shape))
        target = target.reshape(1, *target.shape) if isinstance(target, np.ndarray) else ops.reshape(target, (1, *target.shape))
    if isinstance(target, np.ndarray):
        target = Tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {target.shape}")
    ids = _as_batched_ids(ids, pred.shape[0])
    return ops.mse(ops.gather(pred, ids), ops.gather(target, ids))


def depth_recon_loss(pred: Tensor, target: np.ndarray | Tensor, mask: MaskPattern) -> Tensor:
    """Mean squared error over masked depth patches only.

    ``pred`` and ``target`` are (B, T, p*p) or (T, p*p); ``target`` should
    already be per-patch normalized.
    """
    if mask.num_masked == 0:
        raise ContractError("depth reconstruction needs at least one masked patch")
    return _masked_mse(pred, target, mask.masked_indices())


def denoise_loss(pred: Tensor, noise: NoiseRecord, mask: MaskPattern) -> Tensor:
    """Mean squared error between predictions and the added noise sigma*e on visible patches."""
    if mask.num_visible == 0:
        raise ContractError("denoising needs at least one visible patch")
    target = noise.added()
    if pred.ndim == 2 and target.ndim == 3:
        target = target[0]
    return _masked_mse(pred, target, mask.visible_indices())


def add_noise(depth_patches: np.ndarray, sigma_max: float, rng: SeededRng):
    """Corrupt every patch of each sample with sigma_i * e, sigma_i ~ U[0, sigma_max].

    ``depth_patches`` is (B, ...) in normalized-depth units. Returns the noisy
    array and the :class:`NoiseRecord` needed to rebuild the target.
    """
    B = depth_patches.shape[0]
    sigma = rng.child("sigma").uniform((B,), 0.0, sigma_max) if sigma_max > 0 else np.zeros(B)
    eps = rng.child("eps").normal(depth_patches.shape)
    record = NoiseRecord(sigma=sigma, eps=eps)
    if sigma_max == 0:
        return depth_patches.copy(), record
    return depth_patches + record.added(), record


def stage1_loss(z_rgb: Tensor, z_depth: Tensor, weights: LossWeights, cross_batch: bool = False) -> Tensor:
    return info_nce(z_rgb, z_depth, weights.tau, cross_batch=cross_batch)


def stage2_loss(depth_term: Tensor, denoise_term: Tensor | None, weights: LossWeights, rgb_term: Tensor | None = None) -> Tensor:
    """alpha * depth + beta * denoise (+ alpha * rgb reconstruction when enabled)."""
    total = ops.scalar_mul(depth_term, weights.alpha)
    if denoise_term is not None:
        total = total + ops.scalar_mul(denoise_term, weights.beta)
    if rgb_term is not None:
        total = total + ops.scalar_mul(rgb_term, weights.alpha)
    return total
