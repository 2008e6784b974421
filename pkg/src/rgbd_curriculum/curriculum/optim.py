"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ContractError, NumericError
from ..numerics.tensor import Tensor


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 5e-2
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    lr_scale: Mapping[str, float] | None = None,
    no_decay=(),
) -> None:
    """One AdamW update, in place on ``params`` and ``state``.

    Parameters absent from ``grads`` are left untouched. ``lr_scale`` gives
    per-parameter learning-rate multipliers (layer-wise decay); names in
    ``no_decay`` skip weight decay.
    """
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        if step_lr == 0.0:
            continue
        theta = p.data
        if state.weight_decay and name not in no_decay:
            theta = theta - step_lr * state.weight_decay * theta
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (theta - step_lr * update).astype(p.data.dtype, copy=False)


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    warmup_start_lr: float = 0.0
    kind: str = "cosine"

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ContractError("warmup steps exceed total steps")


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Linear warmup to ``base_lr``, then half-cosine decay reaching 0 at ``total_steps``."""
    if step < 0 or step > schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.warmup_start_lr + (schedule.base_lr - schedule.warmup_start_lr) * step / w
    span = schedule.total_steps - w
    progress = 1.0 if span == 0 else (step - w) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def no_decay_names(params: Mapping[str, Tensor]) -> set[str]:
    """Biases, norm scales and embedding vectors (all 1-D) are not decayed."""
    return {k for k, p in params.items() if p.ndim <= 1}
