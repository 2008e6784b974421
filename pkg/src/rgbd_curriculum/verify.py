"""End-to-end gradient verification of both stage losses on a tiny model in float64."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import model as M
from .config import CurriculumConfig
from .curriculum.training import depth_input, make_stage2_batch, prepare, rgb_patches, stage1_forward, stage2_forward
from .data.dataset import synthetic_dataset
from .data.scenes import SceneConfig
from .numerics.gradcheck import analytic_gradients, finite_difference_check
from .numerics.rng import SeededRng
from .numerics.tensor import Tensor, precision

THRESHOLD = 1e-4


@dataclass
class GradcheckRow:
    group: str
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < THRESHOLD


def tiny_curriculum_config(**overrides) -> CurriculumConfig:
    return replace(CurriculumConfig(vit=M.tiny_config(), mask_ratio_rgb=0.5, mask_ratio_depth=0.5), **overrides)


def run_gradcheck(
    cfg: CurriculumConfig | None = None,
    eps: float = 1e-5,
    batch: int = 1,
    seed: int = 0,
    corrupt: str | None = None,
) -> list[GradcheckRow]:
    """Finite-difference check of the stage-1 and stage-2 losses, one row per stage/parameter.

    Analytic gradients come from the float64 backward pass. The central
    differences they are compared against are evaluated in extended precision
    where the platform has it, so roundoff in f(θ+eps) - f(θ-eps) does not
    swamp elements whose true gradient is ~1e-9.

    ``corrupt`` names a parameter whose analytic gradient is perturbed before
    comparison, to exercise the failure path.
    """
    cfg = cfg or tiny_curriculum_config()
    vit = cfg.vit
    scene = SceneConfig(height=vit.img_height, width=vit.img_width, patch=vit.patch, min_objects=1, max_objects=2)
    with precision("float64"):
        data = prepare(synthetic_dataset(batch, seed, scene), split=None)
        rgb = rgb_patches(data.rgb, vit.patch)
        dep = data.depth
        rng = SeededRng(seed)
        rows: list[GradcheckRow] = []

        p1 = M.init_stage1_params(vit, rng.child("init"))
        f1 = lambda ps: stage1_forward(ps, cfg, rgb, depth_input(dep, vit.patch))
        rows += _check("stage1", f1, p1, eps, corrupt)

        p2 = M.init_stage2_params(vit, rng.child("init"), rgb_head=cfg.rgb_recon)
        b2 = make_stage2_batch(rgb, dep, cfg, rng.child("batch"))
        f2 = lambda ps: stage2_forward(ps, cfg, b2)["total"]
        rows += _check("stage2", f2, p2, eps, corrupt)
    return rows


def _check(stage, f, params, eps, corrupt) -> list[GradcheckRow]:
    with precision("float64"):
        grads = analytic_gradients(f, params)
    if corrupt is not None and corrupt in grads:
        g = grads[corrupt].copy()
        g.reshape(-1)[0] += 1.0 + abs(g.reshape(-1)[0])
        grads[corrupt] = g
    with precision("extended"):
        wide = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in params.items()}
        errs = finite_difference_check(f, wide, eps=eps, grads=grads)
    return [GradcheckRow(f"{stage}/{name}", err) for name, err in errs.items()]


def worst(rows: list[GradcheckRow]) -> GradcheckRow:
    return max(rows, key=lambda r: r.max_rel_error)
