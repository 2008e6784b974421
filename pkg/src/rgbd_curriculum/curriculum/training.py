"""Stage-1 contrastive and stage-2 masked-reconstruction/denoising training loops."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import model as M
from ..config import CurriculumConfig, StageSchedule, fingerprint
from ..data.dataset import RgbdDataset
from ..data.masking import MaskPattern, sample_masks
from ..data.transforms import (
    augment_batch,
    depth_to_patch_input,
    normalize_depth_array,
    patchify_array,
    per_patch_normalize,
)
from ..errors import CompatibilityError, NumericError, TrainingError
from ..losses import NoiseRecord, add_noise, denoise_loss, depth_recon_loss, info_nce, stage2_loss
from ..numerics import ops
from ..numerics.rng import SeededRng
from ..numerics.tensor import ComputationTape, Tensor, backward
from .checkpoint import Checkpoint
from .optim import OptimizerState, ScheduleConfig, adamw_step, lr_at, no_decay_names

log = logging.getLogger(__name__)

STAGE1_COLUMNS = ["step", "epoch", "lr", "loss_pnce"]
STAGE2_COLUMNS = ["step", "epoch", "lr", "loss_depth", "loss_denoise", "loss_total"]


# -- data preparation --------------------------------------------------------------

@dataclass
class PreparedData:
    """Train-split arrays in the layouts the models consume."""

    rgb: np.ndarray  # (N, H, W, 3) raw, augmented per batch
    depth: np.ndarray  # (N, T, p*p) linearly normalized to [0, 1]
    patch: int

    def __len__(self) -> int:
        return len(self.rgb)


def prepare(dataset: RgbdDataset, split: str | None = "train") -> PreparedData:
    ds = dataset if split is None else dataset.split(split)
    if len(ds) == 0:
        raise TrainingError(f"dataset has no {split!r} samples")
    sc = ds.scene
    dep = normalize_depth_array(ds.depth, sc.depth_min, sc.depth_max)
    dep = patchify_array(dep[..., None], sc.patch)
    return PreparedData(ds.rgb, dep.reshape(*dep.shape[:2], -1).astype(np.float32), sc.patch)


def rgb_patches(rgb: np.ndarray, p: int) -> np.ndarray:
    x = patchify_array(rgb, p)
    return x.reshape(*x.shape[:2], -1)


def depth_input(depth_flat: np.ndarray, p: int) -> np.ndarray:
    """(B, T, p*p) single-channel depth -> (B, T, p*p*3) encoder input."""
    B, T, _ = depth_flat.shape
    return depth_to_patch_input(depth_flat.reshape(B, T, p, p, 1)).reshape(B, T, -1)


def batch_schedule(n: int, batch_size: int, epoch_rng: SeededRng) -> list[np.ndarray]:
    """Shuffled fixed-size batches; the last partial batch is dropped."""
    bs = min(batch_size, n)
    order = epoch_rng.permutation(n)
    return [order[i:i + bs] for i in range(0, n - bs + 1, bs)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return n // min(batch_size, n)


def make_schedule(sched: StageSchedule, epochs: int, per_epoch: int) -> ScheduleConfig:
    total = epochs * per_epoch
    warm = min(int(round(sched.warmup_epochs * per_epoch)), total)
    return ScheduleConfig(sched.base_lr, total, warm, sched.warmup_lr, sched.kind)


# -- forward passes --------------------------------------------------------------------

def stage1_forward(params: M.Params, cfg: CurriculumConfig, rgb: np.ndarray, depth: np.ndarray) -> Tensor:
    z_rgb, z_depth = M.shared_encode(rgb, depth, params, cfg.vit)
    return info_nce(z_rgb, z_depth, cfg.loss.tau, cross_batch=cfg.cross_batch_negatives)


@dataclass
class Stage2Batch:
    rgb: np.ndarray  # (B, T, p*p*3) encoder input
    depth_in: np.ndarray  # (B, T, p*p*3) possibly noisy
    depth_target: np.ndarray  # (B, T, p*p) clean, per-patch normalized
    rgb_target: np.ndarray | None
    rgb_mask: MaskPattern
    depth_mask: MaskPattern
    noise: NoiseRecord | None


def make_stage2_batch(rgb: np.ndarray, depth: np.ndarray, cfg: CurriculumConfig, rng: SeededRng) -> Stage2Batch:
    """Noise the full depth patch set, then draw per-modality masks."""
    B, T, _ = depth.shape
    p = cfg.vit.patch
    noise = None
    noisy = depth
    if cfg.denoise != "none":
        noisy, noise = add_noise(depth, cfg.loss.sigma_max, rng.child("noise"))
    target = per_patch_normalize(depth)[0]
    rgb_target = per_patch_normalize(rgb)[0] if cfg.rgb_recon else None
    return Stage2Batch(
        rgb=rgb,
        depth_in=depth_input(noisy, p),
        depth_target=target,
        rgb_target=rgb_target,
        rgb_mask=sample_masks(B, T, cfg.mask_ratio_rgb, rng.child("mask_rgb")),
        depth_mask=sample_masks(B, T, cfg.mask_ratio_depth, rng.child("mask_depth")),
        noise=noise,
    )


def stage2_forward(params: M.Params, cfg: CurriculumConfig, batch: Stage2Batch, contrastive: bool = False) -> dict:
    """Loss terms for one stage-2 batch; ``contrastive`` adds the joint-variant InfoNCE term."""
    vit = cfg.vit
    rgb_tok = M.embed(batch.rgb, params, vit, "enc_rgb", "rgb")
    dep_tok = M.embed(batch.depth_in, params, vit, "enc_depth", "depth")
    z_rgb = M.encode(rgb_tok, batch.rgb_mask, params, vit, "enc_rgb")
    z_dep = M.encode(dep_tok, batch.depth_mask, params, vit, "enc_depth")
    sigma_vec = None
    if cfg.denoise == "full" and batch.noise is not None:
        sigma_vec = M.sigma_embedding(batch.noise.sigma, params, vit)
    inp = M.assemble_decoder_input(
        z_rgb, z_dep, sigma_vec, batch.rgb_mask, batch.depth_mask, params, vit, rgb_mask_tokens=cfg.rgb_recon
    )
    depth_pred, rgb_pred = M.decode_predict(inp, params, vit)
    terms: dict = {"depth": depth_recon_loss(depth_pred, batch.depth_target, batch.depth_mask)}
    terms["denoise"] = denoise_loss(depth_pred, batch.noise, batch.depth_mask) if batch.noise is not None else None
    terms["rgb"] = depth_recon_loss(rgb_pred, batch.rgb_target, batch.rgb_mask) if cfg.rgb_recon else None
    weights = cfg.loss
    if cfg.denoise != "full":
        from dataclasses import replace

        weights = replace(weights, beta=0.0)
    total = stage2_loss(terms["depth"], terms["denoise"], weights, terms["rgb"])
    if contrastive:
        # positives: RGB-visible positions, seen by both encoders
        ids = batch.rgb_mask.visible_indices()
        z_d_at_rgb = M.run_encoder(ops.gather(dep_tok, ids), params, vit, "enc_depth")
        terms["pnce"] = info_nce(
            ops.l2_normalize(z_rgb), ops.l2_normalize(z_d_at_rgb), cfg.loss.tau, cross_batch=cfg.cross_batch_negatives
        )
        total = total + terms["pnce"]
    terms["total"] = total
    return terms


# -- the loop -------------------------------------------------------------------------------

@dataclass
class StageResult:
    checkpoint: Checkpoint
    params: M.Params
    trace: list[dict] = field(default_factory=list)

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def trace_to_csv(trace: list[dict]) -> str:
    if not trace:
        return ""
    buf = io.StringIO()
    cols = list(trace[0].keys())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in trace:
        w.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def write_trace(trace: list[dict], path) -> None:
    Path(path).write_text(trace_to_csv(trace))


def read_trace(path) -> list[dict]:
    from ..errors import FormatError

    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, csv.Error) as exc:
        raise FormatError(f"cannot read trace {path}: {exc}") from exc
    if not rows or "epoch" not in rows[0]:
        raise FormatError(f"{path}: not a loss trace (needs a header with an 'epoch' column)")
    out = []
    for i, r in enumerate(rows, 2):
        try:
            out.append({k: float(v) for k, v in r.items()})
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{i}: non-numeric trace value") from exc
    return out


def _run(
    params: M.Params,
    cfg: CurriculumConfig,
    data: PreparedData,
    epochs: int,
    sched: StageSchedule,
    rng: SeededRng,
    step_fn: Callable[[np.ndarray, SeededRng], dict],
    columns: list[str],
    state: OptimizerState | None = None,
) -> tuple[list[dict], OptimizerState]:
    opt = cfg.optimizer
    state = state or OptimizerState(betas=opt.betas, weight_decay=opt.weight_decay, eps=opt.eps)
    per_epoch = steps_per_epoch(len(data), cfg.batch_size)
    schedule = make_schedule(sched, epochs, per_epoch)
    skip_decay = no_decay_names(params)
    trace: list[dict] = []
    step = 0
    for epoch in range(epochs):
        erng = rng.child(epoch)
        for b, idx in enumerate(batch_schedule(len(data), cfg.batch_size, erng.child("order"))):
            lr = lr_at(step, schedule)
            try:
                with ComputationTape() as tape:
                    terms = step_fn(idx, erng.child(b))
                grads = backward(terms["total"], tape)
            except NumericError as exc:
                raise TrainingError(f"training diverged at step {step} (epoch {epoch}): {exc}") from exc
            adamw_step(params, grads, state, lr, no_decay=skip_decay)
            row = {"step": step, "epoch": epoch, "lr": lr}
            for c in columns[3:]:
                t = terms.get(c.removeprefix("loss_"))
                row[c] = 0.0 if t is None else t.item()
            trace.append(row)
            step += 1
        if trace:
            log.info("epoch %d done: %s", epoch, {c: trace[-1][c] for c in columns[3:]})
    return trace, state


def _snapshot(params: M.Params) -> dict[str, np.ndarray]:
    return {k: v.data.astype(np.float32) for k, v in params.items()}


def train_stage1(cfg: CurriculumConfig, dataset: RgbdDataset | PreparedData, params: M.Params | None = None) -> StageResult:
    """Shared-encoder patch InfoNCE on unmasked RGB/depth pairs."""
    cfg.validate()
    data = dataset if isinstance(dataset, PreparedData) else prepare(dataset)
    rng = SeededRng(cfg.seed)
    if params is None:
        params = M.init_stage1_params(cfg.vit, rng.child("init"))
    p = cfg.vit.patch

    def step(idx, brng):
        rgb = rgb_patches(augment_batch(data.rgb[idx], brng.child("aug"), cfg.augment), p)
        dep = depth_input(data.depth[idx], p)
        loss = stage1_forward(params, cfg, rgb, dep)
        return {"pnce": loss, "total": loss}

    trace, state = _run(params, cfg, data, cfg.stage1_epochs, cfg.stage1, rng.child("stage1"), step, STAGE1_COLUMNS)
    ckpt = Checkpoint("stage1", fingerprint(cfg), _snapshot(params), state, cfg.seed, len(trace))
    return StageResult(ckpt, params, trace)


def stage2_columns(cfg: CurriculumConfig, contrastive: bool = False) -> list[str]:
    cols = list(STAGE2_COLUMNS)
    if cfg.rgb_recon:
        cols.insert(-1, "loss_rgb")
    if contrastive:
        cols.insert(3, "loss_pnce")
    return cols


def train_stage2(
    cfg: CurriculumConfig,
    dataset: RgbdDataset | PreparedData,
    params: M.Params | None = None,
    contrastive: bool = False,
    epochs: int | None = None,
) -> StageResult:
    """Masked depth reconstruction plus noise prediction with modality-specific encoders.

    ``params`` defaults to a random stage-2 initialization; pass the output of
    :func:`init_stage2_from_stage1` for the curriculum. ``contrastive`` adds the
    InfoNCE term on visible tokens (the joint single-stage variant).
    """
    cfg.validate()
    data = dataset if isinstance(dataset, PreparedData) else prepare(dataset)
    rng = SeededRng(cfg.seed)
    if params is None:
        params = M.init_stage2_params(cfg.vit, rng.child("init"), rgb_head=cfg.rgb_recon)
    if cfg.rgb_recon and "head.rgb.w" not in params:
        params.update({k: v for k, v in M.init_decoder(cfg.vit, rng.child("init").child("decoder"), True).items()
                       if k.startswith("head.rgb")})
    p = cfg.vit.patch

    def step(idx, brng):
        rgb = rgb_patches(augment_batch(data.rgb[idx], brng.child("aug"), cfg.augment), p)
        batch = make_stage2_batch(rgb, data.depth[idx], cfg, brng)
        return stage2_forward(params, cfg, batch, contrastive=contrastive)

    n_epochs = cfg.stage2_epochs if epochs is None else epochs
    trace, state = _run(params, cfg, data, n_epochs, cfg.stage2, rng.child("stage2"), step, stage2_columns(cfg, contrastive))
    ckpt = Checkpoint("stage2", fingerprint(cfg), _snapshot(params), state, cfg.seed, len(trace))
    return StageResult(ckpt, params, trace)


# -- hand-offs ---------------------------------------------------------------------------------

def params_from_checkpoint(ckpt: Checkpoint) -> M.Params:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in ckpt.params.items()}


def _check_encoder(src: dict[str, np.ndarray], prefix: str, vit: M.ViTConfig) -> None:
    expected = {k: v.shape for k, v in M.init_encoder(vit, SeededRng(0), prefix).items()}
    have = {k: v.shape for k, v in src.items() if k.startswith(prefix + ".")}
    if have != expected:
        missing = sorted(set(expected) - set(have))[:3]
        wrong = sorted(k for k in set(expected) & set(have) if expected[k] != have[k])[:3]
        raise CompatibilityError(
            f"checkpoint encoder does not match config (missing {missing}, shape mismatch {wrong})"
        )


def init_stage2_from_stage1(ckpt: Checkpoint, cfg: CurriculumConfig) -> M.Params:
    """Copy the stage-1 shared encoder into both modality encoders; fresh decoder and heads."""
    ckpt.require_stage("stage1")
    _check_encoder(ckpt.params, "enc", cfg.vit)
    shared = params_from_checkpoint(ckpt)
    params = M.copy_encoder(shared, "enc", "enc_rgb")
    params.update(M.copy_encoder(shared, "enc", "enc_depth"))
    params.update(M.init_decoder(cfg.vit, SeededRng(cfg.seed).child("init").child("decoder"), rgb_head=cfg.rgb_recon))
    return params


def stage1_from_stage2(ckpt: Checkpoint, cfg: CurriculumConfig) -> M.Params:
    """Shared encoder initialized from a stage-2 RGB encoder (reverse curriculum)."""
    ckpt.require_stage("stage2")
    _check_encoder(ckpt.params, "enc_rgb", cfg.vit)
    return M.copy_encoder(params_from_checkpoint(ckpt), "enc_rgb", "enc")


def rgb_encoder_prefix(params) -> str:
    """Which encoder serves RGB-only downstream use for a parameter map."""
    return "enc_rgb" if any(k.startswith("enc_rgb.") for k in params) else "enc"
