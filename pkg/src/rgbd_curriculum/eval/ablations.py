"""Experiment runners: pipelines per ordering variant, ablation tables and the convergence report."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..config import CurriculumConfig, fingerprint
from ..curriculum.checkpoint import Checkpoint
from ..curriculum.training import (
    PreparedData,
    init_stage2_from_stage1,
    prepare,
    stage1_from_stage2,
    train_stage1,
    train_stage2,
)
from ..data.dataset import RgbdDataset
from ..data.masking import visible_count
from ..errors import ContractError
from ..losses import LossWeights
from .probe import DEFAULT_FRACTIONS, ProbeConfig, finetune_probe, random_checkpoint

log = logging.getLogger(__name__)

# (rgb, depth) masking ratios, in table order
REFERENCE_MASK_GRID = ((0.2, 0.2), (0.2, 0.5), (0.2, 0.8), (0.5, 0.2), (0.5, 0.5), (0.8, 0.2), (0.8, 0.8))

ORDERING_CELLS = {"curriculum": "CL -> MIM+D", "reverse": "MIM+D -> CL", "joint": "CL + MIM+D"}
DENOISE_CELLS = {"none": "w/out noise", "noise-only": "noise only", "full": "full"}
LOSS_CELLS = {"mim-denoise": "MIM + denoising", "rgb-recon": "depth + RGB reconstruction", "full": "full"}


# -- pipelines -------------------------------------------------------------------------

@dataclass
class PipelineResult:
    checkpoint: Checkpoint
    stage1_trace: list[dict] = field(default_factory=list)
    stage2_trace: list[dict] = field(default_factory=list)


def _stage1_view(cfg: CurriculumConfig) -> CurriculumConfig:
    """The config with every field stage 1 ignores reset, so equal stage-1 runs share a key."""
    base = CurriculumConfig()
    return replace(
        cfg,
        loss=LossWeights(tau=cfg.loss.tau),
        stage2=base.stage2,
        stage2_epochs=0,
        mask_ratio_rgb=base.mask_ratio_rgb,
        mask_ratio_depth=base.mask_ratio_depth,
        ordering=base.ordering,
        denoise=base.denoise,
        rgb_recon=False,
    )


class PipelineCache:
    """Memo of finished runs keyed by config fingerprint; stage-1 runs are shared across stage-2 variants."""

    def __init__(self):
        self.stage1: dict[bytes, object] = {}
        self.runs: dict[bytes, PipelineResult] = {}

    def get_stage1(self, cfg: CurriculumConfig, data: PreparedData):
        key = fingerprint(_stage1_view(cfg))
        if key not in self.stage1:
            self.stage1[key] = train_stage1(cfg, data)
        return self.stage1[key]


def run_pipeline(cfg: CurriculumConfig, dataset, cache: PipelineCache | None = None) -> PipelineResult:
    """Train one full pre-training pipeline for ``cfg.ordering``; returns the checkpoint used downstream."""
    cfg.validate()
    cache = cache if cache is not None else PipelineCache()
    key = fingerprint(cfg)
    if key in cache.runs:
        return cache.runs[key]
    data = dataset if isinstance(dataset, PreparedData) else prepare(dataset)
    if cfg.ordering == "curriculum":
        s1 = cache.get_stage1(cfg, data)
        s2 = train_stage2(cfg, data, init_stage2_from_stage1(s1.checkpoint, cfg))
        result = PipelineResult(s2.checkpoint, s1.trace, s2.trace)
    elif cfg.ordering == "reverse":
        s2 = train_stage2(cfg, data)
        s1 = train_stage1(cfg, data, stage1_from_stage2(s2.checkpoint, cfg))
        result = PipelineResult(s1.checkpoint, s1.trace, s2.trace)
    else:
        joint = train_stage2(cfg, data, contrastive=True, epochs=cfg.stage1_epochs + cfg.stage2_epochs)
        result = PipelineResult(joint.checkpoint, [], joint.trace)
    cache.runs[key] = result
    return result


# -- reports --------------------------------------------------------------------------------

@dataclass
class AblationRow:
    cell: str
    seed: int
    metric: str
    value: float
    fingerprint: str
    ids: dict = field(default_factory=dict)


@dataclass
class AblationReport:
    name: str
    rows: list[AblationRow] = field(default_factory=list)

    def cells(self) -> list[str]:
        return list(dict.fromkeys(r.cell for r in self.rows))

    def values(self, cell: str) -> list[float]:
        return [r.value for r in self.rows if r.cell == cell]

    def means(self) -> dict[str, float]:
        return {c: float(np.mean(self.values(c))) for c in self.cells()}

    def spread(self) -> dict[str, float]:
        return {c: float(np.std(self.values(c))) for c in self.cells()}

    def best(self) -> tuple[str, float, float]:
        means = self.means()
        cell = max(means, key=means.get)
        return cell, means[cell], self.spread()[cell]

    def to_csv(self) -> str:
        id_cols = list(dict.fromkeys(k for r in self.rows for k in r.ids))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fingerprint", "seed", "cell", *id_cols, "metric", "value"])
        for r in self.rows:
            w.writerow([r.fingerprint, r.seed, r.cell, *(r.ids.get(k, "") for k in id_cols), r.metric, f"{r.value:.9g}"])
        return buf.getvalue()


def _probe_row(report: AblationReport, cell: str, cfg: CurriculumConfig, ckpt, probe, dataset, **ids) -> None:
    res = finetune_probe(ckpt, probe, dataset, cfg, cfg.seed)
    report.rows.append(AblationRow(cell, cfg.seed, res.report.name, res.report.value, fingerprint(cfg).hex(), ids))
    log.info("%s %s seed=%d %s=%.4f", report.name, cell, cfg.seed, res.report.name, res.report.value)


def _variants(name: str, base: CurriculumConfig, dataset, seeds, probe, cache, variants: dict[str, dict]) -> AblationReport:
    cache = cache if cache is not None else PipelineCache()
    data = prepare(dataset)
    report = AblationReport(name)
    for seed in seeds:
        for cell, changes in variants.items():
            cfg = replace(base, seed=seed, **changes)
            ckpt = run_pipeline(cfg, data, cache).checkpoint
            _probe_row(report, cell, cfg, ckpt, probe, dataset)
    return report


def run_ordering_ablation(cfg, dataset: RgbdDataset, seeds=(0, 1, 2), probe=ProbeConfig(), cache=None) -> AblationReport:
    variants = {label: {"ordering": o} for o, label in ORDERING_CELLS.items()}
    return _variants("ordering", cfg, dataset, seeds, probe, cache, variants)


def run_denoising_ablation(cfg, dataset: RgbdDataset, seeds=(0, 1, 2), probe=ProbeConfig(), cache=None) -> AblationReport:
    variants = {label: {"denoise": d, "ordering": "curriculum"} for d, label in DENOISE_CELLS.items()}
    return _variants("denoise", cfg, dataset, seeds, probe, cache, variants)


def run_loss_ablation(cfg, dataset: RgbdDataset, seeds=(0, 1, 2), probe=ProbeConfig(), cache=None) -> AblationReport:
    """MIM + denoising alone (no contrastive stage) vs adding RGB reconstruction vs the full curriculum."""
    variants = {
        LOSS_CELLS["mim-denoise"]: {"ordering": "curriculum", "stage1_epochs": 0},
        LOSS_CELLS["rgb-recon"]: {"ordering": "curriculum", "rgb_recon": True},
        LOSS_CELLS["full"]: {"ordering": "curriculum"},
    }
    return _variants("loss", cfg, dataset, seeds, probe, cache, variants)


def check_mask_grid(grid, num_patches: int) -> None:
    for r_rgb, r_dep in grid:
        if visible_count(num_patches, r_dep) == num_patches:
            raise ContractError(f"depth masking ratio {r_dep} leaves no masked patch to reconstruct")
        if visible_count(num_patches, r_rgb) == 0:
            raise ContractError(f"rgb masking ratio {r_rgb} leaves no visible patch")


def run_masking_sweep(cfg, dataset: RgbdDataset, grid=REFERENCE_MASK_GRID, seeds=(0, 1, 2), probe=ProbeConfig(), cache=None) -> AblationReport:
    check_mask_grid(grid, cfg.vit.num_patches)
    cache = cache if cache is not None else PipelineCache()
    data = prepare(dataset)
    report = AblationReport("masking")
    for seed in seeds:
        for r_rgb, r_dep in grid:
            c = replace(cfg, seed=seed, ordering="curriculum", mask_ratio_rgb=r_rgb, mask_ratio_depth=r_dep)
            ckpt = run_pipeline(c, data, cache).checkpoint
            _probe_row(report, f"{r_rgb:.2f}/{r_dep:.2f}", c, ckpt, probe, dataset, rgb_ratio=r_rgb, depth_ratio=r_dep)
    return report


def run_low_data(cfg, dataset: RgbdDataset, fractions=DEFAULT_FRACTIONS, seeds=(0, 1, 2), probe=ProbeConfig(), cache=None) -> AblationReport:
    """Curriculum checkpoint vs untrained weights at each labeled fraction."""
    cache = cache if cache is not None else PipelineCache()
    data = prepare(dataset)
    report = AblationReport("lowdata")
    for seed in seeds:
        c = replace(cfg, seed=seed, ordering="curriculum")
        ckpts = {"curriculum": run_pipeline(c, data, cache).checkpoint, "random": random_checkpoint(c)}
        for f in fractions:
            for cell, ckpt in ckpts.items():
                _probe_row(report, cell, c, ckpt, replace(probe, fraction=f), dataset, fraction=f)
    return report


# -- convergence -----------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    stage1_fraction: float
    stage2_fraction: float

    @property
    def difference(self) -> float:
        return self.stage2_fraction - self.stage1_fraction

    def to_csv(self) -> str:
        return (
            "stage1_fraction,stage2_fraction,difference\n"
            f"{self.stage1_fraction:.9g},{self.stage2_fraction:.9g},{self.difference:.9g}\n"
        )


def loss_curve(trace, column: str | None = None) -> np.ndarray:
    """Loss values to normalize: per-epoch means when the trace spans several epochs, else per step."""
    if not trace:
        raise ContractError("empty loss trace")
    if not isinstance(trace[0], dict):
        return np.asarray(trace, dtype=np.float64)
    column = column or ("loss_total" if "loss_total" in trace[0] else "loss_pnce")
    epochs = np.array([r["epoch"] for r in trace])
    values = np.array([r[column] for r in trace], dtype=np.float64)
    uniq = np.unique(epochs)
    if len(uniq) < 2:
        return values
    return np.array([values[epochs == e].mean() for e in uniq])


def normalized_curve(losses) -> tuple[np.ndarray, np.ndarray]:
    """(epoch fraction, (loss - min) / (initial - min))."""
    y = np.asarray(losses, dtype=np.float64)
    if y.size < 2:
        raise ContractError("need at least two points to normalize a trace")
    lo = y.min()
    span = y[0] - lo
    if span <= 0:
        raise ContractError("trace never drops below its initial value; normalization is undefined")
    return np.linspace(0.0, 1.0, y.size), (y - lo) / span


def fraction_to_threshold(losses, remaining: float = 0.1) -> float:
    """First epoch fraction (linearly interpolated) where the normalized loss reaches ``remaining``."""
    x, y = normalized_curve(losses)
    i = int(np.argmax(y <= remaining))
    if i == 0:
        return 0.0
    x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
    return float(x0 + (y0 - remaining) / (y0 - y1) * (x1 - x0))


def convergence_report(stage1_trace, stage2_trace) -> ConvergenceReport:
    return ConvergenceReport(
        fraction_to_threshold(loss_curve(stage1_trace)),
        fraction_to_threshold(loss_curve(stage2_trace)),
    )
