"""Metrics, downstream probes and the ablation/convergence runners."""

from .ablations import (
    REFERENCE_MASK_GRID,
    AblationReport,
    AblationRow,
    ConvergenceReport,
    PipelineCache,
    PipelineResult,
    convergence_report,
    fraction_to_threshold,
    loss_curve,
    normalized_curve,
    run_denoising_ablation,
    run_loss_ablation,
    run_low_data,
    run_masking_sweep,
    run_ordering_ablation,
    run_pipeline,
)
from .metrics import MetricReport, confusion_matrix, delta1, miou
from .probe import DEFAULT_FRACTIONS, ProbeConfig, ProbeResult, finetune_probe, labeled_indices, layer_lr_scales, low_data_sweep, random_checkpoint
