"""Optimizer, checkpoints and the two-stage training loops."""

from .checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .optim import OptimizerState, ScheduleConfig, adamw_step, lr_at, no_decay_names
from .training import (
    PreparedData,
    Stage2Batch,
    StageResult,
    init_stage2_from_stage1,
    make_stage2_batch,
    params_from_checkpoint,
    prepare,
    read_trace,
    stage1_forward,
    stage1_from_stage2,
    stage2_forward,
    train_stage1,
    train_stage2,
    trace_to_csv,
    write_trace,
)
