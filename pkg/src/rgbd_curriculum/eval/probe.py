"""Downstream probes: a per-patch linear head on top of the RGB encoder.

Segmentation heads classify each patch and upsample the decision to pixels
(nearest neighbour); depth heads regress the p*p normalized depths of each
patch. By default the encoder stays frozen and its features are computed
once; ``finetune_epochs > 0`` adds a second phase that also updates the
encoder with layer-wise learning-rate decay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import model as M
from ..config import CurriculumConfig, fingerprint
from ..curriculum.checkpoint import Checkpoint
from ..curriculum.optim import OptimizerState, ScheduleConfig, adamw_step, lr_at, no_decay_names
from ..curriculum.training import batch_schedule, params_from_checkpoint, rgb_encoder_prefix, rgb_patches
from ..data.dataset import RgbdDataset
from ..data.transforms import normalize_depth_array, patchify_array, unpatchify_array
from ..errors import ConfigError, ContractError
from ..numerics import ops
from ..numerics.rng import SeededRng
from ..numerics.tensor import ComputationTape, Tensor, backward, no_tape
from .metrics import MetricReport, delta1, miou

TASKS = ("seg", "depth")
DEFAULT_FRACTIONS = (0.1, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class ProbeConfig:
    task: str = "seg"
    head: str = "linear"
    epochs: int = 200
    finetune_epochs: int = 0
    base_lr: float = 1e-1
    finetune_lr: float = 1e-3
    warmup_epochs: float = 1.0
    warmup_lr: float = 1e-6
    layer_decay: float = 0.75
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 5e-2
    batch_size: int = 64
    fraction: float = 1.0
    eval_split: str = "val"

    @property
    def frozen(self) -> bool:
        return self.finetune_epochs == 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"probe task must be one of {TASKS}")
        if self.head != "linear":
            raise ConfigError("only the per-patch linear head is implemented")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"labeled fraction {self.fraction} outside (0, 1]")
        if self.epochs < 0 or self.finetune_epochs < 0 or self.batch_size < 1:
            raise ConfigError("probe epochs must be >= 0 and batch size >= 1")


@dataclass
class ProbeResult:
    report: MetricReport
    checkpoint: Checkpoint
    labeled_count: int


def labeled_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """A seeded subset of round(fraction * n) positions, ascending; nested across fractions."""
    k = int(np.floor(fraction * n + 0.5))
    if k == 0:
        raise ContractError(f"labeled fraction {fraction} of {n} training samples leaves none")
    return np.sort(SeededRng(seed).child("fraction").permutation(n)[:k])


def layer_lr_scales(params: M.Params, prefix: str, depth: int, decay: float) -> dict[str, float]:
    """Block k (0-based) of ``depth`` gets decay**(depth-1-k); patch/modality embeddings decay**depth; norm and head 1."""
    scales = {}
    for name in params:
        if not name.startswith(prefix + "."):
            continue
        part = name[len(prefix) + 1:]
        if part.startswith("blocks."):
            k = int(part.split(".")[1])
            scales[name] = decay ** (depth - 1 - k)
        elif part.startswith(("patch.", "mod.")):
            scales[name] = decay**depth
    return scales


def _encoder_tokens(rgb: np.ndarray, params: M.Params, vit: M.ViTConfig, prefix: str) -> Tensor:
    tok = M.embed(rgb_patches(rgb, vit.patch), params, vit, prefix, "rgb")
    return M.run_encoder(tok, params, vit, prefix)


def encoder_features(rgb: np.ndarray, params: M.Params, vit: M.ViTConfig, prefix: str, chunk: int = 128) -> np.ndarray:
    with no_tape():
        parts = [_encoder_tokens(rgb[i:i + chunk], params, vit, prefix).data for i in range(0, len(rgb), chunk)]
    return np.concatenate(parts, axis=0)


def seg_targets(labels: np.ndarray, p: int, num_classes: int) -> np.ndarray:
    """Per-patch class histograms (N, T, C) summing to 1."""
    lab = patchify_array(labels[..., None], p).reshape(labels.shape[0], -1, p * p)
    onehot = np.eye(num_classes, dtype=np.float32)[lab.astype(np.int64)]
    return onehot.mean(axis=2)


def depth_targets(depth: np.ndarray, p: int, dmin: float, dmax: float) -> np.ndarray:
    d = patchify_array(normalize_depth_array(depth, dmin, dmax)[..., None], p)
    return d.reshape(d.shape[0], d.shape[1], -1).astype(np.float32)


def _head_loss(feats: Tensor, target: np.ndarray, head: M.Params, task: str) -> Tensor:
    out = ops.linear(feats, head["probe.w"], head["probe.b"])
    if task == "depth":
        return ops.mse(out, Tensor(target))
    B, T, _ = target.shape
    return ops.scalar_mul(ops.sum(ops.mul(ops.log_softmax(out, axis=-1), Tensor(target))), -1.0 / (B * T))


def _predict(feats: np.ndarray, head: M.Params) -> np.ndarray:
    return feats @ head["probe.w"].data + head["probe.b"].data


def _schedule(probe: ProbeConfig, base_lr: float, epochs: int, per_epoch: int) -> ScheduleConfig:
    total = epochs * per_epoch
    return ScheduleConfig(base_lr, total, min(int(round(probe.warmup_epochs * per_epoch)), total), probe.warmup_lr)


def _fit(n: int, epochs: int, base_lr: float, probe: ProbeConfig, params: M.Params, rng: SeededRng, loss_fn, lr_scale=None) -> None:
    if epochs == 0:
        return
    state = OptimizerState(betas=probe.betas, weight_decay=probe.weight_decay)
    per_epoch = n // min(probe.batch_size, n)
    schedule = _schedule(probe, base_lr, epochs, per_epoch)
    skip = no_decay_names(params)
    step = 0
    for epoch in range(epochs):
        for idx in batch_schedule(n, probe.batch_size, rng.child(epoch)):
            with ComputationTape() as tape:
                loss = loss_fn(idx)
            adamw_step(params, backward(loss, tape), state, lr_at(step, schedule), lr_scale=lr_scale, no_decay=skip)
            step += 1


def encoder_from_checkpoint(ckpt: Checkpoint) -> tuple[M.Params, str]:
    params = params_from_checkpoint(ckpt)
    prefix = rgb_encoder_prefix(params)
    return {k: v for k, v in params.items() if k.startswith(prefix + ".")}, prefix


def finetune_probe(
    ckpt: Checkpoint,
    probe: ProbeConfig,
    dataset: RgbdDataset,
    cfg: CurriculumConfig | None = None,
    seed: int = 0,
) -> ProbeResult:
    """Fit a probe head on the labeled fraction of the train split and score it on ``probe.eval_split``."""
    probe.validate()
    cfg = cfg or CurriculumConfig()
    vit = cfg.vit
    sc = dataset.scene
    enc, prefix = encoder_from_checkpoint(ckpt)
    train = dataset.split("train")
    held = dataset.split(probe.eval_split)
    if len(held) == 0:
        raise ContractError(f"no {probe.eval_split!r} samples to evaluate on")
    sel = labeled_indices(len(train), probe.fraction, seed)
    train = train.subset(sel)
    p = vit.patch
    if probe.task == "seg":
        if train.labels is None:
            raise ContractError("segmentation probe needs labeled samples")
        target = seg_targets(train.labels, p, sc.num_classes)
    else:
        target = depth_targets(train.depth, p, sc.depth_min, sc.depth_max)

    rng = SeededRng(seed).child("probe")
    out_dim = target.shape[-1]
    init = M._Init(rng.child("head"), vit.init_std)
    init.linear("probe", vit.enc_dim, out_dim)
    head = init.params

    feats = encoder_features(train.rgb, enc, vit, prefix)
    _fit(len(train), probe.epochs, probe.base_lr, probe, head, rng.child("head-phase"),
         lambda idx: _head_loss(Tensor(feats[idx]), target[idx], head, probe.task))

    if not probe.frozen:
        joint = {**enc, **head}
        scales = layer_lr_scales(joint, prefix, vit.enc_depth, probe.layer_decay)
        _fit(len(train), probe.finetune_epochs, probe.finetune_lr, probe, joint, rng.child("finetune-phase"),
             lambda idx: _head_loss(_encoder_tokens(train.rgb[idx], enc, vit, prefix), target[idx], head, probe.task),
             lr_scale=scales)

    out = _predict(encoder_features(held.rgb, enc, vit, prefix), head)
    N = len(held)
    if probe.task == "seg":
        cls = out.argmax(-1)  # (N, T)
        pix = np.repeat(cls[..., None], p * p, axis=-1).reshape(N, -1, p, p, 1)
        pred = unpatchify_array(pix, vit.grid)[..., 0]
        report = miou(pred, held.labels, sc.num_classes)
    else:
        y = np.clip(out, 0.0, 1.0).reshape(N, -1, p, p, 1)
        metres = sc.depth_min + unpatchify_array(y, vit.grid)[..., 0] * (sc.depth_max - sc.depth_min)
        report = delta1(np.maximum(metres, 1e-3), held.depth)
    report.seed = seed
    report.fingerprint = fingerprint(cfg).hex()
    tensors = {k: v.data.astype(np.float32) for k, v in {**enc, **head}.items()}
    ft = Checkpoint("finetuned", fingerprint(cfg), tensors, seed=seed, step=0)
    return ProbeResult(report, ft, len(sel))


def random_checkpoint(cfg: CurriculumConfig) -> Checkpoint:
    """Untrained stage-2 weights, the no-pre-training baseline."""
    params = M.init_stage2_params(cfg.vit, SeededRng(cfg.seed).child("init"))
    return Checkpoint("stage2", fingerprint(cfg), {k: v.data.astype(np.float32) for k, v in params.items()}, seed=cfg.seed)


def low_data_sweep(
    ckpt: Checkpoint,
    fractions,
    dataset: RgbdDataset,
    probe: ProbeConfig = ProbeConfig(),
    cfg: CurriculumConfig | None = None,
    seed: int = 0,
) -> list[tuple[float, MetricReport]]:
    fractions = list(fractions)
    if fractions != sorted(fractions) or not all(0 < f <= 1 for f in fractions):
        raise ContractError("fractions must be ascending within (0, 1]")
    from dataclasses import replace

    return [(f, finetune_probe(ckpt, replace(probe, fraction=f), dataset, cfg, seed).report) for f in fractions]
