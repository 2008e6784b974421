"""Run configuration: dataclasses plus a flat ``key = value`` text format.

Nested dataclasses flatten to dotted keys (``vit.enc_dim = 64``); tuples are
written comma-separated. Serialization is canonical (sorted keys, fixed float
formatting), so the SHA-256 of the text is a stable config fingerprint.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, get_type_hints

from .data.transforms import AugmentConfig
from .errors import ConfigError
from .losses import LossWeights
from .model import ViTConfig

ORDERINGS = ("curriculum", "reverse", "joint")
DENOISE_MODES = ("full", "noise-only", "none")

# Full-scale ScanNet budget: 20 contrastive epochs, 100 reconstruction epochs.
FULL_STAGE1_EPOCHS = 20
FULL_STAGE2_EPOCHS = 100


@dataclass(frozen=True)
class OptimizerConfig:
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 5e-2
    eps: float = 1e-8


@dataclass(frozen=True)
class StageSchedule:
    base_lr: float = 1e-4
    warmup_epochs: float = 0.0
    warmup_lr: float = 1e-6
    kind: str = "cosine"


@dataclass(frozen=True)
class CurriculumConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    stage1: StageSchedule = field(default_factory=StageSchedule)
    stage2: StageSchedule = field(default_factory=StageSchedule)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mask_ratio_rgb: float = 0.8
    mask_ratio_depth: float = 0.8
    stage1_epochs: int = 4
    stage2_epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    manifest: str = ""
    ordering: str = "curriculum"
    denoise: str = "full"
    rgb_recon: bool = False
    cross_batch_negatives: bool = False

    def validate(self) -> None:
        self.vit.validate()
        self.loss.validate()
        for r in (self.mask_ratio_rgb, self.mask_ratio_depth):
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"masking ratio {r} outside [0, 1)")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {ORDERINGS}")
        if self.denoise not in DENOISE_MODES:
            raise ConfigError(f"denoise must be one of {DENOISE_MODES}")
        for sched in (self.stage1, self.stage2):
            if sched.kind != "cosine":
                raise ConfigError(f"unsupported schedule {sched.kind!r}")
            if sched.base_lr < 0 or sched.warmup_epochs < 0:
                raise ConfigError("learning rate and warmup must be non-negative")

    @property
    def effective_beta(self) -> float:
        return self.loss.beta if self.denoise == "full" else 0.0


def scannet_config(**overrides) -> CurriculumConfig:
    """Pre-training hyperparameters from the ScanNet column, desk-scale epochs."""
    return replace(CurriculumConfig(loss=LossWeights(beta=0.01)), **overrides)


def sunrgbd_config(**overrides) -> CurriculumConfig:
    """Pre-training hyperparameters from the SUN RGB-D column, desk-scale epochs."""
    return replace(CurriculumConfig(loss=LossWeights(beta=0.1)), **overrides)


# -- flat text serialization ---------------------------------------------------------

def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def flatten(obj, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = _format(v)
    return out


def dumps(obj) -> str:
    flat = flatten(obj)
    return "".join(f"{k} = {flat[k]}\n" for k in sorted(flat))


def fingerprint(obj) -> bytes:
    return hashlib.sha256(dumps(obj).encode("utf-8")).digest()


def _parse_scalar(text: str, typ) -> Any:
    text = text.strip()
    try:
        if typ is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as {typ.__name__}") from exc
    raise ConfigError(f"unsupported field type {typ}")


def _parse(text: str, typ) -> Any:
    origin = getattr(typ, "__origin__", None)
    if origin is tuple:
        items = [x for x in text.split(",") if x.strip()]
        args = typ.__args__
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(x, args[0]) for x in items)
        if len(items) != len(args):
            raise ConfigError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(x, a) for x, a in zip(items, args))
    return _parse_scalar(text, typ)


def apply_overrides(obj, overrides: dict[str, str]):
    """Return a copy of dataclass ``obj`` with dotted-key string overrides applied."""
    hints = get_type_hints(type(obj))
    grouped: dict[str, dict[str, str]] = {}
    changes: dict[str, Any] = {}
    names = {f.name for f in fields(obj)}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}")
        if rest:
            grouped.setdefault(head, {})[rest] = value
        else:
            if is_dataclass(getattr(obj, head)):
                raise ConfigError(f"config key {key!r} names a section, not a value")
            changes[head] = _parse(value, hints[head])
    for head, sub in grouped.items():
        child = getattr(obj, head)
        if not is_dataclass(child):
            raise ConfigError(f"config key {head!r} has no sub-keys")
        changes[head] = apply_overrides(child, sub)
    return dataclasses.replace(obj, **changes)


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def loads(text: str, base=None):
    return apply_overrides(base if base is not None else CurriculumConfig(), parse_kv(text))


def load_config(path, base=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text, base)


def save_config(cfg, path) -> None:
    Path(path).write_text(dumps(cfg))
