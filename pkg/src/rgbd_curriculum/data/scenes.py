"""Procedural RGB-D scenes: occluding rectangles and ellipses over a backdrop."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..numerics.rng import SeededRng

GENERATOR_VERSION = 2


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    patch: int = 4
    num_classes: int = 5
    depth_min: float = 0.5
    depth_max: float = 5.0
    min_objects: int = 3
    max_objects: int = 8
    texture_noise: float = 0.02
    # "hue": each class owns a hue band; "geometry": colors are free, so class = (shape, size) only
    palette: str = "hue"

    def validate(self) -> None:
        if self.patch <= 0 or self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"image {self.height}x{self.width} not divisible by patch size {self.patch}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes (background + one object class)")
        if not 0 < self.depth_min < self.depth_max:
            raise ConfigError(f"bad depth range [{self.depth_min}, {self.depth_max}]")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("object count range must satisfy 1 <= min <= max")
        if self.palette not in ("geometry", "hue"):
            raise ConfigError(f"unknown palette {self.palette!r}")


@dataclass
class SceneObject:
    kind: str  # "rect" | "ellipse"
    cls: int
    cy: float
    cx: float
    hy: float
    hx: float
    depth: float
    color: tuple[float, float, float]

    def coverage(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        dy = (yy + 0.5 - self.cy) / self.hy
        dx = (xx + 0.5 - self.cx) / self.hx
        if self.kind == "rect":
            return (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
        return dy * dy + dx * dx <= 1.0


@dataclass
class RgbdSample:
    """Paired color image, metric depth map and optional per-pixel class ids.

    Equality compares the arrays and class count; ``meta`` is informational and
    not part of the binary format.
    """

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ConfigError(f"rgb must be HxWx3, got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:2]:
            raise ConfigError(f"depth shape {self.depth.shape} != rgb grid {self.rgb.shape[:2]}")
        if self.labels is not None and self.labels.shape != self.depth.shape:
            raise ConfigError(f"labels shape {self.labels.shape} != depth shape {self.depth.shape}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, RgbdSample):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.rgb, other.rgb)
            and np.array_equal(self.depth, other.depth)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )


def _object_color(cls: int, cfg: SceneConfig, rng: SeededRng) -> tuple[float, float, float]:
    if cfg.palette == "hue":
        hue = ((cls - 1) / max(cfg.num_classes - 1, 1) + rng.uniform(low=-0.07, high=0.07)) % 1.0
    else:
        hue = rng.uniform()
    sat = rng.uniform(low=0.45, high=0.95)
    val = rng.uniform(low=0.65, high=1.0)
    return colorsys.hsv_to_rgb(hue, sat, val)


def sample_objects(rng: SeededRng, cfg: SceneConfig, far: float) -> list[SceneObject]:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(n):
        cls = int(rng.integers(1, cfg.num_classes))
        # odd classes are boxes, even classes are round; classes 1-2 small, 3+ large
        kind = "rect" if cls % 2 == 1 else "ellipse"
        lo, hi = (0.08, 0.16) if cls <= 2 else (0.18, 0.32)
        objects.append(
            SceneObject(
                kind=kind,
                cls=cls,
                cy=float(rng.uniform(low=0, high=cfg.height)),
                cx=float(rng.uniform(low=0, high=cfg.width)),
                hy=float(rng.uniform(low=lo, high=hi) * cfg.height),
                hx=float(rng.uniform(low=lo, high=hi) * cfg.width),
                depth=float(rng.uniform(low=cfg.depth_min + 0.1, high=far - 0.2)),
                color=_object_color(cls, cfg, rng),
            )
        )
    return objects


def shade(color: np.ndarray, depth: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    """Farther surfaces are rendered darker."""
    t = (depth - cfg.depth_min) / (cfg.depth_max - cfg.depth_min)
    return color * (1.0 - 0.6 * t)[..., None]


def generate_synthetic_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> RgbdSample:
    cfg.validate()
    rng = SeededRng(seed).child("scene")
    H, W = cfg.height, cfg.width

    # backdrop: a wall whose depth shrinks toward the bottom rows (floor-like)
    far = float(rng.uniform(low=0.8 * cfg.depth_max, high=cfg.depth_max))
    near = float(rng.uniform(low=0.55 * cfg.depth_max, high=far))
    rows = (np.arange(H) + 0.5) / H
    depth = np.repeat((far + (near - far) * rows)[:, None], W, axis=1)
    top = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(high=0.3), rng.uniform(low=0.5, high=0.9)))
    bottom = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(high=0.3), rng.uniform(low=0.3, high=0.7)))
    base = top[None, None, :] * (1 - rows)[:, None, None] + bottom[None, None, :] * rows[:, None, None]
    color = np.broadcast_to(base, (H, W, 3)).copy()
    labels = np.zeros((H, W), dtype=np.int64)

    objects = sample_objects(rng, cfg, near)
    # painter's order: far to near, so the nearest object wins every pixel
    for obj in sorted(objects, key=lambda o: -o.depth):
        cov = obj.coverage(H, W)
        depth[cov] = obj.depth
        color[cov] = obj.color
        labels[cov] = obj.cls

    rgb = shade(color, depth, cfg) + cfg.texture_noise * rng.normal((H, W, 3))
    rgb = np.clip(rgb, 0.0, 1.0)
    depth = np.clip(depth, cfg.depth_min, cfg.depth_max)
    return RgbdSample(
        rgb=rgb.astype(np.float32),
        depth=depth.astype(np.float32),
        labels=labels,
        num_classes=cfg.num_classes,
        meta={"seed": int(seed), "generator": GENERATOR_VERSION, "objects": objects},
    )
