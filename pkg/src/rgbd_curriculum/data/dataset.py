"""In-memory datasets, their on-disk materialization, and split bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .fileio import DatasetManifest, read_manifest, read_sample, write_manifest, write_sample
from .scenes import RgbdSample, SceneConfig, generate_synthetic_scene


def scene_seed(base_seed: int, index: int) -> int:
    """Per-sample seed derived from (base seed, sample index)."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def split_assignment(count: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> list[str]:
    """Deterministic train/val/test labels with counts round(0.8n), round(0.1n), rest."""
    n_train = int(np.floor(fractions[0] * count + 0.5))
    n_val = int(np.floor(fractions[1] * count + 0.5))
    n_val = min(n_val, count - n_train)
    order = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(2**32,)))).permutation(count)
    labels = ["test"] * count
    for rank, idx in enumerate(order):
        if rank < n_train:
            labels[idx] = "train"
        elif rank < n_train + n_val:
            labels[idx] = "val"
    return labels


@dataclass
class RgbdDataset:
    """Stacked arrays for a whole dataset: rgb (N,H,W,3), depth (N,H,W), labels (N,H,W)."""

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray | None
    splits: np.ndarray
    scene: SceneConfig
    seed: int = 0

    def __len__(self) -> int:
        return len(self.rgb)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def subset(self, idx) -> "RgbdDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return RgbdDataset(
            rgb=self.rgb[idx],
            depth=self.depth[idx],
            labels=None if self.labels is None else self.labels[idx],
            splits=self.splits[idx],
            scene=self.scene,
            seed=self.seed,
        )

    def split(self, name: str) -> "RgbdDataset":
        return self.subset(self.indices(name))

    def sample(self, i: int) -> RgbdSample:
        return RgbdSample(
            rgb=self.rgb[i],
            depth=self.depth[i],
            labels=None if self.labels is None else self.labels[i],
            num_classes=self.scene.num_classes,
        )


def synthetic_dataset(count: int, seed: int, scene: SceneConfig = SceneConfig()) -> RgbdDataset:
    """Generate ``count`` scenes in memory with the 80/10/10 split."""
    scene.validate()
    if count < 1:
        raise ConfigError("dataset needs at least one sample")
    samples = [generate_synthetic_scene(scene_seed(seed, i), scene) for i in range(count)]
    return RgbdDataset(
        rgb=np.stack([s.rgb for s in samples]),
        depth=np.stack([s.depth for s in samples]),
        labels=np.stack([s.labels for s in samples]),
        splits=np.array(split_assignment(count, seed)),
        scene=scene,
        seed=seed,
    )


def write_dataset(out_dir, count: int, seed: int, scene: SceneConfig = SceneConfig()) -> DatasetManifest:
    """Write ``count`` .rgbd files plus ``manifest.txt`` into ``out_dir``."""
    scene.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = split_assignment(count, seed)
    entries = []
    for i in range(count):
        name = f"sample_{i:05d}.rgbd"
        write_sample(generate_synthetic_scene(scene_seed(seed, i), scene), out / name)
        entries.append((name, splits[i]))
    manifest = DatasetManifest(
        entries=entries,
        height=scene.height,
        width=scene.width,
        patch=scene.patch,
        num_classes=scene.num_classes,
        seed=seed,
        extra={
            "depth_min": scene.depth_min,
            "depth_max": scene.depth_max,
            "min_objects": scene.min_objects,
            "max_objects": scene.max_objects,
            "texture_noise": scene.texture_noise,
            "palette": scene.palette,
        },
    )
    write_manifest(manifest, out / "manifest.txt")
    return manifest


def load_dataset(manifest_path) -> RgbdDataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.txt"
    manifest = read_manifest(path)
    samples = [read_sample(path.parent / rel) for rel, _ in manifest.entries]
    scene = SceneConfig(
        height=manifest.height,
        width=manifest.width,
        patch=manifest.patch,
        num_classes=manifest.num_classes,
        depth_min=float(manifest.extra.get("depth_min", SceneConfig.depth_min)),
        depth_max=float(manifest.extra.get("depth_max", SceneConfig.depth_max)),
        min_objects=int(manifest.extra.get("min_objects", SceneConfig.min_objects)),
        max_objects=int(manifest.extra.get("max_objects", SceneConfig.max_objects)),
        texture_noise=float(manifest.extra.get("texture_noise", SceneConfig.texture_noise)),
        palette=str(manifest.extra.get("palette", SceneConfig.palette)),
    )
    has_labels = all(s.labels is not None for s in samples)
    return RgbdDataset(
        rgb=np.stack([s.rgb for s in samples]),
        depth=np.stack([s.depth for s in samples]),
        labels=np.stack([s.labels for s in samples]) if has_labels else None,
        splits=np.array([s for _, s in manifest.entries]),
        scene=scene,
        seed=manifest.seed,
    )
