"""The ``.rgbd`` binary sample format and the text manifest.

``.rgbd`` layout (little-endian)::

    b"RGBD" | version u16 | H u32 | W u32 | C u32
    | rgb f32[H*W*3] | depth f32[H*W] | has_labels u8 | labels u16[H*W] (if has_labels)

Manifest: ``#`` comment lines (``# key = value`` carries metadata), then one
``path,split`` record per line with paths relative to the manifest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, VersionError
from .scenes import RgbdSample

MAGIC = b"RGBD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIII")
SPLITS = ("train", "val", "test")


def encode_sample(sample: RgbdSample) -> bytes:
    H, W = sample.depth.shape
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, H, W, sample.num_classes),
        np.ascontiguousarray(sample.rgb, dtype="<f4").tobytes(),
        np.ascontiguousarray(sample.depth, dtype="<f4").tobytes(),
    ]
    if sample.labels is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(np.ascontiguousarray(sample.labels, dtype="<u2").tobytes())
    return b"".join(parts)


def decode_sample(buf: bytes) -> RgbdSample:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, H, W, C = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported .rgbd version {version} (this build reads {FORMAT_VERSION})")
    n = H * W
    off = _HEADER.size
    need = off + 4 * 3 * n + 4 * n + 1
    if len(buf) < need:
        raise FormatError(f"truncated payload: {len(buf)} bytes, need at least {need}")
    rgb = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=off).reshape(H, W, 3)
    off += 12 * n
    depth = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(H, W)
    off += 4 * n
    flag = buf[off]
    off += 1
    labels = None
    if flag == 1:
        if len(buf) != off + 2 * n:
            raise FormatError(f"label payload size mismatch: {len(buf) - off} bytes, expected {2 * n}")
        labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off).reshape(H, W).astype(np.int64)
    elif flag == 0:
        if len(buf) != off:
            raise FormatError("trailing bytes after sample")
    else:
        raise FormatError(f"bad label flag {flag}")
    return RgbdSample(
        rgb=rgb.astype(np.float32),
        depth=depth.astype(np.float32),
        labels=labels,
        num_classes=int(C),
    )


def write_sample(sample: RgbdSample, path) -> None:
    Path(path).write_bytes(encode_sample(sample))


def read_sample(path) -> RgbdSample:
    return decode_sample(Path(path).read_bytes())


@dataclass
class DatasetManifest:
    entries: list[tuple[str, str]]
    height: int
    width: int
    patch: int
    num_classes: int
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.entries)

    def split_indices(self, split: str) -> list[int]:
        return [i for i, (_, s) in enumerate(self.entries) if s == split]

    def validate(self) -> None:
        bad = {s for _, s in self.entries} - set(SPLITS)
        if bad:
            raise FormatError(f"unknown split names {sorted(bad)}")


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [
        "# rgbd-curriculum dataset manifest",
        f"# count = {manifest.count}",
        f"# size = {manifest.height}x{manifest.width}",
        f"# patch = {manifest.patch}",
        f"# classes = {manifest.num_classes}",
        f"# seed = {manifest.seed}",
    ]
    lines += [f"# {k} = {v}" for k, v in sorted(manifest.extra.items())]
    lines += [f"{p},{s}" for p, s in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    meta: dict[str, str] = {}
    entries: list[tuple[str, str]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        rec, sep, split = line.rpartition(",")
        if not sep or not rec:
            raise FormatError(f"{path}:{lineno}: expected 'path,split'")
        entries.append((rec.strip(), split.strip()))
    try:
        h, w = (int(v) for v in meta.pop("size").split("x"))
        manifest = DatasetManifest(
            entries=entries,
            height=h,
            width=w,
            patch=int(meta.pop("patch")),
            num_classes=int(meta.pop("classes")),
            seed=int(meta.pop("seed")),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: missing or malformed manifest header ({exc})") from exc
    count = meta.pop("count", None)
    if count is not None and int(count) != len(entries):
        raise FormatError(f"{path}: header count {count} != {len(entries)} records")
    manifest.extra = meta
    manifest.validate()
    return manifest
