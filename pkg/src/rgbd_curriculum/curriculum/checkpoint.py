"""The ``.ckpt`` binary checkpoint format.

Layout (little-endian)::

    b"CKPT" | version u16 | stage u8 | config fingerprint (32 bytes) | count u32
    | per tensor: name_len u16, UTF-8 name, rank u8, dims u32[rank], f32 payload
    | CRC32 over every preceding byte (u32)

Tensors are written sorted by name, so equal checkpoints give equal bytes.
Optimizer moments and run metadata ride along as reserved ``__opt__.*`` and
``__meta__.*`` tensors.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CorruptionError, FormatError, StageTagError, VersionError
from .optim import OptimizerState

MAGIC = b"CKPT"
FORMAT_VERSION = 1
STAGES = {"stage1": 1, "stage2": 2, "finetuned": 3}
_STAGE_NAMES = {v: k for k, v in STAGES.items()}
_HEADER = struct.Struct("<4sHB32sI")


@dataclass
class Checkpoint:
    stage: str
    fingerprint: bytes
    params: dict[str, np.ndarray]
    optimizer: OptimizerState | None = None
    seed: int = 0
    step: int = 0
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage tag {self.stage!r}")
        if len(self.fingerprint) != 32:
            raise ValueError("fingerprint must be 32 bytes")

    def require_stage(self, stage: str) -> None:
        if self.stage != stage:
            raise StageTagError(f"checkpoint is tagged {self.stage!r}, {stage!r} required")

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(self.extra)
        out["__meta__.step"] = np.array([self.step], dtype=np.float64)
        out["__meta__.seed"] = np.array([(self.seed >> s) & 0xFFFF for s in range(0, 64, 16)], dtype=np.float64)
        if self.optimizer is not None:
            opt = self.optimizer
            out["__opt__.hyper"] = np.array([*opt.betas, opt.weight_decay, opt.eps, opt.step], dtype=np.float64)
            for k, m in opt.m.items():
                out[f"__opt__.m.{k}"] = m
            for k, v in opt.v.items():
                out[f"__opt__.v.{k}"] = v
        return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = ckpt.tensors()
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, STAGES[ckpt.stage], ckpt.fingerprint, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _HEADER.size + 4:
        raise FormatError("checkpoint truncated before header end")
    magic, version, stage_id, fp, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint checksum mismatch")
    if stage_id not in _STAGE_NAMES:
        raise CorruptionError(f"unknown stage id {stage_id}")
    off = _HEADER.size
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(body):
                raise CorruptionError(f"tensor {name!r} payload runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptionError(f"malformed tensor record: {exc}") from exc
    if off != len(body):
        raise CorruptionError(f"{len(body) - off} unexpected trailing bytes after {count} tensors")

    step = int(tensors.pop("__meta__.step", np.zeros(1))[0])
    seed_parts = tensors.pop("__meta__.seed", np.zeros(4)).astype(np.int64)
    seed = sum(int(x) << (16 * i) for i, x in enumerate(seed_parts))
    optimizer = None
    hyper = tensors.pop("__opt__.hyper", None)
    if hyper is not None:
        b1, b2, wd, eps, opt_step = (float(x) for x in hyper)
        optimizer = OptimizerState(betas=(b1, b2), weight_decay=wd, eps=eps, step=int(opt_step))
    params, extra = {}, {}
    for name, arr in tensors.items():
        if name.startswith("__opt__.m."):
            optimizer.m[name[len("__opt__.m."):]] = arr
        elif name.startswith("__opt__.v."):
            optimizer.v[name[len("__opt__.v."):]] = arr
        elif name.startswith("__"):
            extra[name] = arr
        else:
            params[name] = arr
    return Checkpoint(_STAGE_NAMES[stage_id], fp, params, optimizer, seed, step, extra)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path, stage: str | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if stage is not None:
        ckpt.require_stage(stage)
    return ckpt
