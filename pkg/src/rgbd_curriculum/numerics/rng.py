"""Seeded, splittable random streams.

Backed by numpy's PCG64 bit generator keyed through ``SeedSequence``: a
``(seed, stream)`` pair maps to ``SeedSequence(seed, spawn_key=stream)``, so
child streams are derived by extending the spawn key. Normal draws use numpy's
ziggurat sampler. Sequences are reproducible for a given numpy release.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor

_MASK64 = (1 << 64) - 1


class SeededRng:
    def __init__(self, seed: int, stream: Sequence[int] | int = ()):
        if isinstance(stream, int):
            stream = (stream,)
        self.seed = int(seed) & _MASK64
        self.stream = tuple(int(s) for s in stream)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.stream)))

    def child(self, stream_id: int | str) -> "SeededRng":
        """Independent stream keyed by ``stream_id`` (strings are hashed stably)."""
        if isinstance(stream_id, str):
            stream_id = int.from_bytes(stream_id.encode("utf-8")[:8].ljust(8, b"\0"), "little") ^ len(stream_id)
        return SeededRng(self.seed, self.stream + (int(stream_id) & _MASK64,))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def sample_gaussian(rng: SeededRng, shape) -> Tensor:
    """I.i.d. standard normal tensor."""
    return Tensor(rng.normal(tuple(shape)))
