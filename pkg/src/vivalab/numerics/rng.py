"""Counter-based seeded randomness with named, independent streams.

Every consumer of randomness asks the root `Rng` for a stream by name (plus
optional integer indices, e.g. a rollout member id). Streams are backed by
Philox keyed on a stable hash of (seed, name, indices), so draws in one
stream can never shift draws in another, and the same (seed, stream) always
replays the same sequence.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64"

# Stream names used across the artifact. Free-form names are allowed; these
# are the conventional ones.
STREAM_DATA = "data"
STREAM_INIT = "init"
STREAM_SDE_NOISE = "sde-noise"
STREAM_DROPOUT = "dropout"


def _stream_key(seed: int, name: str, indices: tuple[int, ...]) -> int:
    material = f"{seed}:{name}:" + ":".join(str(i) for i in indices)
    digest = hashlib.blake2b(material.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class Stream:
    """A single independent draw sequence. Tracks how many values were drawn."""

    def __init__(self, seed: int, name: str, indices: tuple[int, ...]):
        self.name = name
        self.indices = indices
        self.counter = 0
        self._gen = np.random.Generator(
            np.random.Philox(key=_stream_key(seed, name, indices))
        )

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        arr = self._gen.standard_normal(size=shape, dtype=np.float64)
        self.counter += int(np.prod(shape)) if shape else 1
        return arr.astype(dtype, copy=False)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        arr = self._gen.uniform(low, high, size=shape)
        self.counter += int(np.prod(shape)) if shape else 1
        return arr

    def integers(self, low, high=None, shape=()) -> np.ndarray:
        arr = self._gen.integers(low, high, size=shape)
        self.counter += int(np.prod(shape)) if shape else 1
        return arr

    def choice_index(self, n: int) -> int:
        self.counter += 1
        return int(self._gen.integers(0, n))

    def bernoulli(self, p: float) -> bool:
        self.counter += 1
        return bool(self._gen.uniform() < p)

    def shuffled(self, n: int) -> np.ndarray:
        idx = np.arange(n)
        self._gen.shuffle(idx)
        self.counter += n
        return idx


class Rng:
    """Root of the stream tree for one run seed."""

    algorithm = ALGORITHM

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, name: str, *indices: int) -> Stream:
        return Stream(self.seed, name, tuple(int(i) for i in indices))
