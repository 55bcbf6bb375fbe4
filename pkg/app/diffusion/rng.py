"""
Splittable counter-based random streams.

Every stream is a Philox generator keyed by (seed, path). Splitting appends
keys to the path, so the noise drawn for a given timestep or image id does
not depend on the order in which other streams were consumed.
"""
import hashlib
from typing import Sequence, Tuple, Union

import numpy as np
import torch

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"Rng keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Deterministic random stream addressed by (seed, path)."""

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, *keys: Key) -> "Rng":
        """Independent child stream; same keys always give the same stream."""
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def normal(self, shape: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape))).to(dtype)

    def uniform(self, low: float, high: float, shape: Sequence[int] = ()) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int, shape: Sequence[int] = ()) -> np.ndarray:
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=tuple(shape))

    def random(self) -> float:
        return float(self._gen.random())

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
