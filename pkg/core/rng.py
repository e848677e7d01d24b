"""
Seeded, splittable random streams.

Every stochastic step of the lab (class means, noise, LoRA init, dropout
masks, batch order) draws from an ``Rng``. Streams are counter-based
(Philox) and keyed by a ``numpy.random.SeedSequence`` so the same seed gives
the same numbers on every platform, and children derived with ``split`` or
``child`` never overlap with their parent or siblings.
"""

import logging
import zlib
from typing import List, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Shape = Union[int, Tuple[int, ...]]


class Rng:
    """Deterministic random stream derived from a 64-bit seed and a spawn key."""

    def __init__(self, seed: int, spawn_key: Sequence[int] = ()):
        if seed < 0:
            raise ValueError(f"Seed must be non-negative, got {seed}")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.spawn_key: Tuple[int, ...] = tuple(int(k) for k in spawn_key)
        self._seed_sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._generator = np.random.Generator(np.random.Philox(self._seed_sequence))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key})"

    def split(self, n: int) -> List["Rng"]:
        """Return ``n`` independent child streams; the parent stream is not advanced."""
        return [Rng(self.seed, self.spawn_key + (i,)) for i in range(n)]

    def stream(self, i: int) -> "Rng":
        """The ``i``-th child, identical to ``split(i + 1)[i]``."""
        return Rng(self.seed, self.spawn_key + (int(i),))

    def child(self, key: str) -> "Rng":
        """Return the child stream named ``key``."""
        return Rng(self.seed, self.spawn_key + (zlib.crc32(key.encode("utf-8")),))

    def normal(self, size: Shape, std: float = 1.0) -> np.ndarray:
        return self._generator.normal(0.0, std, size=size)

    def uniform(self, size: Shape) -> np.ndarray:
        return self._generator.random(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """Draw ``size`` distinct indices from ``range(n)``."""
        return self._generator.choice(n, size=size, replace=False)

    def keep_mask(self, shape: Tuple[int, ...], p: float) -> np.ndarray:
        """Entrywise Bernoulli mask with entries 1.0 kept with probability ``1 - p``."""
        return (self._generator.random(size=shape) >= p).astype(np.float64)

    def unit_vector(self, d: int) -> np.ndarray:
        """Uniformly distributed direction on the unit sphere in R^d."""
        while True:
            v = self._generator.normal(0.0, 1.0, size=d)
            norm = float(np.linalg.norm(v))
            if norm > 1e-12:
                return v / norm
            logger.debug("Resampling degenerate unit vector draw")
