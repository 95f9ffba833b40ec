"""Deterministic random streams.

Every random draw in the package (parameter init, reparameterization noise,
key sampling, environment randomization) goes through an :class:`Rng` so a
64-bit seed fully determines a run regardless of thread count.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from focalcvae.tensor import get_default_dtype

Shape = Union[int, Tuple[int, ...]]


class Rng:
    """PCG64 generator keyed by a 64-bit seed and an optional spawn path."""

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        entropy = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(entropy))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    def fork(self, *key: int) -> "Rng":
        """An independent child stream; the same key always gives the same stream."""
        return Rng(self.seed, self.path + tuple(key))

    def normal(self, shape: Shape, dtype: Optional[type] = None) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype or get_default_dtype())

    def uniform(self, low: float, high: float, shape: Shape = (), dtype: Optional[type] = None) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype or get_default_dtype())

    def integers(self, low: int, high: int, shape: Shape = ()) -> np.ndarray:
        return self._gen.integers(low, high, shape)
