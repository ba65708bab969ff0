"""Seeded, splittable random streams backed by numpy's Philox counter generator."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor

ALGORITHM = "philox4x64-10"


class RngStream:
    """A reproducible random stream identified by (seed, spawn path).

    ``draws`` counts the number of variates handed out, so reports can state
    exactly how much of a stream an experiment consumed.
    """

    algorithm = ALGORITHM

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))
        self.draws = 0

    def child(self, *index: int) -> "RngStream":
        """Independent stream derived from this one's identity and ``index``."""
        return RngStream(self.seed, self.path + tuple(index))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be non-negative, got {std}")
        z = self._gen.standard_normal(shape)
        self.draws += z.size
        return mean + std * z

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        u = self._gen.uniform(low, high, shape)
        self.draws += np.size(u)
        return u

    def exponential(self, shape, scale: float = 1.0) -> np.ndarray:
        e = self._gen.exponential(scale, shape)
        self.draws += e.size
        return e

    def chisquare(self, df: float, shape) -> np.ndarray:
        c = self._gen.chisquare(df, shape)
        self.draws += c.size
        return c

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        self.draws += size
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, low: int, high: int, size=None):
        out = self._gen.integers(low, high, size)
        self.draws += np.size(out)
        return out

    def describe(self) -> dict:
        return {"seed": self.seed, "path": list(self.path), "algorithm": self.algorithm,
                "draws": self.draws}


def sample_normal(rng: RngStream, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    return Tensor(rng.normal(shape, mean, std))
