"""Deterministic, forkable random streams.

Every stochastic operation in the package draws from an :class:`RngStream`
instead of global state. A stream is fully determined by ``(seed,
stream_id, path)``, so identical inputs replay identical draw sequences,
and distinct stream ids (or paths) give statistically independent streams.
Workers may therefore augment samples in parallel, one substream per
sample, without the result depending on scheduling order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _entropy(seed: int, stream_id: int, path: tuple[int, ...]) -> list[int]:
    return [int(x) & _MASK64 for x in (seed, stream_id, *path)]


class RngStream:
    """A named, seeded random stream backed by numpy's PCG64.

    ``substream(*ids)`` derives an independent child stream; the child is a
    pure function of the parent's identity and the ids, not of how many
    draws the parent has made.
    """

    def __init__(self, seed: int, stream_id: int = 0, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(_entropy(self.seed, self.stream_id, self.path))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(ids))

    # Thin pass-throughs. Augmentations and trainers only ever call these,
    # which keeps test doubles (forced draws) trivial to write.
    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high) like numpy's Generator.integers."""
        out = self._gen.integers(low, high, size)
        return int(out) if size is None else out

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self.path})"
