"""Seeded random streams with hierarchical sub-seeding.

One generator algorithm is used everywhere: numpy's Philox 4x64, a
counter-based generator. A stream is identified by (seed, path), where
path is a tuple of non-negative integers fed to ``SeedSequence`` as the
spawn key. String path components are mapped to integers with CRC-32, so
``rng.child(2, "negatives")`` names the same stream in every run of one
build. Streams with distinct paths are statistically independent, which
lets e.g. module 2's negative sampling consume randomness without
perturbing module 1's stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def _path_part(part) -> int:
    if isinstance(part, bool):
        raise TypeError("rng path parts must be ints or strings, not bool")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"rng path part must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"rng path parts must be ints or strings, got {type(part).__name__}")


class SeededRng:
    """A Philox-backed random stream addressed by (seed, path)."""

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._gen = None

    def child(self, *parts) -> "SeededRng":
        """Derive an independent stream for a sub-purpose, e.g. child(m, 'init')."""
        return SeededRng(self.seed, self.path + tuple(_path_part(p) for p in parts))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high), matching numpy's half-open convention."""
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path})"
