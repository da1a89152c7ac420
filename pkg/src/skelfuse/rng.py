"""Counter-based deterministic random number generator (SplitMix64).

Every draw is a pure function of (seed, counter), so the full state is two
integers and identical seeds give bit-identical sequences on any platform:
the generator uses only unsigned 64-bit integer mixing, never libm.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Seeded stream of uniforms, integers and permutations."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    @classmethod
    def from_state(cls, state) -> "Rng":
        seed, counter = state
        return cls(seed, counter)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _splitmix((np.uint64(self.seed) + idx * _GOLDEN) & _MASK)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        """float32 uniforms in [low, high), computed from 53-bit draws."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = (low + (high - low) * u).astype(np.float32)
        return out.reshape(shape) if shape else out[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high). Modulo bias is negligible for our ranges."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        span = np.uint64(high - low)
        vals = (self._raw(n) % span).astype(np.int64) + low
        return vals.reshape(shape) if shape else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        draws = self._raw(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def shuffle(self, items: list) -> None:
        perm = self.permutation(len(items))
        items[:] = [items[int(p)] for p in perm]

    def fork(self, stream: int) -> "Rng":
        """Independent child stream, e.g. one per sample."""
        with np.errstate(over="ignore"):
            child = _splitmix(np.uint64(self.seed) ^ ((np.uint64(stream) + np.uint64(1)) * _GOLDEN))
        return Rng(int(child))
