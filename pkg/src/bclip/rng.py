"""Counter-based SplitMix64 generator.

Draw ``i`` of a stream is ``mix(key + i * GOLDEN)``, so the integer sequence
is a pure function of (seed, counter) and identical on every platform. Float
draws use the top 53 bits. Streams can be derived for shards or steps with
``spawn`` without touching the parent's counter.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def _mix_int(x: int) -> int:
    return int(_mix(np.array([x & _MASK], dtype=np.uint64))[0])


class Rng:
    def __init__(self, seed: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK
        self._key = np.uint64(_mix_int(self.seed))
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["counter"])

    def spawn(self, *keys: int) -> "Rng":
        """Independent child stream keyed by integers (e.g. shard, step)."""
        s = self.seed
        for k in keys:
            s = _mix_int(s ^ _mix_int(int(k) + 0x632BE59BD9B4E019))
        return Rng(s)

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _mix(self._key + idx * _GOLDEN)

    def random(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return float(u[0]) if size is None else u.reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        if high < 1:
            raise ValueError("high must be positive")
        u = self.random(1 if size is None else size)
        out = np.minimum(np.floor(np.asarray(u) * high).astype(np.int64), high - 1)
        return int(out.reshape(-1)[0]) if size is None else out

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        u1 = self.random(n)
        u2 = self.random(n)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        return (r * np.cos(2.0 * np.pi * u2)).reshape(size)

    def truncated_normal(self, size, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal draws redrawn until |z| <= bound, scaled by std."""
        z = self.normal(size).reshape(-1)
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self.normal(int(bad.sum()))
            bad = np.abs(z) > bound
        return (z * std).reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.bits(n), kind="stable")

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        if replace:
            return self.integers(n, size=k)
        if k > n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        return self.permutation(n)[:k]
