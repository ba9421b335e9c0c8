"""Splittable counter-based random number generator.

Every random draw in the package (weight init, shuffling, dropout masks,
augmentation, synthetic data) goes through :class:`CounterRNG`.  Output word
``i`` of a stream is ``mix64(key + i * GOLDEN)``, the SplitMix64 output
function, so a stream is fully described by ``(key, counter)`` and the values
do not depend on the platform or the numpy version.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Scalar SplitMix64 finalizer on a Python int."""
    with np.errstate(over="ignore"):
        return int(_mix64(np.array([value & _MASK], dtype=np.uint64))[0])


def derive_seed(seed: int, *tags: int) -> int:
    """Fold integer tags into a seed, giving an independent sub-stream key.

    ``derive_seed(s, 1)`` and ``derive_seed(s, 2)`` are the two view streams
    used by :func:`dualssl.augment.dual_view`.
    """
    key = mix64(int(seed) & _MASK)
    for tag in tags:
        key = mix64(key ^ mix64((int(tag) + 0x9E3779B97F4A7C15) & _MASK))
    return key


class CounterRNG:
    """Random stream addressed by a 64-bit key and a 64-bit counter."""

    def __init__(self, seed: int = 0, counter: int = 0):
        self.key = int(seed) & _MASK
        self.counter = int(counter) & _MASK

    def __repr__(self):
        return f"CounterRNG(key={self.key:#x}, counter={self.counter})"

    def get_state(self) -> dict:
        return {"key": self.key, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "CounterRNG":
        return cls(state["key"], state["counter"])

    def split(self, *tags: int) -> "CounterRNG":
        """Child stream; does not advance this stream."""
        return CounterRNG(derive_seed(self.key, *tags))

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` 64-bit words."""
        idx = np.arange(n, dtype=np.uint64) + np.uint64(self.counter)
        self.counter = (self.counter + n) & _MASK
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.key) + idx * _GOLDEN)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        shape = () if size is None else size
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        out = low + (high - low) * u.reshape(shape)
        return float(out) if size is None else out

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        """Box-Muller normal draws."""
        shape = () if size is None else size
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        out = loc + scale * z.reshape(shape)
        return float(out) if size is None else out

    def truncated_normal(self, size, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal draws resampled until they fall within ``±bound·std``."""
        out = self.normal(size)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self.uniform(size) < p

    def integers(self, high: int, size=None):
        u = self.uniform(size)
        return (np.floor(np.asarray(u) * high)).astype(np.int64) if size is not None else int(u * high)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
