"""Counter-based SplitMix64 generator.

Draws depend only on ``(seed, counter)`` so sequences are reproducible across
platforms and languages. Arithmetic is done in wrapping ``uint64``.
"""

import numpy as np

from .geometry import quat_to_matrix

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO53 = float(1 << 53)


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Stateful wrapper around the SplitMix64 counter hash.

    >>> rng = SplitMix64(1)
    >>> rng.next_u64(2).dtype
    dtype('uint64')
    """

    def __init__(self, seed):
        self.state = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self, n):
        with np.errstate(over="ignore"):
            counters = np.arange(1, n + 1, dtype=np.uint64) * _GAMMA + self.state
            self.state = self.state + np.uint64(n) * _GAMMA
            return _mix(counters)

    def uniform(self, size=None, low=0.0, high=1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) / _TWO53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, scale=1.0):
        # Box-Muller on (0, 1] so log never sees zero
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = scale * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high, size=None):
        n = 1 if size is None else int(np.prod(size))
        v = (self.next_u64(n) % np.uint64(high)).astype(np.int64)
        return int(v[0]) if size is None else v.reshape(size)

    def permutation(self, n):
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def unit_vectors(self, n):
        v = self.normal((n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def rotations(self, n):
        """Uniformly distributed rotation matrices via unit quaternions."""
        q = self.normal((n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        return quat_to_matrix(q)

