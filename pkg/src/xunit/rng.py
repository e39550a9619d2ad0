"""Seedable, platform-independent random streams.

Bits come from PCG64 (``numpy.random.PCG64``) seeded through a
``SeedSequence``; both are specified algorithms whose raw output does not
depend on the platform.  Uniforms are built from the top 53 bits of each
64-bit word and Gaussians by Box-Muller, so nothing relies on numpy's
distribution samplers, whose output may change between releases.
"""

import numpy as np

_TWO_POW_M53 = 2.0 ** -53


class PortableRNG:
    """A random stream identified by ``seed`` and an optional integer key path.

    Streams with different keys are statistically independent, which lets
    each worker, epoch, or step derive its own sub-stream deterministically.
    """

    def __init__(self, seed, *key):
        if int(seed) < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._bits = np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key))

    def child(self, *key):
        return PortableRNG(self.seed, *self.key, *key)

    def uniform(self, size):
        raw = self._bits.random_raw(int(np.prod(size)))
        return ((raw >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53).reshape(size)

    def normal(self, size, dtype=np.float64):
        count = int(np.prod(size))
        half = (count + 1) // 2
        u1 = 1.0 - self.uniform(half)  # (0, 1], keeps log finite
        u2 = self.uniform(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:count]
        return z.reshape(size).astype(dtype, copy=False)

    def integers(self, high, size=None):
        """Integers in ``[0, high)``."""
        n = 1 if size is None else size
        out = np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)
        return int(out[0]) if size is None else out

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")
