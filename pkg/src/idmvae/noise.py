"""Seeded sources of randomness.

Every stochastic draw in the package goes through a :class:`NoiseSource`, so
results are reproducible from a single seed and tests can swap in a source
that returns zeros.
"""

import torch


class NoiseSource:
    """Thin wrapper around a CPU ``torch.Generator``."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.generator = torch.Generator().manual_seed(self.seed)

    def normal(self, shape, dtype=torch.float32):
        return torch.randn(tuple(shape), generator=self.generator, dtype=dtype)

    def uniform(self, shape, dtype=torch.float32):
        return torch.rand(tuple(shape), generator=self.generator, dtype=dtype)

    def randint(self, high, shape):
        return torch.randint(high, tuple(shape), generator=self.generator)

    def permutation(self, n):
        return torch.randperm(n, generator=self.generator)

    def get_state(self):
        return self.generator.get_state()

    def set_state(self, state):
        self.generator.set_state(state)

    def spawn(self, offset):
        """Independent child source with a derived seed."""
        return NoiseSource(self.seed * 1_000_003 + int(offset))


class ZeroNoise(NoiseSource):
    """Returns zero Gaussian noise; index draws stay seeded.

    Useful for frozen fixtures where reparameterized samples must equal the
    posterior means exactly.
    """

    def normal(self, shape, dtype=torch.float32):
        return torch.zeros(tuple(shape), dtype=dtype)
