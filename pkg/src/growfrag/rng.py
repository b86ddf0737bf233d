"""Reproducible random streams.

Every stochastic routine draws from a counter-based Philox stream keyed by
``(master seed, module tag, batch index, round)``.  Batches are therefore
independent of worker count and scheduling order, which is what makes
1-worker and N-worker runs bit-identical after an order-independent merge.

Both kernel backends consume the *same* underlying bit generator: the
pure-Python path draws doubles one at a time through
``numpy.random.Generator.random()`` and the compiled path calls the bit
generator's ``next_double`` directly, so given equal seeds the two produce
bit-identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.random import Generator, Philox, SeedSequence


def tag_to_int(tag: str) -> int:
    """Stable 64-bit integer for a module tag string."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """A single Philox stream plus scalar-draw helpers.

    The scalar helpers exist so that the pure-Python kernels consume draws
    in exactly the order the compiled kernels do; vectorised draws would
    break that equivalence.
    """

    def __init__(self, seed: int, tag: str, batch: int = 0, round_: int = 0):
        self.key = (int(seed), tag, int(batch), int(round_))
        self.bitgen = Philox(SeedSequence((int(seed), tag_to_int(tag), int(batch), int(round_))))
        self.generator = Generator(self.bitgen)

    def uniform(self) -> float:
        """One double in [0, 1): a single next_double call."""
        return self.generator.random()

    def exponential(self, rate: float) -> float:
        """Inverse-CDF exponential; consumes exactly one uniform."""
        return -np.log1p(-self.generator.random()) / rate

    def __repr__(self):
        return f"RngStream{self.key}"


def stream(seed: int, tag: str, batch: int = 0, round_: int = 0) -> RngStream:
    return RngStream(seed, tag, batch, round_)


def split_batches(n: int, batch_size: int) -> list[int]:
    """Sizes of consecutive batches covering ``n`` items."""
    if n <= 0:
        return []
    full, rem = divmod(n, batch_size)
    sizes = [batch_size] * full
    if rem:
        sizes.append(rem)
    return sizes
