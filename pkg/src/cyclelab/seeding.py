"""Counter-based seed derivation.

Every stochastic component in this package draws from a generator whose seed
is mixed from a master seed plus a tuple of tags (purpose string, indices).
Streams are therefore independent of each other's consumption order, which is
what makes checkpoint resume and parallel evaluation bit-exact.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_U64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _U64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


def derive_seed(master: int, *tags: int | str) -> int:
    """Mix a master seed and a tag tuple into a fresh 64-bit seed.

    String tags are hashed (sha256) so purposes like "noise_a" and "coin_b"
    land in unrelated streams; integer tags advance a splitmix64 counter.
    """
    s = master & _U64
    for tag in tags:
        if isinstance(tag, str):
            h = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
            s = _splitmix64(s ^ h)
        else:
            s = _splitmix64(s ^ (int(tag) & _U64))
    return s


def torch_gen(master: int, *tags: int | str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(master, *tags) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


def numpy_gen(master: int, *tags: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *tags)))
