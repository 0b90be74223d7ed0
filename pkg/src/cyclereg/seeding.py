"""Deterministic named substreams derived from a single run seed.

Every source of randomness in the package (weight init, augmentation,
batch sampling, phantom synthesis) derives its generator from the run
seed plus a stream name, so runs are bitwise reproducible and streams
are independent of each other's consumption order.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def substream_seed(base_seed: int, *names: object) -> int:
    """Derive a stable 31-bit seed for the named substream."""
    tag = "/".join(str(n) for n in names)
    digest = hashlib.sha256(f"{int(base_seed)}#{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def numpy_rng(base_seed: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(substream_seed(base_seed, *names))


def torch_generator(base_seed: int, *names: object) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream_seed(base_seed, *names))
    return gen
