"""Named, checkpointable random streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np
import torch


def child_seed(root: int, *tags: str | int) -> int:
    """Stable derived seed for a named stream."""
    key = tuple(
        zlib.crc32(str(t).encode()) if isinstance(t, str) else int(t) for t in tags
    )
    ss = np.random.SeedSequence(entropy=root, spawn_key=key)
    return int(ss.generate_state(1)[0])


def numpy_rng(root: int, *tags) -> np.random.Generator:
    return np.random.default_rng(child_seed(root, *tags))


def torch_generator(root: int, *tags) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(child_seed(root, *tags))
    return gen
