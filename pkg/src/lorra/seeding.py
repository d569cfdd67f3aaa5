"""Named seed derivation.

Every random stream in the package is derived from one root seed and a
component name, so adding a new consumer never shifts an existing stream.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *names: object) -> int:
    key = ":".join([str(int(root))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng(root: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))


def torch_generator(root: int, *names: object) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *names))
    return g
