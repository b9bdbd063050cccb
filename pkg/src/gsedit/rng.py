"""Seed derivation: one root seed fans out into named, independent substreams.

Every random draw in the package flows through here so that a single config
seed pins down selector training, optimizer densification, and grid-view
sampling independently of each other.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *names: str | int) -> int:
    """Stable 63-bit seed for the substream identified by ``names``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest(), "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(root: int, *names: str | int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root, *names))
    return gen


def numpy_generator(root: int, *names: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
