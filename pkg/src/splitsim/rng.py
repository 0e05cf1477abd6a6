"""Deterministic random-stream derivation.

Every source of randomness in a run is drawn from a named stream derived
from a base seed, so independent components (protocol data order, model
init, attacker sampling, dropout masks) never share state. Two runs with
the same base seed consume identical streams; adding or removing a
consumer of one stream cannot perturb any other.
"""

import hashlib

import torch

_MASK = (1 << 63) - 1


def derive_seed(base_seed: int, tag: str) -> int:
    """Map (base seed, stream tag) to a stable 63-bit seed."""
    digest = hashlib.sha256(f"{base_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & _MASK


def stream(base_seed: int, tag: str) -> torch.Generator:
    """A fresh CPU generator seeded for the named stream."""
    gen = torch.Generator()
    gen.manual_seed(derive_seed(base_seed, tag))
    return gen
