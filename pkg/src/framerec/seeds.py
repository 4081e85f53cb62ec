"""Deterministic seed derivation for named random streams.

One master seed fans out to independent sub-streams (model init, batch
shuffling, diffusion noise, synthetic data, per-user evaluation chains), so
perturbing one component never shifts the draws of another.
"""

import hashlib

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(master_seed: int, *labels) -> int:
    """Hash (master_seed, *labels) into a stable 63-bit child seed."""
    key = repr((int(master_seed),) + tuple(labels)).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))
