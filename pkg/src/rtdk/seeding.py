"""Deterministic rng fan-out.

A single master seed is split into independent per-(component, variant, seed)
streams through hashed spawn keys, so parallel runs stay reproducible no
matter the execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _tag_key(tag) -> int:
    digest = hashlib.sha256(repr(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(master_seed: int, *tags) -> np.random.SeedSequence:
    """Child seed sequence for the stream identified by ``tags``."""
    return np.random.SeedSequence(entropy=master_seed,
                                  spawn_key=tuple(_tag_key(t) for t in tags))


def numpy_rng(master_seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master_seed, *tags))


def torch_generator(master_seed: int, *tags) -> torch.Generator:
    state = seed_sequence(master_seed, *tags).generate_state(2, dtype=np.uint64)
    gen = torch.Generator()
    gen.manual_seed(int(state[0] >> 1))  # manual_seed wants a non-negative int64
    return gen
