"""Seed fan-out.

A master seed is split into independent named streams with
``numpy.random.SeedSequence``. Stream ``name`` uses the spawn key
``(STREAMS[name], *extra)`` so adding a stream never perturbs the others.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "population": 0,
    "shocks": 1,
    "learner": 2,
    "outer": 3,
    "evaluation": 4,
    "torch": 5,
}


def stream(master_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return the generator for stream ``name`` (optionally sub-keyed)."""
    key = (STREAMS[name], *extra)
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))


def stream_seed(master_seed: int, name: str, *extra: int) -> int:
    """A 63-bit integer seed for libraries that take plain ints (torch)."""
    key = (STREAMS[name], *extra)
    ss = np.random.SeedSequence(master_seed, spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def set_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state
