"""Seeded Philox (counter-based) generators and JSON-safe state."""
from __future__ import annotations

import numpy as np

SEED_MASK = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & SEED_MASK))


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit child seed that depends on ``seed`` and the integer ``keys``."""
    ss = np.random.SeedSequence(int(seed) & SEED_MASK, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__u64__": [int(v) for v in obj.reshape(-1)], "shape": list(obj.shape)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__u64__" in obj:
            return np.array(obj["__u64__"], dtype=np.uint64).reshape(obj["shape"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def rng_state(rng: np.random.Generator) -> dict:
    return _jsonable(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = _from_jsonable(state)
    return np.random.Generator(bg)
