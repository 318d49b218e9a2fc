"""Deterministic random-stream derivation.

Every stochastic routine in the package receives either a live numpy
Generator or an integer master seed plus a structural path (placement
index, pass name, block index, ...).  Streams are derived with
SeedSequence spawn keys so that

* the same master seed reproduces every draw bit-exactly, and
* results do not depend on how work is split across workers, because
  the stream attached to a unit of work is a function of the work's
  identity, never of the worker that happens to run it.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Fixed pool size keeps derived states stable across numpy versions that
# change the default.
_POOL_SIZE = 4


def _key_part(part) -> int:
    """Map one path component to a 32-bit integer for a spawn key."""
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path components must be nonnegative, got {part}")
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little")
    raise TypeError(f"stream path component must be int or str, got {type(part)!r}")


def seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    """SeedSequence for the stream identified by (master_seed, *path)."""
    key = tuple(_key_part(p) for p in path)
    return np.random.SeedSequence(master_seed, spawn_key=key, pool_size=_POOL_SIZE)


def substream(master_seed: int, *path) -> np.random.Generator:
    """Independent Generator for the stream identified by (master_seed, *path)."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *path)))


def complex_normal(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """Circularly symmetric complex Gaussian draws with the given total variance.

    Real and imaginary parts each carry var/2 so that E|x|^2 = var.
    """
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    flat = rng.standard_normal(tuple(shape) + (2,))
    out = flat.view(np.complex128)[..., 0]
    if var != 1.0:
        out *= np.sqrt(var / 2.0)
    else:
        out *= np.sqrt(0.5)
    return out
