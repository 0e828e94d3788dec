"""Reproducible random streams.

All randomness derives from a single 64-bit seed. Independent streams are
addressed by a path of non-negative integers (for example ``(iteration,
episode)``) and backed by the counter-based Philox generator, so any stream
can be rebuilt without replaying the others.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream path components must be non-negative")
    return part


def stream(seed: int, *path) -> np.random.Generator:
    """Return the generator for ``path`` under ``seed``.

    String components are hashed, which keeps call sites readable:
    ``stream(seed, "eval", 12)``.
    """
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path) -> int:
    """A 64-bit child seed, for handing to code that only accepts an integer."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(_key(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
