"""Seeded random streams.

Every random draw in the package goes through :func:`generator`, which builds a
counter-based Philox generator from an explicit integer seed plus an optional
path of stream labels.  Two calls with the same ``(seed, *stream)`` return
generators producing identical sequences, independent of call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream labels must be non-negative")
    return part


def generator(seed: int, *stream: int | str) -> np.random.Generator:
    """Return a Philox generator for ``seed`` and the given substream path."""
    if seed is None:
        raise ValueError("an explicit seed is required")
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    entropy = [seed] + [_label(p) for p in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0


def derive_seed(seed: int, *stream: int | str) -> int:
    """An integer seed for a named sub-experiment (e.g. one trial of a study)."""
    return int(generator(seed, "derive", *stream).integers(0, 2**63 - 1))
