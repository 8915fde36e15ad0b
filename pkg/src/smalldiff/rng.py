"""Counter-based random streams.

All randomness in the package flows through Philox streams keyed by
``(seed, stream)``, so replicate-level parallelism is order-independent and
every result is reproducible from a single seed.  Normal variates are
produced by applying the inverse normal CDF to uniforms built from raw
53-bit draws, which keeps the byte stream identical across platforms.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

__all__ = ["stream", "standard_normals", "uniforms"]

_U64 = (1 << 64) - 1

# Fixed stream offsets for internal consumers; replicate streams use
# REPLICATE_BASE + index so they never collide with utility draws.
REPLICATE_BASE = 1
NULL_MC_STREAM = 1 << 40
MULTISTART_STREAM = 1 << 41
GLOBALINIT_STREAM = 1 << 42


def stream(seed: int, stream_id: int = 0) -> Generator:
    """Philox generator for sub-stream ``stream_id`` of ``seed``."""
    key = (int(seed) & _U64) | ((int(stream_id) & _U64) << 64)
    return Generator(Philox(key=key))


def _open_uniforms(gen: Generator, size) -> np.ndarray:
    # (k + 0.5) / 2^53 lies strictly inside (0, 1), so ndtri stays finite.
    k = gen.integers(0, 1 << 53, size=size, dtype=np.uint64)
    return (k.astype(np.float64) + 0.5) * (2.0 ** -53)


def uniforms(seed: int, stream_id: int, size) -> np.ndarray:
    """Uniform draws in (0, 1) from the given stream."""
    return _open_uniforms(stream(seed, stream_id), size)


def standard_normals(seed: int, stream_id: int, size) -> np.ndarray:
    """Standard normal draws via inverse CDF from the given stream."""
    return ndtri(uniforms(seed, stream_id, size))
