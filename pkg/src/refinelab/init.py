"""Weight distributions used at construction and for re-randomization.

All draws take an explicit :class:`~refinelab.rng.Stream` and return float32.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from refinelab.rng import Stream

# leaky-relu slope of the framework-default conv init
KAIMING_A = math.sqrt(5.0)


def _matrix_view(shape) -> tuple[int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ValueError(f"need at least a 2-D shape, got {shape}")
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    return rows, cols


def fan_in_of(shape) -> int:
    return _matrix_view(shape)[1]


def kaiming_bound(fan_in: int, a: float = KAIMING_A) -> float:
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    gain = math.sqrt(2.0 / (1.0 + a * a))
    return gain * math.sqrt(3.0 / fan_in)


def kaiming_uniform(shape, fan_in: int, stream: Stream) -> np.ndarray:
    """He-uniform with a=sqrt(5): U(-b, b), b = sqrt(1 / fan_in)."""
    b = kaiming_bound(fan_in)
    n = int(np.prod(shape))
    w = (-b + 2.0 * b * stream.random(n)).astype(np.float32)
    return w.reshape(shape)


def normal_init(shape, fan_in: int, stream: Stream) -> np.ndarray:
    """He-normal: N(0, 2 / fan_in)."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    sigma = math.sqrt(2.0 / fan_in)
    n = int(np.prod(shape))
    return (sigma * stream.normal(n)).astype(np.float32).reshape(shape)


def orthogonal_init(shape, stream: Stream) -> np.ndarray:
    """Semi-orthogonal weight: rows orthonormal if rows <= cols, else columns."""
    rows, cols = _matrix_view(shape)
    while True:
        flat = stream.normal(rows * cols).reshape(rows, cols)
        if rows < cols:
            flat = flat.T
        q, r = np.linalg.qr(flat)
        d = np.diag(r)
        if np.all(d != 0):
            break
    q = q * np.sign(d)
    if rows < cols:
        q = q.T
    return q.astype(np.float32).reshape(shape)


def sparse_init(shape, stream: Stream, sparsity: float = 0.2, std: float = 0.01) -> np.ndarray:
    """N(0, std^2) entries with ceil(sparsity * rows) zeros in every column."""
    if not 0.0 < sparsity < 1.0:
        raise ValueError("sparsity must lie in (0, 1)")
    rows, cols = _matrix_view(shape)
    w = std * stream.normal(rows * cols).reshape(rows, cols)
    # exact decimal arithmetic: 0.2 * 15 must give 3 zeros, not ceil(3.0000000000000004)
    zeros = math.ceil(Fraction(repr(sparsity)) * rows)
    for c in range(cols):
        w[stream.choice(rows, zeros), c] = 0.0
    return w.astype(np.float32).reshape(shape)
