"""Norm-scaled stochastic uniform quantizer.

Each coordinate of ``y`` is mapped to ``||y|| * sign(y_i) * xi_i / s`` where
``xi_i`` is ``floor(s |y_i| / ||y||)`` or one more, chosen at random so that the
output is unbiased. ``s = inf`` disables quantization.
"""

from __future__ import annotations

import math

import numpy as np

NO_QUANTIZATION = math.inf
NORM_BITS = 32  # the transmitted norm


def is_unquantized(s) -> bool:
    return s is None or (isinstance(s, float) and math.isinf(s))


def variance_factor(s, dim: int) -> float:
    """Bound ``q_s`` with ``E||Q(y) - y||^2 <= q_s ||y||^2``."""
    if is_unquantized(s):
        return 0.0
    return min(dim / s ** 2, math.sqrt(dim) / s)


def message_bits(s, dim: int) -> int:
    """Bits per quantized vector: the norm, plus a sign and a level index per coordinate."""
    if is_unquantized(s):
        return 64 * dim
    return NORM_BITS + dim * (1 + math.ceil(math.log2(s + 1)))


class Quantizer:
    """Random quantizer with ``s`` levels per unit norm."""

    def __init__(self, s):
        if not is_unquantized(s):
            if int(s) != s or s < 1:
                raise ValueError(f"quantization parameter must be a positive integer or inf, got {s!r}")
            s = int(s)
        self.s = NO_QUANTIZATION if is_unquantized(s) else s

    def variance_factor(self, dim: int) -> float:
        return variance_factor(self.s, dim)

    def bits(self, dim: int) -> int:
        return message_bits(self.s, dim)

    def quantize(self, y: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        y = np.asarray(y, dtype=float)
        bits = self.bits(y.size)
        if is_unquantized(self.s):
            return y.copy(), bits
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            return np.zeros_like(y), bits
        level = np.abs(y) / norm * self.s
        low = np.floor(level)
        up = rng.random(y.shape) < (level - low)
        xi = low + up
        return norm * np.sign(y) * xi / self.s, bits
