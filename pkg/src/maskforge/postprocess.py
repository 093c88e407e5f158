"""Mask post-filtering and the classical subtraction baseline.

The validity filter drops degenerate masks: more than 70% white (tamper would
dominate the frame) or less than 1% white (nothing localized). Both boundaries
are *inclusive* for validity and are evaluated in integer arithmetic so a mask
at exactly 70% or 1% never flips verdict due to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import WHITE, _as_binary

MAX_WHITE_PERCENT = 70
MIN_WHITE_PERCENT = 1
BASELINE_THRESHOLD = 30


def white_fraction(mask: np.ndarray) -> float:
    """Fraction of white pixels in a {0,255} mask."""
    m = _as_binary(mask, "mask")
    if m.size == 0:
        raise ValueError("empty mask")
    return int(np.count_nonzero(m)) / m.size


@dataclass(frozen=True)
class FilterVerdict:
    valid: bool
    fraction: float
    reason: str | None = None  # "too_white" | "too_empty" when invalid


def filter_valid(mask: np.ndarray) -> FilterVerdict:
    """Accept masks with white fraction in [0.01, 0.70] (inclusive ends).

    Comparisons are cross-multiplied integers: invalid iff
    white*100 > total*70 (too_white) or white*100 < total*1 (too_empty).
    """
    m = _as_binary(mask, "mask")
    if m.size == 0:
        raise ValueError("empty mask")
    white = int(np.count_nonzero(m))
    total = int(m.size)
    frac = white / total
    if white * 100 > total * MAX_WHITE_PERCENT:
        return FilterVerdict(False, frac, "too_white")
    if white * 100 < total * MIN_WHITE_PERCENT:
        return FilterVerdict(False, frac, "too_empty")
    return FilterVerdict(True, frac)


def baseline_subtract(pair, threshold: int = BASELINE_THRESHOLD) -> np.ndarray:
    """Channelwise absolute-difference baseline.

    A pixel is white iff max over RGB of |original - tampered| >= threshold.
    Integer arithmetic end to end; identical inputs give an all-black mask
    (which the validity filter then rejects as too_empty).
    """
    orig = np.asarray(pair.original, dtype=np.int16)
    tamp = np.asarray(pair.tampered, dtype=np.int16)
    if orig.shape != tamp.shape:
        raise ValueError(f"pair shape mismatch: {orig.shape} vs {tamp.shape}")
    if orig.ndim != 3 or orig.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) images, got {orig.shape}")
    if not 0 <= threshold <= 255:
        raise ValueError(f"threshold must be in [0, 255], got {threshold}")
    diff = np.abs(orig - tamp).max(axis=2)
    return np.where(diff >= threshold, WHITE, 0).astype(np.uint8)
