"""Exact small-sample paired statistics."""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.stats import norm, rankdata

from .errors import DegenerateWarning, InvalidInputError

ALTERNATIVES = ("less", "greater", "two_sided")
EXACT_MAX_N = 25


def signed_rank_statistic(diffs) -> tuple[float, np.ndarray]:
    """``W+`` (sum of mid-ranks of positive differences) after dropping zeros.

    Returns ``(W+, ranks)`` where ``ranks`` are the mid-ranks of ``|d|`` over
    the non-zero differences.
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    return float(ranks[d > 0].sum()), ranks


def _exact_null_counts(ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of ``2 * W+``.

    Mid-ranks are half-integers, so doubling them makes the subset-sum
    recursion run over integers.  The table is the same one full enumeration
    of the ``2**n`` sign patterns would produce.
    """
    r2 = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(r2.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(diffs, alternative: str = "two_sided") -> float:
    """Paired Wilcoxon signed-rank p-value for ``diffs = a - b``.

    ``alternative="less"`` tests whether ``a`` tends to be smaller than ``b``.
    Zero differences are dropped and tied magnitudes get mid-ranks.  Up to
    25 non-zero differences the null distribution is exact; beyond that a
    normal approximation with tie and continuity corrections is used.
    """
    if alternative not in ALTERNATIVES:
        raise InvalidInputError(f"alternative must be one of {ALTERNATIVES}")
    w, ranks = signed_rank_statistic(diffs)
    n = ranks.size
    if n == 0:
        warnings.warn("all paired differences are zero; p = 1", DegenerateWarning, stacklevel=2)
        return 1.0
    if n <= EXACT_MAX_N:
        counts = _exact_null_counts(ranks)
        total = float(counts.sum())
        w2 = int(round(2 * w))
        p_less = counts[: w2 + 1].sum() / total
        p_greater = counts[w2:].sum() / total
    else:
        _, tie_sizes = np.unique(ranks, return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_sizes**3 - tie_sizes).sum() / 48.0
        sd = math.sqrt(var)
        p_less = float(norm.cdf((w - mean + 0.5) / sd))
        p_greater = float(norm.sf((w - mean - 0.5) / sd))
    if alternative == "less":
        return float(p_less)
    if alternative == "greater":
        return float(p_greater)
    return float(min(1.0, 2.0 * min(p_less, p_greater)))


def holm_correct(pvals) -> np.ndarray:
    """Holm step-down adjusted p-values, returned in the input order."""
    p = np.asarray(pvals, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise InvalidInputError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = np.minimum(1.0, (m - np.arange(m)) * p[order])
    adjusted = np.empty(m)
    adjusted[order] = np.maximum.accumulate(scaled)
    return adjusted


def spearman(x, y) -> float:
    """Pearson correlation of mid-ranks; NaN (with a warning) if either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise InvalidInputError("spearman needs two equal-length vectors of length >= 2")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        warnings.warn("zero rank variance; Spearman correlation undefined", DegenerateWarning, stacklevel=2)
        return float("nan")
    return float(rx @ ry) / denom
