"""Pearson, Spearman and Kendall correlations.

A sample whose standard deviation falls below ``DEGENERATE_STD`` has no
defined correlation; every function here reports 0 for it instead of NaN.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

DEGENERATE_STD = 1e-8


def _pair(xs, ys):
    x = np.asarray(xs, dtype=float).ravel()
    y = np.asarray(ys, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    return x, y


def is_degenerate(v) -> bool:
    return float(np.std(v, ddof=1)) < DEGENERATE_STD


def pearson(xs, ys) -> float:
    x, y = _pair(xs, ys)
    if is_degenerate(x) or is_degenerate(y):
        return 0.0
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(xc @ yc / np.sqrt((xc @ xc) * (yc @ yc)))
    return min(1.0, max(-1.0, r))


def pearson_grad(xs, ys):
    """(rho, d rho / d xs).  Zero gradient for degenerate samples."""
    x, y = _pair(xs, ys)
    if is_degenerate(x) or is_degenerate(y):
        return 0.0, np.zeros_like(x)
    xc = x - x.mean()
    yc = y - y.mean()
    nx = np.sqrt(xc @ xc)
    ny = np.sqrt(yc @ yc)
    rho = float(xc @ yc / (nx * ny))
    # centring is absorbed: both terms already sum to zero
    grad = yc / (nx * ny) - rho * xc / (nx * nx)
    return rho, grad


def spearman(xs, ys) -> float:
    """Rank-difference formula on average ranks.

    With ties the formula is no longer identical to Pearson on ranks; it is
    kept as is for consistency with the reported statistic.
    """
    x, y = _pair(xs, ys)
    if is_degenerate(x) or is_degenerate(y):
        return 0.0
    n = x.size
    d = rankdata(x) - rankdata(y)
    return float(1.0 - 6.0 * (d @ d) / (n * (n * n - 1)))


def kendall(xs, ys) -> float:
    """tau-a over all pairs, O(n^2)."""
    x, y = _pair(xs, ys)
    if is_degenerate(x) or is_degenerate(y):
        return 0.0
    n = x.size
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    s = np.triu(sx * sy, k=1).sum()
    return float(2.0 * s / (n * (n - 1)))


@dataclass(frozen=True)
class CorrelationReport:
    pearson: float
    spearman: float
    kendall: float

    def as_dict(self):
        return {"pearson": self.pearson, "spearman": self.spearman, "kendall": self.kendall}

    def max_abs(self) -> float:
        return max(abs(self.pearson), abs(self.spearman), abs(self.kendall))


def correlation_report(xs, ys) -> CorrelationReport:
    return CorrelationReport(pearson(xs, ys), spearman(xs, ys), kendall(xs, ys))
