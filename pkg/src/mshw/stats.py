"""Small statistical helpers shared by the harness and the tests."""
from __future__ import annotations

import numpy as np
from scipy import stats


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic, ignoring NaNs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = a[~np.isnan(a)], b[~np.isnan(b)]
    return float(stats.ks_2samp(a, b).statistic)


def ks_pvalue(a, b) -> float:
    return float(stats.ks_2samp(np.asarray(a, float), np.asarray(b, float)).pvalue)


def ks_critical(n1: int, n2: int, level: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value ``c(level) sqrt((n1+n2)/(n1 n2))``."""
    c = np.sqrt(-0.5 * np.log(level / 2.0))
    return float(c * np.sqrt((n1 + n2) / (n1 * n2)))


def decreasing_pairs(values) -> tuple[int, int]:
    """``(number of pairs i < j with values[j] < values[i], number of pairs)``."""
    v = list(values)
    pairs = [(i, j) for i in range(len(v)) for j in range(i + 1, len(v))]
    return sum(v[j] < v[i] for i, j in pairs), len(pairs)


def nonincreasing(values, slack: float = 0.0) -> bool:
    v = np.asarray(values, dtype=float)
    return bool((np.diff(v) <= slack).all())


def strictly_decreasing(values) -> bool:
    v = np.asarray(values, dtype=float)
    return bool((np.diff(v) < 0).all())


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def batch_means_se(x, batches: int = 50) -> tuple[float, float]:
    """Mean and standard error of a correlated series by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    m = x.size // batches
    means = x[: m * batches].reshape(batches, m).mean(axis=1)
    return float(x.mean()), float(means.std(ddof=1) / np.sqrt(batches))
