"""Sample-quality metrics."""
from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import norm

from .errors import ArgumentError

MAX_POINTS = 10_000
_CHUNK = 2048


def _mean_pairwise(a, b, exclude_diagonal=False):
    total = 0.0
    for i in range(0, len(a), _CHUNK):
        total += cdist(a[i:i + _CHUNK], b).sum()
    n, m = len(a), len(b)
    return total / (n * (m - 1)) if exclude_diagonal else total / (n * m)


def _subsample(x, cap, seed):
    if len(x) <= cap:
        return x
    idx = np.random.default_rng(seed).choice(len(x), size=cap, replace=False)
    return x[np.sort(idx)]


def energy_distance(x, y, unbiased: bool = True, max_points: int = MAX_POINTS, seed: int = 0) -> float:
    """2 E|X - Y| - E|X - X'| - E|Y - Y'| estimated from two samples.

    The unbiased (U-statistic) form drops self-pairs from the within-sample
    terms and can be slightly negative; ``unbiased=False`` gives the
    nonnegative V-statistic. Samples larger than ``max_points`` are
    subsampled deterministically from ``seed``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ArgumentError(f"incompatible sample shapes {x.shape} and {y.shape}")
    if len(x) < 2 or len(y) < 2:
        raise ArgumentError("energy distance needs at least two points per sample")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ArgumentError("samples contain non-finite values")
    x = _subsample(x, max_points, seed)
    y = _subsample(y, max_points, seed + 1)
    xy = _mean_pairwise(x, y)
    xx = _mean_pairwise(x, x, exclude_diagonal=unbiased)
    yy = _mean_pairwise(y, y, exclude_diagonal=unbiased)
    return float(2 * xy - xx - yy)


def gaussian_energy_distance_1d(m1, s1, m2, s2) -> float:
    """Closed-form energy distance between N(m1, s1^2) and N(m2, s2^2)."""
    def e_abs(mu, sd):
        # E|Z| for Z ~ N(mu, sd^2)
        return sd * np.sqrt(2 / np.pi) * np.exp(-mu ** 2 / (2 * sd ** 2)) + mu * (1 - 2 * norm.cdf(-mu / sd))

    return float(2 * e_abs(m1 - m2, np.hypot(s1, s2)) - e_abs(0.0, np.sqrt(2) * s1)
                 - e_abs(0.0, np.sqrt(2) * s2))
