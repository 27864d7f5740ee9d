"""Forward-process schedule, time grids and forward-marginal sampling.

The forward process is the variance-preserving OU SDE

    dX_t = -1/2 beta(t) X_t dt + sqrt(beta(t)) dW_t,   t in [0, 1]

with a linear ``beta``. Its marginal at time t is
``sqrt(alpha_t) X_0 + sqrt(1 - alpha_t) xi`` where
``alpha_t = exp(-int_0^t beta(s) ds)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DomainError

DEFAULT_BETA_MIN = 0.1
DEFAULT_BETA_MAX = 20.0
DEFAULT_T_MIN = 1e-3


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX

    def __post_init__(self):
        if not (0 < self.beta_min <= self.beta_max) or not np.isfinite(self.beta_max):
            raise ArgumentError(
                f"need 0 < beta_min <= beta_max, got {self.beta_min}, {self.beta_max}")


def _check_time(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"time must lie in [0, 1], got {t}")
    return arr


def _scalar_or_array(arr):
    return float(arr) if arr.ndim == 0 else arr


def beta_at(schedule: NoiseSchedule, t):
    arr = _check_time(t)
    return _scalar_or_array(schedule.beta_min + (schedule.beta_max - schedule.beta_min) * arr)


def integrated_beta(schedule: NoiseSchedule, t):
    arr = _check_time(t)
    return _scalar_or_array(
        schedule.beta_min * arr + 0.5 * (schedule.beta_max - schedule.beta_min) * arr * arr)


def alpha_at(schedule: NoiseSchedule, t):
    """Signal fraction ``alpha_t``; 1 at t=0, strictly decreasing."""
    return _scalar_or_array(np.exp(-np.asarray(integrated_beta(schedule, t))))


@dataclass(frozen=True)
class TimeGrid:
    """Discretization ``t_0 < t_1 < ... < t_K = 1``.

    ``times[k]`` is t_k. ``gammas[k - 1]`` is gamma_k, the beta-scaled size of
    the step that moves the sampler from t_k down to t_{k-1}. Sampling
    iterates k = K, ..., 1.
    """
    K: int
    times: tuple
    gammas: tuple

    def t(self, k: int) -> float:
        return self.times[k]

    def gamma(self, k: int) -> float:
        if not 1 <= k <= self.K:
            raise ArgumentError(f"step index {k} outside 1..{self.K}")
        return self.gammas[k - 1]

    def pairs(self):
        """``(t_{k-1}, gamma_k)`` for k = 1..K: the (time, weight) queried by proximal steps."""
        return [(self.times[k - 1], self.gammas[k - 1]) for k in range(1, self.K + 1)]


def make_time_grid(schedule: NoiseSchedule, K: int, t_min: float = DEFAULT_T_MIN) -> TimeGrid:
    """Uniform-in-t grid from ``t_min`` to 1 with ``K`` steps.

    ``t_min = 0`` is accepted for oracle use; learned models should keep the
    default positive value to stay away from the t=0 singularity.
    """
    if int(K) != K or K < 1:
        raise ArgumentError(f"K must be a positive integer, got {K}")
    if not (0.0 <= t_min < 1.0):
        raise ArgumentError(f"t_min must lie in [0, 1), got {t_min}")
    K = int(K)
    times = tuple(float(t_min + (k / K) * (1.0 - t_min)) for k in range(K + 1))
    times = times[:-1] + (1.0,)
    gammas = tuple(float(beta_at(schedule, times[k]) * (times[k] - times[k - 1]))
                   for k in range(1, K + 1))
    return TimeGrid(K=K, times=times, gammas=gammas)


def forward_marginal(x0, t: float, noise, schedule: NoiseSchedule):
    """Sample of X_t given X_0 = ``x0`` and a standard-normal ``noise``.

    ``t`` may be a scalar or an array broadcastable against the leading batch
    axis of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ArgumentError(f"x0 shape {x0.shape} does not match noise shape {noise.shape}")
    alpha = np.asarray(alpha_at(schedule, t))
    if alpha.ndim == 1 and x0.ndim == 2:
        alpha = alpha[:, None]
    return np.sqrt(alpha) * x0 + np.sqrt(1.0 - alpha) * noise
