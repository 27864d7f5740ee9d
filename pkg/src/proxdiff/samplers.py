"""Reverse-process step rules and chain drivers.

Score rules (explicit):
    SDE-Euler  X_{k-1} = X_k + g [X_k/2 + s(X_k, t_k)] + sqrt(g) xi
    ODE-Euler  X_{k-1} = X_k + g [X_k/2 + s(X_k, t_k)/2]
Proximal rules (implicit, prox evaluated at t_{k-1}):
    PDA        X_{k-1} = prox_{-(2g/(2-g)) ln p}((2/(2-g)) (X_k + sqrt(g) xi)),  g < 2
    PDA-hybrid X_{k-1} = prox_{-g ln p}((1 + g/2) X_k + sqrt(g) xi)

with g = gamma_k. ``score_fn(x, t, c)`` and ``prox_fn(x, t, lam, c)`` take and
return numpy arrays of shape (n, d); ``c=None`` is the null condition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ContractError, NumericError, StepSizeError
from .nets import prox_forward, score_forward
from .rng import STREAM_CHAIN_INIT, STREAM_CHAIN_STEP, CounterRNG
from .schedule import NoiseSchedule, TimeGrid
from .targets import ProxQuery, bruteforce_prox, oracle_score, prox_gaussian

SDE_EULER = "sde-euler"
ODE_EULER = "ode-euler"
PDA = "pda"
PDA_HYBRID = "pda-hybrid"
SCORE_RULES = (SDE_EULER, ODE_EULER)
PROX_RULES = (PDA, PDA_HYBRID)
ALL_RULES = SCORE_RULES + PROX_RULES


@dataclass(frozen=True)
class StepRule:
    tag: str = PDA_HYBRID
    omega: float = 0.0

    def __post_init__(self):
        if self.tag not in ALL_RULES:
            raise ArgumentError(f"unknown sampler {self.tag!r}; choose from {ALL_RULES}")
        if not self.omega >= -1:
            raise ArgumentError(f"guidance weight must be >= -1, got {self.omega}")

    @property
    def is_proximal(self):
        return self.tag in PROX_RULES


def _finite(x, k):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite iterate at step k={k}")
    return x


def score_cfg(score_fn, x, t, c, omega):
    """(1 + w) s(x, t, c) - w s(x, t, null)."""
    if omega == 0:
        return score_fn(x, t, c)
    if omega == -1:
        return score_fn(x, t, None)
    return (1 + omega) * score_fn(x, t, c) - omega * score_fn(x, t, None)


def prox_cfg(prox_fn, x, t, lam, c, omega):
    """Guided proximal map (1 + w) prox_c - w prox_null."""
    if omega == 0:
        return prox_fn(x, t, lam, c)
    if omega == -1:
        return prox_fn(x, t, lam, None)
    return (1 + omega) * prox_fn(x, t, lam, c) - omega * prox_fn(x, t, lam, None)


def sde_euler_step(x, k, grid: TimeGrid, score_fn, xi):
    g = grid.gamma(k)
    x = np.asarray(x, dtype=np.float64)
    s = score_fn(x, grid.t(k))
    return _finite(x + g * (0.5 * x + s) + math.sqrt(g) * np.asarray(xi), k)


def ode_euler_step(x, k, grid: TimeGrid, score_fn):
    g = grid.gamma(k)
    x = np.asarray(x, dtype=np.float64)
    s = score_fn(x, grid.t(k))
    return _finite(x + g * (0.5 * x + 0.5 * s), k)


def pda_weight(gamma: float) -> float:
    if not gamma < 2:
        raise StepSizeError(f"PDA needs gamma_k < 2, got {gamma}")
    return 2 * gamma / (2 - gamma)


def pda_step(x, k, grid: TimeGrid, prox_fn, xi):
    g = grid.gamma(k)
    lam = pda_weight(g)
    y = (2 / (2 - g)) * (np.asarray(x, dtype=np.float64) + math.sqrt(g) * np.asarray(xi))
    return _finite(prox_fn(y, grid.t(k - 1), lam), k)


def hybrid_input(x, g, xi):
    """(1 + g/2) x + sqrt(g) xi: the auxiliary variable Y."""
    return (1 + 0.5 * g) * np.asarray(x, dtype=np.float64) + math.sqrt(g) * np.asarray(xi)


def pda_hybrid_step(x, k, grid: TimeGrid, prox_fn, xi):
    g = grid.gamma(k)
    return _finite(prox_fn(hybrid_input(x, g, xi), grid.t(k - 1), g), k)


@dataclass(frozen=True)
class ChainRecord:
    """A batch of n sampler chains.

    ``states[k]`` (shape (n, d)) is Y_k for PDA-hybrid and X_k otherwise;
    ``noises[k]`` is xi_k (zeros where a step draws none) and ``init_noise``
    the standard normal behind the initial state.
    """
    rule: StepRule
    condition: object
    grid: TimeGrid
    states: np.ndarray
    noises: np.ndarray
    init_noise: np.ndarray
    seed: int
    chain_offset: int

    @property
    def final(self) -> np.ndarray:
        return self.states[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]


def chain_noise(seed: int, k: int, chain_offset: int, n: int, dim: int):
    return CounterRNG(seed).normal(STREAM_CHAIN_STEP, k, chain_offset, n, dim)


def chain_init_noise(seed: int, chain_offset: int, n: int, dim: int):
    return CounterRNG(seed).normal(STREAM_CHAIN_INIT, 0, chain_offset, n, dim)


def hybrid_y_chain(y_top, grid: TimeGrid, guided_prox, noises):
    """Y_{k-1} = (1 + g_{k-1}/2) f(Y_k) + sqrt(g_{k-1}) xi_{k-1} for k = K..2,
    then Y_0 = f(Y_1). ``guided_prox(y, k)`` applies f at step k."""
    K = grid.K
    states = np.zeros((K + 1,) + y_top.shape)
    states[K] = y_top
    for k in range(K, 1, -1):
        fx = _finite(guided_prox(states[k], k), k)
        states[k - 1] = hybrid_input(fx, grid.gamma(k - 1), noises[k - 1])
    states[0] = _finite(guided_prox(states[1], 1), 1)
    return states


def hybrid_x_chain(x_top, grid: TimeGrid, guided_prox, noises):
    """X_{k-1} = f((1 + g_k/2) X_k + sqrt(g_k) xi_k) for k = K..1."""
    states = np.zeros((grid.K + 1,) + x_top.shape)
    states[grid.K] = x_top
    for k in range(grid.K, 0, -1):
        states[k - 1] = _finite(
            guided_prox(hybrid_input(states[k], grid.gamma(k), noises[k]), k), k)
    return states


def run_chain(rule: StepRule, grid: TimeGrid, fn, c, seed: int, n: int = 1,
              dim: int | None = None, chain_offset: int = 0) -> ChainRecord:
    """Run ``n`` chains; chain i uses noise addressed by (seed, chain_offset + i, k).

    ``fn`` is a ``score_fn`` for score rules and a ``prox_fn`` for proximal
    ones; guidance with ``rule.omega`` is applied here.
    """
    if dim is None:
        dim = getattr(fn, "dim", None)
        if dim is None:
            raise ArgumentError("dimension unknown: pass dim=")
    K = grid.K
    z = chain_init_noise(seed, chain_offset, n, dim)
    noises = np.zeros((K + 1, n, dim))
    omega = rule.omega

    if rule.tag == PDA_HYBRID:
        for k in range(1, K):
            noises[k] = chain_noise(seed, k, chain_offset, n, dim)
        g_top = grid.gamma(K)
        y_top = math.sqrt((1 + 0.5 * g_top) ** 2 + g_top) * z

        def guided(y, k):
            return prox_cfg(fn, y, grid.t(k - 1), grid.gamma(k), c, omega)

        states = hybrid_y_chain(y_top, grid, guided, noises)
    else:
        states = np.zeros((K + 1, n, dim))
        states[K] = z
        for k in range(K, 0, -1):
            if rule.tag != ODE_EULER:
                noises[k] = chain_noise(seed, k, chain_offset, n, dim)
            if rule.tag == SDE_EULER:
                states[k - 1] = sde_euler_step(
                    states[k], k, grid, lambda x, t: score_cfg(fn, x, t, c, omega), noises[k])
            elif rule.tag == ODE_EULER:
                states[k - 1] = ode_euler_step(
                    states[k], k, grid, lambda x, t: score_cfg(fn, x, t, c, omega))
            else:
                states[k - 1] = pda_step(
                    states[k], k, grid, lambda x, t, lam: prox_cfg(fn, x, t, lam, c, omega),
                    noises[k])
    return ChainRecord(rule=rule, condition=c, grid=grid, states=states, noises=noises,
                       init_noise=z, seed=seed, chain_offset=chain_offset)


# --- adapters ---------------------------------------------------------------

class OracleScore:
    """Exact score of a mixture target as a ``score_fn``."""

    def __init__(self, target, schedule: NoiseSchedule):
        self.target, self.schedule, self.dim = target, schedule, target.dim

    def __call__(self, x, t, c):
        return oracle_score(self.target, c, np.atleast_2d(x), t, self.schedule)


class OracleGaussianProx:
    """Closed-form prox of a single-Gaussian-per-label target."""

    def __init__(self, target, schedule: NoiseSchedule):
        self.target, self.schedule, self.dim = target, schedule, target.dim

    def __call__(self, x, t, lam, c):
        return prox_gaussian(self.target, c, x, t, lam, self.schedule)


class BruteForceProx:
    """Multi-start numerical prox; optionally logs every (query, output)."""

    def __init__(self, target, schedule: NoiseSchedule, record: bool = False):
        self.target, self.schedule, self.dim = target, schedule, target.dim
        self.calls = [] if record else None

    def __call__(self, x, t, lam, c):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty_like(x)
        for i, xi in enumerate(x):
            q = ProxQuery(xi, t, lam, c)
            out[i] = bruteforce_prox(self.target, q, self.schedule)
            if self.calls is not None:
                self.calls.append((q, out[i].copy()))
        return out


class NetProx:
    """Wrap a trained ProxNet as a ``prox_fn``.

    When ``support`` (a set of (t, lam) pairs) is given, queries outside it
    are refused: the network was only trained on those pairs.
    """

    def __init__(self, net, support=None):
        self.net, self.dim = net, net.arch.dim
        self.support = None if support is None else {(round(t, 12), round(l, 12)) for t, l in support}

    def __call__(self, x, t, lam, c):
        if self.support is not None and (round(t, 12), round(lam, 12)) not in self.support:
            raise ContractError(f"(t={t}, lam={lam}) is not a trained (time, weight) pair")
        return prox_forward(self.net, np.atleast_2d(x), t, lam, c)


class NetScore:
    def __init__(self, net):
        self.net, self.dim = net, net.arch.dim

    def __call__(self, x, t, c):
        return score_forward(self.net, np.atleast_2d(x), t, c)
