"""Conditional Gaussian-mixture targets with exact time-t scores and proxes.

Under the OU forward process a mixture of isotropic Gaussians stays a
mixture: component ``(w, mu, s2)`` becomes ``(w, sqrt(a) mu, a s2 + 1 - a)``
with ``a = alpha_t``. Everything here is computed in float64 and serves as
ground truth for the learned models.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, OracleFailure, UnsupportedError
from .schedule import NoiseSchedule, alpha_at

NULL = None  # the unconditional token


@dataclass(frozen=True)
class Component:
    weight: float
    mean: tuple
    sigma2: float


@dataclass(frozen=True)
class MixtureTarget:
    """Per-label mixtures of isotropic Gaussians.

    ``components[c]`` lists the components of p_data(. | c). The
    unconditional distribution is the equal-weight mixture over labels.
    """
    dim: int
    components: tuple  # tuple over labels of tuple[Component]

    def __post_init__(self):
        if self.dim < 1 or not self.components:
            raise ArgumentError("target needs dim >= 1 and at least one label")
        for c, comps in enumerate(self.components):
            if not comps:
                raise ArgumentError(f"label {c} has no components")
            ws = np.array([k.weight for k in comps])
            if np.any(ws < 0) or abs(ws.sum() - 1.0) > 1e-12:
                raise ArgumentError(f"weights of label {c} must be nonnegative and sum to 1")
            for k in comps:
                if len(k.mean) != self.dim or not np.all(np.isfinite(k.mean)):
                    raise ArgumentError(f"bad mean {k.mean} for label {c}")
                if not k.sigma2 > 0:
                    raise ArgumentError(f"sigma2 must be positive, got {k.sigma2}")

    @property
    def num_labels(self) -> int:
        return len(self.components)

    def mixture(self, c):
        """``(weights, means, sigma2s)`` of p_data(. | c); ``c=None`` is unconditional."""
        if c is NULL:
            C = self.num_labels
            comps = [(k.weight / C, k) for cs in self.components for k in cs]
        else:
            if not isinstance(c, (int, np.integer)) or not 0 <= c < self.num_labels:
                raise ArgumentError(f"unknown condition label {c!r}")
            comps = [(k.weight, k) for k in self.components[int(c)]]
        w = np.array([p[0] for p in comps], dtype=np.float64)
        mu = np.array([p[1].mean for p in comps], dtype=np.float64).reshape(len(comps), self.dim)
        s2 = np.array([p[1].sigma2 for p in comps], dtype=np.float64)
        return w, mu, s2

    def sample(self, labels, u, z) -> np.ndarray:
        """Draw one data point per entry of ``labels`` from uniforms ``u`` (n,)
        and standard normals ``z`` (n, dim). ``labels`` may contain ``None``."""
        keys = np.array([-1 if lab is None else int(lab) for lab in labels])
        out = np.empty((len(keys), self.dim))
        for key in np.unique(keys):
            idx = np.flatnonzero(keys == key)
            w, mu, s2 = self.mixture(None if key < 0 else int(key))
            j = np.searchsorted(np.cumsum(w), u[idx], side="right")
            j = np.minimum(j, len(w) - 1)
            out[idx] = mu[j] + np.sqrt(s2[j])[:, None] * z[idx]
        return out


def gaussian_target(mean, sigma2: float = 1.0, num_labels: int = 1) -> MixtureTarget:
    mean = tuple(float(m) for m in np.atleast_1d(mean))
    comps = tuple((Component(1.0, mean, float(sigma2)),) for _ in range(num_labels))
    return MixtureTarget(dim=len(mean), components=comps)


def ring_target(num_modes: int = 8, radius: float = 4.0, sigma2: float = 0.09,
                num_labels: int = 2) -> MixtureTarget:
    """Modes on a circle; mode j belongs to label ``j % num_labels``."""
    if num_modes % num_labels:
        raise ArgumentError("num_modes must be a multiple of num_labels")
    per_label = num_modes // num_labels
    labels = []
    for c in range(num_labels):
        comps = []
        for j in range(c, num_modes, num_labels):
            ang = 2 * np.pi * j / num_modes
            comps.append(Component(1.0 / per_label,
                                   (radius * float(np.cos(ang)), radius * float(np.sin(ang))),
                                   sigma2))
        labels.append(tuple(comps))
    return MixtureTarget(dim=2, components=tuple(labels))


def marginal_params(target: MixtureTarget, c, t: float, schedule: NoiseSchedule):
    """Exact mixture of p_t(. | c): weights, diffused means, variances."""
    w, mu, s2 = target.mixture(c)
    a = alpha_at(schedule, t)
    return w, np.sqrt(a) * mu, a * s2 + (1.0 - a)


def _component_logits(x, w, m, v):
    d = x.shape[-1]
    sq = ((x[:, None, :] - m[None, :, :]) ** 2).sum(-1)
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    return logw - 0.5 * sq / v - 0.5 * d * np.log(2 * np.pi * v)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise ArgumentError(f"point dimension {x.shape[-1]} != target dimension {dim}")
    return x, single


def log_density(target, c, x, t, schedule):
    x, single = _as_batch(x, target.dim)
    logits = _component_logits(x, *marginal_params(target, c, t, schedule))
    mx = logits.max(-1, keepdims=True)
    out = (mx + np.log(np.exp(logits - mx).sum(-1, keepdims=True)))[:, 0]
    return float(out[0]) if single else out


def _responsibilities(x, w, m, v):
    logits = _component_logits(x, w, m, v)
    logits -= logits.max(-1, keepdims=True)
    r = np.exp(logits)
    return r / r.sum(-1, keepdims=True)


def oracle_score(target: MixtureTarget, c, x, t: float, schedule: NoiseSchedule):
    """Gradient of ln p_t(x | c) for a point (d,) or a batch (n, d)."""
    x, single = _as_batch(x, target.dim)
    w, m, v = marginal_params(target, c, t, schedule)
    r = _responsibilities(x, w, m, v)
    per = (m[None, :, :] - x[:, None, :]) / v[None, :, None]
    s = (r[:, :, None] * per).sum(1)
    return s[0] if single else s


def _score_and_jacobian(x, w, m, v):
    """Score and its Jacobian at a single point x (d,)."""
    d = x.shape[0]
    r = _responsibilities(x[None], w, m, v)[0]
    per = (m - x) / v[:, None]
    s = r @ per
    jac = -np.sum(r / v) * np.eye(d) + (per * r[:, None]).T @ per - np.outer(s, s)
    return s, jac


@dataclass(frozen=True)
class ProxQuery:
    """Arguments of prox_{-lam ln p_t(. | c)}(x)."""
    x: np.ndarray
    t: float
    lam: float
    c: object = NULL

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        if not self.lam > 0:
            raise ArgumentError(f"lambda must be positive, got {self.lam}")
        if not 0.0 <= self.t <= 1.0:
            raise ArgumentError(f"t must lie in [0, 1], got {self.t}")


def prox_gaussian(target, c, x, t, lam, schedule):
    """Closed-form prox for a single-component label; batched over x."""
    w, m, v = marginal_params(target, c, t, schedule)
    if len(w) > 1 and np.all(m == m[0]) and np.all(v == v[0]):
        w, m, v = w[:1], m[:1], v[:1]  # identical components (e.g. unconditional of copies)
    if len(w) != 1:
        raise UnsupportedError("closed-form prox needs a single-component target; use bruteforce_prox")
    if not lam > 0:
        raise ArgumentError(f"lambda must be positive, got {lam}")
    x = np.asarray(x, dtype=np.float64)
    return (v[0] * x + lam * m[0]) / (v[0] + lam)


def oracle_prox_gaussian(target: MixtureTarget, q: ProxQuery, schedule: NoiseSchedule):
    return prox_gaussian(target, q.c, q.x, q.t, q.lam, schedule)


def prox_objective(target, q: ProxQuery, u, schedule):
    """phi(u) = -lam ln p_t(u | c) + 1/2 ||u - x||^2 for a point or a batch of points."""
    u = np.asarray(u, dtype=np.float64)
    return -q.lam * log_density(target, q.c, u, q.t, schedule) + 0.5 * np.sum((u - q.x) ** 2, axis=-1)


def prox_residual(target: MixtureTarget, u, q: ProxQuery, schedule: NoiseSchedule) -> float:
    """Norm of the first-order condition ``-lam score(u) + u - x``."""
    u = np.asarray(u, dtype=np.float64)
    g = -q.lam * oracle_score(target, q.c, u, q.t, schedule) + u - q.x
    return float(np.linalg.norm(g))


def _local_prox(u, x, lam, w, m, v, tol, max_iter):
    """Damped (modified) Newton descent on phi from ``u``; returns (u, converged)."""
    d = u.shape[0]

    def phi(p):
        logits = _component_logits(p[None], w, m, v)[0]
        mx = logits.max()
        return -lam * (mx + np.log(np.exp(logits - mx).sum())) + 0.5 * np.dot(p - x, p - x)

    f = phi(u)
    for _ in range(max_iter):
        s, jac = _score_and_jacobian(u, w, m, v)
        g = -lam * s + u - x
        if np.linalg.norm(g) <= tol:
            return u, True
        hess = np.eye(d) - lam * jac
        hess = 0.5 * (hess + hess.T)
        eig_min = np.linalg.eigvalsh(hess)[0]
        if eig_min < 1e-8:
            hess = hess + (1e-8 - eig_min + 1e-3) * np.eye(d)
        step = -np.linalg.solve(hess, g)
        slope = g @ step
        if -slope <= 1e-12 * (1.0 + abs(f)):
            # Predicted decrease is below the resolution of phi: judge the
            # step by the gradient norm instead.
            cand = u + step
            s2, _ = _score_and_jacobian(cand, w, m, v)
            if np.linalg.norm(-lam * s2 + cand - x) >= np.linalg.norm(g):
                return u, False
            u, f = cand, phi(cand)
            continue
        eta = 1.0
        while True:
            cand = u + eta * step
            fc = phi(cand)
            if fc <= f + 1e-4 * eta * slope or eta < 1e-12:
                break
            eta *= 0.5
        if eta < 1e-12:
            # Armijo cannot make progress at this precision: accept a full
            # Newton step if it shrinks the gradient.
            cand = u + step
            s2, _ = _score_and_jacobian(cand, w, m, v)
            if np.linalg.norm(-lam * s2 + cand - x) < np.linalg.norm(g):
                fc = phi(cand)
            else:
                return u, False
        u, f = cand, fc
    s, _ = _score_and_jacobian(u, w, m, v)
    return u, bool(np.linalg.norm(-lam * s + u - x) <= tol)


def bruteforce_prox(target: MixtureTarget, q: ProxQuery, schedule: NoiseSchedule,
                    tol: float = 1e-10, max_iter: int = 500) -> np.ndarray:
    """Global minimizer of phi by multi-start Newton descent.

    Starts at x and at every diffused component mean; returns the converged
    point with lowest phi (ties broken by start order).
    """
    w, m, v = marginal_params(target, q.c, q.t, schedule)
    x = q.x
    if x.shape != (target.dim,):
        raise ArgumentError(f"query point must have shape ({target.dim},)")
    best, best_f = None, np.inf
    for start in [x] + list(m):
        u, ok = _local_prox(np.array(start, dtype=np.float64), x, q.lam, w, m, v, tol, max_iter)
        if not ok:
            raise OracleFailure(
                f"prox descent did not reach gradient norm {tol} from start {start} "
                f"(x={x}, t={q.t}, lam={q.lam}, c={q.c})")
        fu = prox_objective(target, q, u, schedule)
        if fu < best_f:
            best, best_f = u, fu
    return best


def hybrid_chain_moments(mean, sigma2: float, grid, schedule: NoiseSchedule, omega: float = 0.0,
                         null_mean=None, null_sigma2=None):
    """Mean and per-coordinate variance of the PDA-hybrid output when every
    prox is the closed-form Gaussian one, so each step is affine.

    With guidance the conditional target is N(mean, sigma2 I) and the
    unconditional one N(null_mean, null_sigma2 I) (defaults: the same).
    Starts from X_K ~ N(0, I).
    """
    mean = np.asarray(mean, dtype=np.float64)
    null_mean = mean if null_mean is None else np.asarray(null_mean, dtype=np.float64)
    null_sigma2 = sigma2 if null_sigma2 is None else null_sigma2
    mu_k = np.zeros_like(mean)
    var_k = 1.0
    for k in range(grid.K, 0, -1):
        g = grid.gamma(k)
        a = alpha_at(schedule, grid.t(k - 1))
        v_c = a * sigma2 + 1 - a
        v_n = a * null_sigma2 + 1 - a
        # f(y) = slope * y + offset
        slope = (1 + omega) * v_c / (v_c + g) - omega * v_n / (v_n + g)
        offset = ((1 + omega) * g * np.sqrt(a) * mean / (v_c + g)
                  - omega * g * np.sqrt(a) * null_mean / (v_n + g))
        scale = 1 + 0.5 * g
        mu_k = slope * scale * mu_k + offset
        var_k = slope ** 2 * (scale ** 2 * var_k + g)
    return mu_k, var_k
