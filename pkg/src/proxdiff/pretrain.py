"""Proximal-matching training of ProxNet and denoising score matching of ScoreNet."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import rng as streams
from .errors import ArgumentError, TrainingError
from .rng import CounterRNG
from .schedule import DEFAULT_T_MIN, NoiseSchedule, forward_marginal, make_time_grid

logger = logging.getLogger(__name__)

DEFAULT_STEP_COUNTS = (4, 5, 6, 7, 8, 9, 10, 25)


class StepGridSet:
    """The (t_{k-1}, gamma_k) pairs queried by proximal samplers for each step count."""

    def __init__(self, counts=DEFAULT_STEP_COUNTS, schedule: NoiseSchedule = NoiseSchedule(),
                 t_min: float = DEFAULT_T_MIN):
        counts = tuple(int(k) for k in counts)
        if not counts:
            raise ArgumentError("step grid set must not be empty")
        self.counts = counts
        self.schedule = schedule
        self.t_min = t_min
        self.grids = {K: make_time_grid(schedule, K, t_min) for K in counts}
        self.pairs = {K: np.array(self.grids[K].pairs()) for K in counts}
        if any(np.any(p[:, 1] <= 0) for p in self.pairs.values()):
            raise ArgumentError("every grid step weight must be positive")

    def support(self):
        return {(float(t), float(lam)) for p in self.pairs.values() for t, lam in p}


def t_lambda_from_uniforms(gridset: StepGridSet, u) -> tuple[np.ndarray, np.ndarray]:
    """Map uniforms ``u`` (n, 2) to (t, lam): K uniform over the set, then k uniform in 1..K."""
    u = np.atleast_2d(u)
    n_counts = len(gridset.counts)
    which = np.minimum((u[:, 0] * n_counts).astype(int), n_counts - 1)
    t = np.empty(len(u))
    lam = np.empty(len(u))
    for j, K in enumerate(gridset.counts):
        idx = which == j
        k = np.minimum((u[idx, 1] * K).astype(int), K - 1)
        t[idx] = gridset.pairs[K][k, 0]
        lam[idx] = gridset.pairs[K][k, 1]
    return t, lam


def sample_t_lambda(gridset: StepGridSet, rng: np.random.Generator, size: int | None = None):
    u = rng.random((1 if size is None else size, 2))
    t, lam = t_lambda_from_uniforms(gridset, u)
    return (float(t[0]), float(lam[0])) if size is None else (t, lam)


def pm_loss(output, target, zeta: float):
    """1 - exp(-||output - target||^2 / (d zeta^2)) over the last axis.

    Works on torch tensors (differentiably) and on numpy arrays.
    """
    if not zeta > 0:
        raise ArgumentError(f"zeta must be positive, got {zeta}")
    d = output.shape[-1]
    sq = ((output - target) ** 2).sum(-1)
    if isinstance(sq, torch.Tensor):
        return -torch.expm1(-sq / (d * zeta ** 2))
    return -np.expm1(-sq / (d * zeta ** 2))


@dataclass(frozen=True)
class PretrainConfig:
    batch: int = 256
    lr: float = 1e-3
    iters: int = 20_000
    zeta: float = 1.0
    p_null: float = 0.1
    seed: int = 0
    momentum: float = 0.9
    optimizer: str = "sgd"
    lr_decay: str = "none"  # "none" or "cosine" (anneal to zero over ``iters``)
    # "uniform" averages the PM loss over the batch; "inverse-variance" weights each
    # sample by (1 + lam) / lam, see ``pm_sample_weights``
    weighting: str = "uniform"

    def __post_init__(self):
        if self.weighting not in ("uniform", "inverse-variance"):
            raise ArgumentError(
                f"weighting must be 'uniform' or 'inverse-variance', got {self.weighting!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise ArgumentError(f"lr_decay must be 'none' or 'cosine', got {self.lr_decay!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ArgumentError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.zeta > 0:
            raise ArgumentError("zeta must be positive")
        if not 0 <= self.p_null < 1:
            raise ArgumentError("p_null must lie in [0, 1)")
        if self.batch < 1 or self.iters < 0 or not self.lr > 0:
            raise ArgumentError("batch >= 1, iters >= 0 and lr > 0 required")


def make_optimizer(net, cfg: PretrainConfig):
    """SGD with momentum by default; Adam when ``cfg.optimizer == "adam"``."""
    if cfg.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=cfg.lr)
    return torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum)


def make_lr_schedule(optimizer, cfg: PretrainConfig):
    """Per-iteration schedule, or None for a constant rate."""
    if cfg.lr_decay == "cosine" and cfg.iters > 0:
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.iters)
    return None


@dataclass
class Minibatch:
    labels: list  # net-facing tokens (None for null-dropped samples)
    x0: np.ndarray
    t: np.ndarray
    lam: np.ndarray | None
    noise: np.ndarray
    x_t: np.ndarray
    query: np.ndarray | None


def draw_minibatch(target, cfg: PretrainConfig, schedule: NoiseSchedule, iteration: int,
                   gridset: StepGridSet | None = None, t_min: float = DEFAULT_T_MIN) -> Minibatch:
    """Assemble a minibatch; sample i of iteration j depends only on (seed, j, i).

    With a ``gridset`` (t, lam) follow the sampler grids and a noisy query
    ``x_t + sqrt(lam) eps`` is formed; without one t is uniform on
    [t_min, 1] (score matching).
    """
    r = CounterRNG(cfg.seed)
    n, d = cfg.batch, target.dim
    u_lab = r.uniform(streams.STREAM_TRAIN_LABEL, iteration, 0, n)[:, 0]
    data_labels = np.minimum((u_lab * target.num_labels).astype(int), target.num_labels - 1)
    drop = r.uniform(streams.STREAM_TRAIN_NULL, iteration, 0, n)[:, 0] < cfg.p_null
    x0 = target.sample(data_labels,
                       r.uniform(streams.STREAM_TRAIN_COMPONENT, iteration, 0, n)[:, 0],
                       r.normal(streams.STREAM_TRAIN_DATA, iteration, 0, n, d))
    u_t = r.uniform(streams.STREAM_TRAIN_TLAMBDA, iteration, 0, n, 2)
    if gridset is not None:
        t, lam = t_lambda_from_uniforms(gridset, u_t)
    else:
        t, lam = t_min + (1.0 - t_min) * u_t[:, 0], None
    noise = r.normal(streams.STREAM_TRAIN_FORWARD, iteration, 0, n, d)
    x_t = forward_marginal(x0, t, noise, schedule)
    query = None
    if lam is not None:
        query = x_t + np.sqrt(lam)[:, None] * r.normal(streams.STREAM_TRAIN_QUERY, iteration, 0, n, d)
    labels = [None if dr else int(c) for c, dr in zip(data_labels, drop)]
    return Minibatch(labels, x0, t, lam, noise, x_t, query)


def pm_sample_weights(lam, weighting: str = "uniform") -> np.ndarray:
    """Per-sample weights, normalized to mean one over the batch.

    "inverse-variance" uses (1 + lam) / lam, the reciprocal of the posterior
    variance of x_t given the query for unit-variance data. It depends only on
    the conditioning, so the optimum at each (t, lam) is unchanged; it lifts
    the small-lam pairs whose losses and gradients are otherwise tiny.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if weighting == "uniform":
        return np.ones_like(lam)
    if weighting == "inverse-variance":
        w = (1.0 + lam) / lam
        return w / w.mean()
    raise ArgumentError(f"unknown weighting {weighting!r}")


def pm_batch_loss(net, mb: Minibatch, zeta: float, weighting: str = "uniform") -> torch.Tensor:
    out = net(torch.from_numpy(mb.query), torch.from_numpy(mb.t), torch.from_numpy(mb.lam), mb.labels)
    losses = pm_loss(out, torch.from_numpy(mb.x_t), zeta)
    if weighting == "uniform":
        return losses.mean()
    return (torch.from_numpy(pm_sample_weights(mb.lam, weighting)) * losses).mean()


def dsm_batch_loss(net, mb: Minibatch) -> torch.Tensor:
    eps_hat = net.eps(torch.from_numpy(mb.x_t), torch.from_numpy(mb.t), mb.labels)
    return ((eps_hat - torch.from_numpy(mb.noise)) ** 2).sum(-1).mean()


def _apply(loss, optimizer, iteration):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite training loss at iteration {iteration}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def pm_training_step(net, optimizer, target, cfg: PretrainConfig, gridset: StepGridSet,
                     iteration: int) -> float:
    """One proximal-matching update; returns the pre-update batch loss."""
    mb = draw_minibatch(target, cfg, gridset.schedule, iteration, gridset=gridset)
    return _apply(pm_batch_loss(net, mb, cfg.zeta, cfg.weighting), optimizer, iteration)


def dsm_training_step(net, optimizer, target, cfg: PretrainConfig, schedule: NoiseSchedule,
                      iteration: int, t_min: float = DEFAULT_T_MIN) -> float:
    """One noise-prediction score-matching update; returns the pre-update loss."""
    mb = draw_minibatch(target, cfg, schedule, iteration, t_min=t_min)
    return _apply(dsm_batch_loss(net, mb), optimizer, iteration)


def train_prox(net, target, cfg: PretrainConfig, gridset: StepGridSet, log_every: int = 100):
    """Run ``cfg.iters`` proximal-matching steps; returns [(iteration, loss)]."""
    opt = make_optimizer(net, cfg)
    sched = make_lr_schedule(opt, cfg)
    curve = []
    for it in range(cfg.iters):
        loss = pm_training_step(net, opt, target, cfg, gridset, it)
        if sched is not None:
            sched.step()
        if it % log_every == 0 or it == cfg.iters - 1:
            curve.append((it, loss))
            logger.debug("prox iter %d loss %.6f", it, loss)
    return curve


def train_score(net, target, cfg: PretrainConfig, schedule: NoiseSchedule,
                t_min: float = DEFAULT_T_MIN, log_every: int = 100):
    opt = make_optimizer(net, cfg)
    sched = make_lr_schedule(opt, cfg)
    curve = []
    for it in range(cfg.iters):
        loss = dsm_training_step(net, opt, target, cfg, schedule, it, t_min)
        if sched is not None:
            sched.step()
        if it % log_every == 0 or it == cfg.iters - 1:
            curve.append((it, loss))
            logger.debug("score iter %d loss %.6f", it, loss)
    return curve
