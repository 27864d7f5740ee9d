"""GRPO fine-tuning of a proximal sampler through its auxiliary Y-chain.

The PDA-hybrid sampler pushes a Gaussian through the guided proximal map
f_w, so its X-transitions have no tractable density. The reparameterized
states Y_k = (1 + g_k/2) X_k + sqrt(g_k) xi_k instead move by

    Y_{k-1} | Y_k ~ N((1 + g_{k-1}/2) f_w(Y_k; c), g_{k-1} I),  k = K..2,

and Y_0 = f_w(Y_1; c) is deterministic. Likelihood ratios and KL terms are
therefore summed over k = K..2 only; the reward is read off Y_0.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ArgumentError, ContractError, NumericError, TrainingError
from .nets import snapshot
from .rng import STREAM_GRPO_PROMPTS, CounterRNG
from .samplers import PDA_HYBRID, ChainRecord, NetProx, StepRule, run_chain
from .schedule import DEFAULT_T_MIN, NoiseSchedule, TimeGrid, make_time_grid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GRPOConfig:
    group: int = 24
    steps: int = 10
    kl: float = 0.001
    clip: float = 0.2
    omega: float = 4.0
    prompts_per_batch: int = 12
    lr: float = 1e-4
    updates: int = 1000
    eps_std: float = 1e-8
    accum: int = 6
    inner_epochs: int = 1

    def __post_init__(self):
        if self.group < 2:
            raise ArgumentError("group size must be at least 2")
        if self.steps < 2:
            raise ArgumentError("GRPO needs at least two sampling steps (one stochastic transition)")
        if self.kl < 0 or not self.clip > 0 or not self.eps_std > 0:
            raise ArgumentError("need kl >= 0, clip > 0, eps_std > 0")
        if self.prompts_per_batch < 1 or self.accum < 1 or self.inner_epochs < 1:
            raise ArgumentError("prompts_per_batch, accum and inner_epochs must be positive")


# --- rewards ----------------------------------------------------------------

class ModeDistanceReward:
    """R(x, c) = -||x - mode_c||."""

    name = "mode-dist"

    def __init__(self, modes):
        self.modes = np.asarray(modes, dtype=np.float64)

    @classmethod
    def for_target(cls, target):
        """Designated mode of each label: its first component mean."""
        return cls([target.components[c][0].mean for c in range(target.num_labels)])

    def __call__(self, x, c):
        return -np.linalg.norm(np.atleast_2d(x) - self.modes[c], axis=-1)


class RingReward:
    """R(x, c) = -| ||x|| - r_c |."""

    name = "ring"

    def __init__(self, radii):
        self.radii = np.asarray(radii, dtype=np.float64)

    @classmethod
    def for_target(cls, target):
        return cls([np.linalg.norm(target.components[c][0].mean) for c in range(target.num_labels)])

    def __call__(self, x, c):
        return -np.abs(np.linalg.norm(np.atleast_2d(x), axis=-1) - self.radii[c])


REWARDS = {"mode-dist": ModeDistanceReward, "ring": RingReward}


def make_reward(name: str, target):
    if name not in REWARDS:
        raise ArgumentError(f"unknown reward {name!r}; choose from {sorted(REWARDS)}")
    return REWARDS[name].for_target(target)


# --- densities --------------------------------------------------------------

def compute_advantages(rewards, eps_std: float = 1e-8) -> np.ndarray:
    """(R - mean) / max(std, eps_std) with the population standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ArgumentError("need a group of at least two rewards")
    if np.all(r == r[0]):
        # the float mean of equal values can differ from them by one ulp
        return np.zeros_like(r)
    centred = r - r.mean()
    return centred / max(float(np.sqrt(np.mean(centred ** 2))), eps_std)


def _transition_gamma(k: int, grid: TimeGrid) -> float:
    if not 2 <= k <= grid.K:
        raise ContractError(
            f"transition Y_{k} -> Y_{k - 1} has no density; only k = 2..{grid.K} are Gaussian")
    return grid.gamma(k - 1)


def transition_logpdf(y_next, f_out, k: int, grid: TimeGrid) -> torch.Tensor:
    """log N(y_next; (1 + g/2) f_out, g I) with g = gamma_{k-1}; batched over rows."""
    g = _transition_gamma(k, grid)
    y_next = torch.as_tensor(y_next, dtype=torch.float64)
    f_out = torch.as_tensor(f_out, dtype=torch.float64)
    d = y_next.shape[-1]
    resid = y_next - (1 + 0.5 * g) * f_out
    return -0.5 * d * math.log(2 * math.pi * g) - (resid ** 2).sum(-1) / (2 * g)


def transition_kl(f_theta, f_ref, k: int, grid: TimeGrid) -> torch.Tensor:
    """KL between the step-k transitions of two policies (same covariance)."""
    g = _transition_gamma(k, grid)
    diff = torch.as_tensor(f_theta, dtype=torch.float64) - torch.as_tensor(f_ref, dtype=torch.float64)
    return (1 + 0.5 * g) ** 2 * (diff ** 2).sum(-1) / (2 * g)


def guided_prox(net, y, t, lam, c, omega) -> torch.Tensor:
    """Torch version of the guided proximal map, differentiable in the net."""
    y = torch.as_tensor(y, dtype=torch.float64)
    if omega == 0:
        return net(y, t, lam, c)
    return (1 + omega) * net(y, t, lam, c) - omega * net(y, t, lam, None)


# --- rollouts and objective -------------------------------------------------

@dataclass(frozen=True)
class GroupBatch:
    condition: object
    record: ChainRecord
    rewards: np.ndarray
    advantages: np.ndarray
    old_logp: np.ndarray  # (K + 1, G); row k holds log p_old(Y_{k-1} | Y_k) for k >= 2

    @property
    def grid(self):
        return self.record.grid


def _step_mean_input(net, record: ChainRecord, k: int, omega: float):
    grid = record.grid
    return guided_prox(net, record.states[k], grid.t(k - 1), grid.gamma(k), record.condition, omega)


def behaviour_logp(net_old, record: ChainRecord, omega: float) -> np.ndarray:
    grid = record.grid
    out = np.full((grid.K + 1, record.n), np.nan)
    with torch.no_grad():
        for k in range(grid.K, 1, -1):
            f_old = _step_mean_input(net_old, record, k, omega)
            out[k] = transition_logpdf(record.states[k - 1], f_old, k, grid).numpy()
    return out


def rollout_group(net_old, c, cfg: GRPOConfig, reward, seed: int, grid: TimeGrid,
                  chain_offset: int = 0) -> GroupBatch:
    """Sample G chains from the frozen behaviour policy and score them."""
    rule = StepRule(PDA_HYBRID, cfg.omega)
    record = run_chain(rule, grid, NetProx(net_old), c, seed, n=cfg.group,
                       chain_offset=chain_offset)
    rewards = np.asarray(reward(record.final, c), dtype=np.float64)
    if not np.all(np.isfinite(rewards)):
        raise TrainingError(f"non-finite reward for condition {c} (chains from {chain_offset})")
    return GroupBatch(condition=c, record=record, rewards=rewards,
                      advantages=compute_advantages(rewards, cfg.eps_std),
                      old_logp=behaviour_logp(net_old, record, cfg.omega))


def objective_terms(net, ref, batch: GroupBatch, cfg: GRPOConfig, clipped: bool = True):
    """Per-transition surrogate, KL and ratio tensors, each (K - 1, G) for k = K..2."""
    grid = batch.grid
    adv = torch.as_tensor(batch.advantages)
    surr, kls, ratios = [], [], []
    for k in range(grid.K, 1, -1):
        f_theta = _step_mean_input(net, batch.record, k, cfg.omega)
        logp = transition_logpdf(batch.record.states[k - 1], f_theta, k, grid)
        ratio = torch.exp(logp - torch.as_tensor(batch.old_logp[k]))
        bad = ~torch.isfinite(ratio)
        if bad.any():
            i = int(torch.nonzero(bad)[0, 0])
            raise NumericError(f"non-finite likelihood ratio at chain i={i}, step k={k}")
        if clipped:
            s = torch.minimum(ratio * adv, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv)
        else:
            s = ratio * adv
        if cfg.kl > 0 or ref is not None:
            with torch.no_grad():
                f_ref = _step_mean_input(ref, batch.record, k, cfg.omega)
            kl = transition_kl(f_theta, f_ref, k, grid)
        else:
            kl = torch.zeros_like(s)
        surr.append(s)
        kls.append(kl)
        ratios.append(ratio)
    return torch.stack(surr), torch.stack(kls), torch.stack(ratios)


def grpo_objective(net, ref, batch, cfg: GRPOConfig, clipped: bool = True) -> torch.Tensor:
    """Sum over chains and transitions k = K..2 of min(r A, clip(r) A) - beta KL.

    ``batch`` is one GroupBatch or a list of them. The value is to be maximized.
    """
    batches = batch if isinstance(batch, (list, tuple)) else [batch]
    total = torch.zeros((), dtype=torch.float64)
    for b in batches:
        s, kl, _ = objective_terms(net, ref, b, cfg, clipped)
        total = total + (s - cfg.kl * kl).sum()
    return total


def _transitions(batches) -> int:
    return sum((b.grid.K - 1) * b.record.n for b in batches)


def pick_prompts(prompts, count: int, seed: int, update: int):
    """Prompts for one update, read from a stream of shuffled passes over ``prompts``.

    Sampling without replacement keeps every prompt's share of a batch fixed,
    so the batch mean reward does not jitter with the prompt mix.
    """
    rng = CounterRNG(seed)
    n = len(prompts)
    first = update * count
    out = []
    for epoch in range(first // n, (first + count - 1) // n + 1):
        order = np.argsort(rng.uniform(STREAM_GRPO_PROMPTS, epoch, 0, n)[:, 0], kind="stable")
        lo = max(first - epoch * n, 0)
        hi = min(first + count - epoch * n, n)
        out += [prompts[i] for i in order[lo:hi]]
    return out


def grpo_update_loop(net, reward, prompts, cfg: GRPOConfig, seed: int,
                     schedule: NoiseSchedule = NoiseSchedule(), t_min: float = DEFAULT_T_MIN,
                     on_update=None):
    """Fine-tune ``net`` in place. Returns one log row per update.

    Each update snapshots theta_old, rolls one group per drawn prompt, and
    takes ``inner_epochs`` Adam steps on the objective averaged over all
    transitions, accumulating gradients over ``cfg.accum`` sub-batches.
    ``on_update(row, net)`` is called after every update.
    """
    if not prompts:
        raise ArgumentError("need at least one prompt")
    grid = make_time_grid(schedule, cfg.steps, t_min)
    ref = snapshot(net)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    log = []
    for u in range(cfg.updates):
        old = snapshot(net)
        chosen = pick_prompts(prompts, cfg.prompts_per_batch, seed, u)
        batches = [rollout_group(old, c, cfg, reward, seed, grid,
                                 chain_offset=(u * cfg.prompts_per_batch + j) * cfg.group)
                   for j, c in enumerate(chosen)]
        n_terms = _transitions(batches)
        subs = [s for s in np.array_split(np.arange(len(batches)), cfg.accum) if len(s)]
        kl_sum = clip_sum = 0.0
        for epoch in range(cfg.inner_epochs):
            opt.zero_grad()
            for sub in subs:
                part = [batches[i] for i in sub]
                total = torch.zeros((), dtype=torch.float64)
                for b in part:
                    s, kl, ratio = objective_terms(net, ref, b, cfg)
                    total = total + (s - cfg.kl * kl).sum()
                    if epoch == 0:
                        kl_sum += float(kl.detach().sum())
                        clip_sum += float((torch.abs(ratio.detach() - 1) > cfg.clip).sum())
                (-total / n_terms).backward()
            opt.step()
        rewards = np.concatenate([b.rewards for b in batches])
        row = {"update": u, "mean_reward": float(rewards.mean()),
               "mean_kl": kl_sum / n_terms, "clip_fraction": clip_sum / n_terms}
        if not np.isfinite(row["mean_reward"]) or not np.isfinite(row["mean_kl"]):
            raise TrainingError(f"GRPO diverged at update {u}: {row}")
        log.append(row)
        logger.info("grpo update %d reward %.4f kl %.3g clip %.3f", u, row["mean_reward"],
                    row["mean_kl"], row["clip_fraction"])
        if on_update is not None:
            on_update(row, net)
    return log
