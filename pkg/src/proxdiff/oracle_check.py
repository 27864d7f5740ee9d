"""Fast self-checks of the oracles and the algebraic identities built on them.

Each check returns ``(ok, detail)``. ``run_checks`` is what the
``oracle-check`` subcommand executes.
"""
from __future__ import annotations

import io
import tempfile
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .grpo import compute_advantages, transition_kl, transition_logpdf
from .nets import ArchSpec, build_net, get_flat_params, prox_forward
from .pretrain import pm_loss
from .samplers import (PDA_HYBRID, OracleGaussianProx, OracleScore, StepRule, chain_noise,
                       hybrid_x_chain, hybrid_y_chain, prox_cfg, run_chain, score_cfg)
from .schedule import NoiseSchedule, alpha_at, make_time_grid
from .targets import (Component, MixtureTarget, ProxQuery, bruteforce_prox, gaussian_target,
                      hybrid_chain_moments, log_density, oracle_prox_gaussian, oracle_score,
                      prox_residual)

SCHED = NoiseSchedule()


def three_component_target():
    return MixtureTarget(2, ((Component(0.5, (-2.0, 0.0), 0.5), Component(0.3, (2.0, 1.0), 0.3),
                              Component(0.2, (0.0, -2.5), 0.8)),))


def check_alpha_monotone():
    a = alpha_at(SCHED, np.linspace(0, 1, 1001))
    ok = bool(np.all(np.diff(a) < 0) and a[0] == 1.0)
    return ok, f"alpha(1) = {a[-1]:.3e}"


def check_score_fd(n=100, seed=0):
    tg = three_component_target()
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6
    for _ in range(n):
        x = rng.normal(scale=2.0, size=2)
        t = float(rng.uniform(0.01, 1.0))
        s = oracle_score(tg, 0, x[None], t, SCHED)[0]
        fd = np.array([(log_density(tg, 0, (x + h * e)[None], t, SCHED)[0]
                        - log_density(tg, 0, (x - h * e)[None], t, SCHED)[0]) / (2 * h)
                       for e in np.eye(2)])
        worst = max(worst, np.linalg.norm(fd - s) / max(np.linalg.norm(s), 1e-3))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def check_prox_residual(n=100, seed=1):
    tg = three_component_target()
    rng = np.random.default_rng(seed)
    lams = np.concatenate([make_time_grid(SCHED, K).gammas for K in (4, 10, 25)])
    lams = lams[lams <= 5]
    worst = 0.0
    for _ in range(n):
        q = ProxQuery(rng.normal(scale=3.0, size=2), float(rng.uniform(0.001, 1.0)),
                      float(rng.choice(lams)), 0)
        worst = max(worst, prox_residual(tg, bruteforce_prox(tg, q, SCHED), q, SCHED))
    return worst <= 1e-8, f"max residual {worst:.2e}"


def check_bruteforce_vs_closed_form(n=50, seed=2):
    tg = gaussian_target([1.0, -0.5], 0.7)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        q = ProxQuery(rng.normal(scale=3.0, size=2), float(rng.uniform(0.001, 1.0)),
                      float(rng.uniform(0.01, 5.0)), 0)
        worst = max(worst, float(np.abs(bruteforce_prox(tg, q, SCHED)
                                        - oracle_prox_gaussian(tg, q, SCHED)).max()))
    return worst <= 1e-8, f"max difference {worst:.2e}"


def check_gaussian_chain_moments(n=20_000):
    tg = gaussian_target([1.0], 1.0)
    worst = 0.0
    for K in (4, 10):
        grid = make_time_grid(SCHED, K)
        rec = run_chain(StepRule(PDA_HYBRID), grid, OracleGaussianProx(tg, SCHED), 0, seed=K, n=n)
        m, v = hybrid_chain_moments(1.0, 1.0, grid, SCHED)
        x = rec.final[:, 0]
        se_m, se_v = np.sqrt(v / n), v * np.sqrt(2 / (n - 1))
        worst = max(worst, abs(x.mean() - m) / se_m, abs(x.var(ddof=1) - v) / se_v)
    return worst <= 4, f"largest deviation {worst:.2f} standard errors"


def check_xy_identity():
    tg = gaussian_target([0.5, -1.0], 0.6, num_labels=2)
    grid = make_time_grid(SCHED, 10)
    fn = OracleGaussianProx(tg, SCHED)
    noises = np.stack([chain_noise(3, k, 0, 16, 2) for k in range(grid.K + 1)])
    x_top = np.random.default_rng(3).normal(size=(16, 2))

    def f(y, k):
        return prox_cfg(fn, y, grid.t(k - 1), grid.gamma(k), 0, 2.0)

    xs = hybrid_x_chain(x_top, grid, f, noises)
    g = grid.gamma(grid.K)
    ys = hybrid_y_chain((1 + g / 2) * x_top + np.sqrt(g) * noises[grid.K], grid, f, noises)
    err = float(np.abs(xs[0] - ys[0]).max())
    return err <= 1e-12, f"max |X_0 - Y_0| = {err:.1e}"


def check_cfg_reduction():
    tg = MixtureTarget(1, ((Component(1.0, (1.0,), 0.5),), (Component(1.0, (-1.0,), 0.5),)))
    x = np.linspace(-3, 3, 7)[:, None]
    sf = OracleScore(tg, SCHED)
    pf = OracleGaussianProx(tg, SCHED)
    ok = (np.array_equal(score_cfg(sf, x, 0.3, 1, 0.0), sf(x, 0.3, 1))
          and np.array_equal(prox_cfg(pf, x, 0.3, 0.5, 1, 0.0), pf(x, 0.3, 0.5, 1)))
    return bool(ok), "omega = 0 returns the conditional map exactly"


def check_pm_loss():
    d = np.sort(np.random.default_rng(4).uniform(0, 5, 200))
    vals = pm_loss(d[:, None], np.zeros((200, 1)), 1.0)
    ok = vals[0] >= 0 and np.all(vals < 1) and np.all(np.diff(vals) > 0)
    ok = ok and pm_loss(np.ones((1, 3)), np.ones((1, 3)), 1.0)[0] == 0
    return bool(ok), f"range [{vals.min():.3f}, {vals.max():.3f}]"


def check_advantages():
    r = np.random.default_rng(5).normal(size=24)
    a = compute_advantages(r)
    err = max(abs(a.mean()), abs(np.sqrt(np.mean(a ** 2)) - 1))
    return err <= 1e-12, f"mean/std error {err:.1e}"


def check_transition_density():
    grid = make_time_grid(SCHED, 10)
    rng = np.random.default_rng(6)
    y, f = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    worst = 0.0
    for k in range(2, 11):
        g = grid.gamma(k - 1)
        direct = (-np.log(2 * np.pi * g) - ((y - (1 + g / 2) * f) ** 2).sum(-1) / (2 * g))
        worst = max(worst, float(np.abs(transition_logpdf(y, f, k, grid).numpy() - direct).max()))
    return worst <= 1e-12, f"max difference {worst:.1e}"


def check_kl_monte_carlo(n=200_000):
    grid = make_time_grid(SCHED, 10)
    k = 5
    g = grid.gamma(k - 1)
    rng = np.random.default_rng(7)
    f1, f2 = np.array([[0.3, -0.2]]), np.array([[0.1, 0.25]])
    y = (1 + g / 2) * f1 + np.sqrt(g) * rng.normal(size=(n, 2))
    lr = (transition_logpdf(y, np.repeat(f1, n, 0), k, grid)
          - transition_logpdf(y, np.repeat(f2, n, 0), k, grid)).numpy()
    exact = float(transition_kl(f1, f2, k, grid)[0])
    z = abs(lr.mean() - exact) / (lr.std(ddof=1) / np.sqrt(n))
    return z <= 3, f"exact {exact:.5f}, Monte Carlo {lr.mean():.5f} ({z:.2f} s.e.)"


def check_checkpoint_roundtrip():
    arch = ArchSpec("prox", 2, 2, hidden=16, depth=2)
    net = build_net(arch, SCHED, seed=8)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.01 * torch.randn_like(p, dtype=torch.float64))
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(net, {"note": "check"}, Path(tmp) / "net.ckpt")
        back, meta = load_checkpoint(path, expect_arch=arch)
    x = np.random.default_rng(8).normal(size=(100, 2))
    ok = (np.array_equal(get_flat_params(net), get_flat_params(back)) and meta == {"note": "check"}
          and np.array_equal(prox_forward(net, x, 0.5, 0.3, 1), prox_forward(back, x, 0.5, 0.3, 1)))
    return bool(ok), "parameters, metadata and outputs identical"


CHECKS = {
    "alpha-monotone": check_alpha_monotone,
    "score-finite-difference": check_score_fd,
    "prox-first-order-condition": check_prox_residual,
    "prox-bruteforce-vs-closed-form": check_bruteforce_vs_closed_form,
    "gaussian-chain-moments": check_gaussian_chain_moments,
    "x-y-chain-identity": check_xy_identity,
    "cfg-reduction": check_cfg_reduction,
    "pm-loss-shape": check_pm_loss,
    "advantage-normalization": check_advantages,
    "transition-logpdf": check_transition_density,
    "transition-kl-monte-carlo": check_kl_monte_carlo,
    "checkpoint-roundtrip": check_checkpoint_roundtrip,
}


def run_checks(out=None, names=None) -> bool:
    """Run the named checks (all by default); print one line each; True if all pass."""
    out = out or io.StringIO()
    all_ok = True
    for name in names or CHECKS:
        try:
            ok, detail = CHECKS[name]()
        except Exception as exc:  # a crash is a failure, reported like one
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}", file=out)
    return all_ok
