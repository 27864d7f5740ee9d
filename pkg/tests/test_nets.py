import numpy as np
import pytest
import torch

from proxdiff.errors import ArgumentError, ContractError, NumericError
from proxdiff.nets import (ArchSpec, ProxNet, ScoreNet, build_net, fourier, get_flat_params,
                           grad_of_scalar, prox_forward, scalar_features, score_forward,
                           set_flat_params, snapshot,
                           token_index)
from proxdiff.schedule import NoiseSchedule

SCHED = NoiseSchedule()
SMALL = dict(hidden=16, depth=2, n_freq=4, emb_dim=8)


def perturbed(kind="prox", dim=2, labels=3, seed=0, scale=0.1):
    net = build_net(ArchSpec(kind, dim, labels, **SMALL), SCHED, seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=torch.float64))
    return net


def test_untrained_prox_is_identity():
    net = build_net(ArchSpec("prox", 2, 2, **SMALL), SCHED)
    x = np.random.default_rng(0).normal(size=(10, 2))
    assert np.array_equal(prox_forward(net, x, 0.3, 0.7, 1), x)
    assert np.array_equal(prox_forward(net, x[0], 0.3, 0.7, None), x[0])


def test_prox_small_lambda_limit():
    net = perturbed()
    x = np.random.default_rng(1).normal(size=(10, 2))
    assert np.allclose(prox_forward(net, x, 0.3, 1e-10, 0), x, atol=1e-8)


def test_output_shapes_and_dtype():
    net = perturbed(dim=3)
    out = net(torch.zeros(4, 3, dtype=torch.float64), 0.5, 0.2, [0, 1, None, 2])
    assert out.shape == (4, 3) and out.dtype == torch.float64
    s = perturbed("score", dim=3)
    assert s(torch.zeros(4, 3, dtype=torch.float64), 0.5, 0).shape == (4, 3)


def test_forward_is_deterministic():
    net = perturbed()
    x = np.random.default_rng(2).normal(size=(50, 2))
    a = prox_forward(net, x, 0.4, 0.5, 2)
    b = prox_forward(net, x, 0.4, 0.5, 2)
    assert np.array_equal(a, b)


def test_input_validation():
    net = perturbed()
    with pytest.raises(ArgumentError):
        net(torch.zeros(2, 3, dtype=torch.float64), 0.5, 0.5, 0)
    with pytest.raises(ArgumentError):
        net(torch.zeros(2, 2, dtype=torch.float64), 0.5, 0.0, 0)
    with pytest.raises(ArgumentError):
        net(torch.zeros(2, 2, dtype=torch.float64), 0.5, 0.5, 3)
    with pytest.raises(NumericError):
        net(torch.full((2, 2), np.nan, dtype=torch.float64), 0.5, 0.5, 0)
    with pytest.raises(ArgumentError):
        ProxNet(ArchSpec("score", 2, 1))
    with pytest.raises(ArgumentError):
        ScoreNet(ArchSpec("prox", 2, 1), SCHED)
    with pytest.raises(ArgumentError):
        build_net(ArchSpec("other", 2, 1), SCHED)


def test_token_index():
    assert token_index(None, 3, 2).tolist() == [3, 3]
    assert token_index(1, 3, 2).tolist() == [1, 1]
    assert token_index([0, None], 3, 2).tolist() == [0, 3]
    with pytest.raises(ArgumentError):
        token_index([0], 3, 2)


def test_scalar_features_prepend_raw_value():
    v = torch.tensor([0.25, -0.5], dtype=torch.float64)
    f = scalar_features(v, 3)
    assert f.shape == (2, 7)
    assert torch.equal(f[:, 0], v) and torch.equal(f[:, 1:], fourier(v, 3))


def test_fourier_features():
    v = torch.tensor([0.25], dtype=torch.float64)
    f = fourier(v, 2)
    assert torch.allclose(f, torch.tensor([[np.sin(np.pi / 4), np.sin(np.pi / 2),
                                            np.cos(np.pi / 4), np.cos(np.pi / 2)]],
                                          dtype=torch.float64))


def test_null_output_ignores_data_label_rows():
    net = perturbed(labels=4)
    x = np.random.default_rng(3).normal(size=(20, 2))
    before = prox_forward(net, x, 0.3, 0.5, None)
    with torch.no_grad():
        w = net.label_emb.weight
        w[:4] = w[:4][torch.tensor([2, 0, 3, 1])]
    assert np.array_equal(prox_forward(net, x, 0.3, 0.5, None), before)


def test_score_net_scaling():
    net = perturbed("score")
    x = torch.randn(5, 2, dtype=torch.float64)
    t = 0.4
    eps = net.eps(x, t, 0)
    sigma = np.sqrt(1 - np.exp(-(0.1 * t + 0.5 * 19.9 * t * t)))
    assert torch.allclose(net(x, t, 0), -eps / sigma)
    assert np.allclose(score_forward(net, x.numpy(), t, 0), (-eps / sigma).detach().numpy())


def test_flat_params_roundtrip():
    net = perturbed()
    theta = get_flat_params(net)
    other = build_net(net.arch, SCHED, seed=5)
    set_flat_params(other, theta)
    assert np.array_equal(get_flat_params(other), theta)
    with pytest.raises(ArgumentError):
        set_flat_params(other, theta[:-1])


def _fd_check(net, objective, n_coords=25, h=1e-6, seed=0):
    theta = get_flat_params(net)
    g = grad_of_scalar(net, objective)
    idx = np.random.default_rng(seed).choice(len(theta), n_coords, replace=False)
    fd = []
    for i in idx:
        for sgn in (1, -1):
            th = theta.copy()
            th[i] += sgn * h
            set_flat_params(net, th)
            fd.append(float(objective(net).detach()))
    set_flat_params(net, theta)
    fd = (np.array(fd[0::2]) - np.array(fd[1::2])) / (2 * h)
    return np.linalg.norm(g[idx] - fd) / np.linalg.norm(fd)


def test_grad_matches_finite_differences():
    net = perturbed()
    rng = np.random.default_rng(4)
    x = torch.as_tensor(rng.normal(size=(16, 2)))
    y = torch.as_tensor(rng.normal(size=(16, 2)))
    lam = torch.as_tensor(rng.uniform(0.1, 2.0, 16))
    obj = lambda m: ((m(x, 0.3, lam, [0, 1, 2, None] * 4) - y) ** 2).sum()  # noqa: E731
    assert _fd_check(net, obj) <= 1e-4


def test_grad_of_scalar_contracts():
    net = perturbed()
    with pytest.raises(ContractError):
        grad_of_scalar(net, lambda m: 1.0)
    with pytest.raises(ContractError):
        grad_of_scalar(net, lambda m: m(torch.zeros(2, 2, dtype=torch.float64), 0.5, 0.5, 0))
    zero = grad_of_scalar(net, lambda m: torch.tensor(3.0, dtype=torch.float64))
    assert np.all(zero == 0) and len(zero) == len(get_flat_params(net))


def test_snapshot_is_frozen_copy():
    net = perturbed()
    snap = snapshot(net)
    assert all(not p.requires_grad for p in snap.parameters())
    with torch.no_grad():
        next(net.parameters()).add_(1.0)
    assert not np.array_equal(get_flat_params(net), get_flat_params(snap))
