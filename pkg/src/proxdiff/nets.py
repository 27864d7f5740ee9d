"""Small conditional networks for the proximal operator and the score.

Both networks are residual MLPs in float64 conditioned on Fourier features of
time (and of log lambda for the prox net) and on a learned label embedding
whose last row is the reserved null token.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ArgumentError, ContractError, NumericError
from .schedule import NoiseSchedule

# log(lambda) is mapped to roughly [-1, 1] before the Fourier features.
_LOG_LAMBDA_CENTER = -1.0
_LOG_LAMBDA_SCALE = 4.0


@dataclass(frozen=True)
class ArchSpec:
    kind: str  # "prox" or "score"
    dim: int
    num_labels: int
    hidden: int = 128
    depth: int = 3
    n_freq: int = 8
    emb_dim: int = 32

    def as_dict(self):
        return asdict(self)


def fourier(v: torch.Tensor, n_freq: int) -> torch.Tensor:
    freqs = math.pi * (2.0 ** torch.arange(n_freq, dtype=torch.float64))
    ang = v[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def scalar_features(v: torch.Tensor, n_freq: int) -> torch.Tensor:
    """The raw value next to its Fourier features."""
    return torch.cat([v[:, None], fourier(v, n_freq)], dim=-1)


def token_index(c, num_labels: int, n: int) -> torch.Tensor:
    """Embedding rows for a condition (int, None, or a sequence of those)."""
    if c is None or isinstance(c, (int, np.integer)):
        c = [c] * n
    idx = []
    for lab in c:
        if lab is None:
            idx.append(num_labels)
        elif 0 <= int(lab) < num_labels:
            idx.append(int(lab))
        else:
            raise ArgumentError(f"unknown condition label {lab!r}")
    if len(idx) != n:
        raise ArgumentError(f"{len(idx)} condition tokens for a batch of {n}")
    return torch.tensor(idx, dtype=torch.long)


def _as_column(v, n):
    v = torch.as_tensor(v, dtype=torch.float64)
    if v.ndim == 0:
        v = v.expand(n)
    return v.reshape(n)


def _mlp(n_in, hidden, depth, n_out):
    layers = []
    width = n_in
    for _ in range(depth):
        layers += [nn.Linear(width, hidden), nn.SiLU()]
        width = hidden
    head = nn.Linear(width, n_out)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    return nn.Sequential(*layers, head)


class _ConditionalNet(nn.Module):
    def __init__(self, arch: ArchSpec, n_scalar_feats: int):
        super().__init__()
        self.arch = arch
        self.label_emb = nn.Embedding(arch.num_labels + 1, arch.emb_dim)
        self.scalar_emb = nn.Linear((2 * arch.n_freq + 1) * n_scalar_feats, arch.emb_dim)
        self.body = _mlp(arch.dim + 2 * arch.emb_dim, arch.hidden, arch.depth, arch.dim)

    def _features(self, x, scalars, c):
        n = x.shape[0]
        feats = torch.cat([scalar_features(s, self.arch.n_freq) for s in scalars], dim=-1)
        emb = self.label_emb(token_index(c, self.arch.num_labels, n))
        return torch.cat([x, self.scalar_emb(feats), emb], dim=-1)


def _check_input(x, dim):
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ArgumentError(f"expected points of shape (n, {dim}), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise NumericError("non-finite input to network")
    return x


class ProxNet(_ConditionalNet):
    """f(x; t, lam, c) = x + lam * (mlp(h) + A(cond) xn), h = (xn, t, log lam, c).

    ``xn = x / sqrt(1 + lam)`` keeps the input at unit scale, since queries are
    data plus noise of variance lam. The residual is scaled by lam because
    (f - x) / lam tends to the score as lam -> 0, a lam-free target for the
    MLP. ``A(cond)`` is a matrix that depends only on (t, lam, c). Far from the
    data a mixture prox is affine in x, and this term extrapolates that way
    where the MLP would not. The last MLP layer and A start at zero, so an
    untrained net is the identity, the lam -> 0 limit of a proximal operator.
    """

    def __init__(self, arch: ArchSpec, schedule: NoiseSchedule | None = None):
        if arch.kind != "prox":
            raise ArgumentError(f"ProxNet needs kind='prox', got {arch.kind!r}")
        super().__init__(arch, n_scalar_feats=2)
        self.schedule = schedule or NoiseSchedule()
        self.skip = nn.Linear(2 * arch.emb_dim, arch.dim * arch.dim)
        nn.init.zeros_(self.skip.weight)
        nn.init.zeros_(self.skip.bias)

    def forward(self, x, t, lam, c):
        x = _check_input(x, self.arch.dim)
        n = x.shape[0]
        t = _as_column(t, n)
        lam = _as_column(lam, n)
        if torch.any(lam <= 0):
            raise ArgumentError("lambda must be positive")
        log_lam = (torch.log(lam) - _LOG_LAMBDA_CENTER) / _LOG_LAMBDA_SCALE
        xn = x / torch.sqrt(1.0 + lam)[:, None]
        h = self._features(xn, [2.0 * t - 1.0, log_lam], c)
        d = self.arch.dim
        A = self.skip(h[:, d:]).reshape(n, d, d)
        out = self.body(h) + torch.bmm(A, xn[:, :, None])[:, :, 0]
        return x + lam[:, None] * out


class ScoreNet(_ConditionalNet):
    """Noise-prediction network; ``forward`` returns the score
    ``-eps_hat / sqrt(1 - alpha_t)``."""

    def __init__(self, arch: ArchSpec, schedule: NoiseSchedule):
        if arch.kind != "score":
            raise ArgumentError(f"ScoreNet needs kind='score', got {arch.kind!r}")
        super().__init__(arch, n_scalar_feats=1)
        self.schedule = schedule

    def sigma(self, t):
        s = self.schedule
        integral = s.beta_min * t + 0.5 * (s.beta_max - s.beta_min) * t * t
        return torch.sqrt(-torch.expm1(-integral))

    def eps(self, x, t, c):
        x = _check_input(x, self.arch.dim)
        t = _as_column(t, x.shape[0])
        return self.body(self._features(x, [2.0 * t - 1.0], c))

    def forward(self, x, t, c):
        x = _check_input(x, self.arch.dim)
        t = _as_column(t, x.shape[0])
        return -self.eps(x, t, c) / self.sigma(t)[:, None]


def build_net(arch: ArchSpec, schedule: NoiseSchedule, seed: int = 0):
    torch.manual_seed(seed)
    if arch.kind == "prox":
        return ProxNet(arch, schedule).double()
    if arch.kind == "score":
        return ScoreNet(arch, schedule).double()
    raise ArgumentError(f"unknown network kind {arch.kind!r}")


def prox_forward(net: ProxNet, x, t, lam, c) -> np.ndarray:
    """Evaluate the prox net on numpy inputs; returns a numpy array."""
    single = np.ndim(x) == 1
    with torch.no_grad():
        out = net(torch.as_tensor(np.atleast_2d(x), dtype=torch.float64), t, lam, c).numpy()
    return out[0] if single else out


def score_forward(net: ScoreNet, x, t, c) -> np.ndarray:
    single = np.ndim(x) == 1
    with torch.no_grad():
        out = net(torch.as_tensor(np.atleast_2d(x), dtype=torch.float64), t, c).numpy()
    return out[0] if single else out


def get_flat_params(net: nn.Module) -> np.ndarray:
    return nn.utils.parameters_to_vector(net.parameters()).detach().numpy().copy()


def set_flat_params(net: nn.Module, theta) -> None:
    theta = torch.as_tensor(np.asarray(theta, dtype=np.float64))
    n = sum(p.numel() for p in net.parameters())
    if theta.numel() != n:
        raise ArgumentError(f"parameter vector has {theta.numel()} entries, net has {n}")
    with torch.no_grad():
        nn.utils.vector_to_parameters(theta, net.parameters())


def grad_of_scalar(net: nn.Module, objective) -> np.ndarray:
    """Reverse-mode gradient of ``objective(net)`` w.r.t. the flat parameters.

    ``objective`` must build its value from torch operations on the net's
    outputs; a plain Python or numpy number means the graph was broken.
    """
    params = [p for p in net.parameters()]
    value = objective(net)
    if not isinstance(value, torch.Tensor):
        raise ContractError(
            f"objective returned {type(value).__name__}; it must be a torch scalar built "
            "from differentiable operations")
    if value.numel() != 1:
        raise ContractError(f"objective must be scalar, got shape {tuple(value.shape)}")
    if not value.requires_grad:
        return np.zeros(sum(p.numel() for p in params))
    grads = torch.autograd.grad(value.reshape(()), params, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1)
                      for p, g in zip(params, grads)]).numpy()


def snapshot(net: nn.Module) -> nn.Module:
    """Frozen deep copy, used as the behaviour (theta_old) or reference policy."""
    frozen = copy.deepcopy(net)
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen.eval()
