"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Every key except
``target.component`` may appear once; unknown keys are errors.

Keys (defaults in brackets):

    experiment_id        run label written to metrics rows [experiment]
    output_dir           where artifacts go [runs/<experiment_id>]
    target               ring | gaussian | custom [ring]
    target.labels        number of condition labels [2]
    target.modes         ring: number of modes [8]
    target.radius        ring: circle radius [4.0]
    target.sigma2        ring/gaussian: component variance [0.09 ring, 1.0 gaussian]
    target.mean          gaussian: comma-separated mean [0,0]
    target.component     custom, repeatable: <label> <weight> <sigma2> <mean_1> ... <mean_d>
    beta_min, beta_max   noise schedule [0.1, 20.0]
    t_min                first grid time [0.001]
    step_grid            step counts trained for [4,5,6,7,8,9,10,25]
    steps                step counts swept at sampling time [4,10]
    zeta, p_null         proximal-matching sharpness, null-label rate [1.0, 0.1]
    batch, iters, lr     pretraining [256, 20000, 0.001]
    optimizer, momentum  sgd | adam, SGD momentum [sgd, 0.9]
    lr_decay             none | cosine (anneal the rate to zero over iters) [none]
    weighting            uniform | inverse-variance (per-sample (1 + lam) / lam) [uniform]
    hidden, depth        network width and depth [128, 3]
    samplers             comma list of sde-euler, ode-euler, pda, pda-hybrid [pda-hybrid,sde-euler]
    cfg_omega            guidance weight for sweeps [0.0]
    seeds                comma list [0]
    eval_samples         samples per label per sweep cell [1000]
    reward               mode-dist | ring | none [none]
    grpo                 true | false: run the fine-tuning stage [false]
    grpo.group, grpo.steps, grpo.kl, grpo.clip, grpo.omega, grpo.prompts_per_batch,
    grpo.lr, grpo.updates, grpo.accum, grpo.inner_epochs
                         fine-tuning settings [see GRPOConfig]
    prompts              comma list of labels prompted during fine-tuning [all labels]
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ProxDiffError
from .grpo import REWARDS, GRPOConfig
from .nets import ArchSpec
from .pretrain import DEFAULT_STEP_COUNTS, PretrainConfig
from .samplers import ALL_RULES, SCORE_RULES, StepRule
from .schedule import DEFAULT_T_MIN, NoiseSchedule
from .targets import Component, MixtureTarget, gaussian_target, ring_target

_SCALAR_KEYS = {
    "experiment_id", "output_dir", "target", "target.labels", "target.modes", "target.radius",
    "target.sigma2", "target.mean", "beta_min", "beta_max", "t_min", "step_grid", "steps",
    "zeta", "p_null", "batch", "iters", "lr", "optimizer", "momentum", "lr_decay", "weighting",
    "hidden",
    "depth",
    "samplers", "cfg_omega", "seeds", "eval_samples", "reward", "grpo", "prompts",
} | {f"grpo.{f.name}" for f in dataclasses.fields(GRPOConfig) if f.name != "eps_std"}
_REPEATABLE = {"target.component"}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    output_dir: Path
    target: MixtureTarget
    schedule: NoiseSchedule
    t_min: float
    step_grid: tuple
    steps: tuple
    pretrain: PretrainConfig
    hidden: int
    depth: int
    samplers: tuple
    cfg_omega: float
    seeds: tuple
    eval_samples: int
    reward: str | None
    grpo: GRPOConfig | None
    prompts: tuple
    text: str = field(default="", compare=False)

    def arch(self, kind: str) -> ArchSpec:
        return ArchSpec(kind, self.target.dim, self.target.num_labels,
                        hidden=self.hidden, depth=self.depth)

    @property
    def needs_score(self):
        return any(s in SCORE_RULES for s in self.samplers)

    @property
    def needs_prox(self):
        return self.grpo is not None or any(s not in SCORE_RULES for s in self.samplers)


def parse_pairs(text: str):
    """Split config text into a dict of scalar keys and lists of repeatable keys."""
    scalars, repeated = {}, {k: [] for k in _REPEATABLE}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _REPEATABLE:
            repeated[key].append((lineno, value))
        elif key in _SCALAR_KEYS:
            if key in scalars:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            scalars[key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return scalars, repeated


def _num_list(value, cast, key):
    try:
        return tuple(cast(v) for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc


class _Reader:
    def __init__(self, scalars):
        self.s = scalars

    def get(self, key, cast, default):
        if key not in self.s:
            return default
        try:
            return cast(self.s[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {self.s[key]!r}") from exc

    def flag(self, key, default=False):
        v = self.s.get(key)
        if v is None:
            return default
        if v.lower() in ("true", "yes", "1"):
            return True
        if v.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {v!r}")


def _build_target(r: _Reader, components):
    kind = r.get("target", str, "ring")
    labels = r.get("target.labels", int, 2)
    if kind == "ring":
        return ring_target(r.get("target.modes", int, 8), r.get("target.radius", float, 4.0),
                           r.get("target.sigma2", float, 0.09), labels)
    if kind == "gaussian":
        mean = r.get("target.mean", lambda v: _num_list(v, float, "target.mean"), (0.0, 0.0))
        return gaussian_target(mean, r.get("target.sigma2", float, 1.0), labels)
    if kind != "custom":
        raise ConfigError(f"target: unknown kind {kind!r} (ring, gaussian, custom)")
    if not components:
        raise ConfigError("target = custom needs target.component lines")
    per_label = [[] for _ in range(labels)]
    dims = set()
    for lineno, value in components:
        parts = value.split()
        if len(parts) < 4:
            raise ConfigError(f"line {lineno}: target.component needs label weight sigma2 mean...")
        try:
            c, w, s2 = int(parts[0]), float(parts[1]), float(parts[2])
            mean = tuple(float(p) for p in parts[3:])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: cannot parse component {value!r}") from exc
        if not 0 <= c < labels:
            raise ConfigError(f"line {lineno}: label {c} outside 0..{labels - 1}")
        per_label[c].append(Component(w, mean, s2))
        dims.add(len(mean))
    if len(dims) != 1:
        raise ConfigError(f"components disagree on dimension: {sorted(dims)}")
    return MixtureTarget(dim=dims.pop(), components=tuple(tuple(p) for p in per_label))


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    scalars, repeated = parse_pairs(text)
    r = _Reader(scalars)
    try:
        target = _build_target(r, repeated["target.component"])
        schedule = NoiseSchedule(r.get("beta_min", float, 0.1), r.get("beta_max", float, 20.0))
        t_min = r.get("t_min", float, DEFAULT_T_MIN)
        step_grid = r.get("step_grid", lambda v: _num_list(v, int, "step_grid"), DEFAULT_STEP_COUNTS)
        steps = r.get("steps", lambda v: _num_list(v, int, "steps"), (4, 10))
        optimizer = r.get("optimizer", str, "sgd")
        if optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer: expected sgd or adam, got {optimizer!r}")
        pretrain = PretrainConfig(
            batch=r.get("batch", int, 256), lr=r.get("lr", float, 1e-3),
            iters=r.get("iters", int, 20_000), zeta=r.get("zeta", float, 1.0),
            p_null=r.get("p_null", float, 0.1), momentum=r.get("momentum", float, 0.9),
            optimizer=optimizer, lr_decay=r.get("lr_decay", str, "none"),
            weighting=r.get("weighting", str, "uniform"))
        samplers = r.get("samplers", lambda v: tuple(s.strip() for s in v.split(",") if s.strip()),
                         ("pda-hybrid", "sde-euler"))
        cfg_omega = r.get("cfg_omega", float, 0.0)
        for s in samplers:
            StepRule(s, cfg_omega)
        prox_samplers = [s for s in samplers if s in ALL_RULES and s not in SCORE_RULES]
        if prox_samplers and not set(steps) <= set(step_grid):
            raise ConfigError(f"steps {steps} must be a subset of step_grid {step_grid}: "
                              "proximal samplers only query trained (t, lambda) pairs")
        seeds = r.get("seeds", lambda v: _num_list(v, int, "seeds"), (0,))
        reward = r.get("reward", str, "none")
        if reward == "none":
            reward = None
        elif reward not in REWARDS:
            raise ConfigError(f"reward: unknown {reward!r}; choose from {sorted(REWARDS)} or none")
        grpo = None
        if r.flag("grpo"):
            if reward is None:
                raise ConfigError("grpo = true needs a reward")
            kw = {}
            for f in dataclasses.fields(GRPOConfig):
                key = f"grpo.{f.name}"
                if key in scalars:
                    kw[f.name] = r.get(key, type(f.default), f.default)
            grpo = GRPOConfig(**kw)
        prompts = r.get("prompts", lambda v: _num_list(v, int, "prompts"),
                        tuple(range(target.num_labels)))
        if any(not 0 <= p < target.num_labels for p in prompts):
            raise ConfigError(f"prompts {prompts} must be labels of the target")
        experiment_id = r.get("experiment_id", str, "experiment")
        out = Path(r.get("output_dir", str, f"runs/{experiment_id}"))
        if base_dir is not None and not out.is_absolute():
            out = base_dir / out
        return ExperimentConfig(
            experiment_id=experiment_id, output_dir=out, target=target, schedule=schedule,
            t_min=t_min, step_grid=step_grid, steps=steps, pretrain=pretrain,
            hidden=r.get("hidden", int, 128), depth=r.get("depth", int, 3),
            samplers=samplers, cfg_omega=cfg_omega, seeds=seeds,
            eval_samples=r.get("eval_samples", int, 1000), reward=reward, grpo=grpo,
            prompts=prompts, text=text)
    except ConfigError:
        raise
    except ProxDiffError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=None)
