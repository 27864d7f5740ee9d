"""Staged experiment pipeline: pretrain, sample sweeps, optional GRPO, resample.

Artifacts under ``output_dir``:

    metrics.csv            one row per (stage, sampler, K, seed) cell
    timings.csv            wall-clock seconds per cell (kept apart so that
                           metrics.csv is byte-identical across reruns)
    curves/<net>-seed<s>.csv, grpo-seed<s>.csv
    samples/<tag>.csv      generated points, 17 significant digits
    checkpoints/<stage>-seed<s>.ckpt
    manifest.txt           config echo plus sha256 of every file above
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import ProxDiffError, StageError
from .grpo import grpo_update_loop, make_reward
from .metrics import energy_distance
from .nets import build_net
from .pretrain import StepGridSet, train_prox, train_score
from .rng import STREAM_TARGET_COMPONENT, STREAM_TARGET_SAMPLE, CounterRNG
from .samplers import SCORE_RULES, NetProx, NetScore, StepRule, run_chain
from .schedule import make_time_grid

logger = logging.getLogger(__name__)

MAX_DUMP_ROWS = 100_000
METRIC_FIELDS = ["experiment_id", "stage", "sampler", "K", "omega", "seed",
                 "energy_distance", "mean_reward"]
# Reference samples use seeds offset from the experiment seed so they never
# coincide with sampler noise.
_REFERENCE_SEED_OFFSET = 1_000_003


def fmt(x) -> str:
    """Round-trip decimal for a float64."""
    return format(float(x), ".17g")


def write_points(path, points, max_rows: int = MAX_DUMP_ROWS, seed: int = 0) -> Path:
    points = np.atleast_2d(points)
    if len(points) > max_rows:
        idx = np.sort(np.random.default_rng(seed).choice(len(points), max_rows, replace=False))
        points = points[idx]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(points.shape[1])])
        w.writerows([[fmt(v) for v in row] for row in points])
    return path


def read_points(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)


def write_rows(path, fields, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: fmt(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def reference_samples(target, n_per_label: int, seed: int):
    """(points, labels): ``n_per_label`` draws from each label's distribution."""
    r = CounterRNG(seed)
    labels = np.repeat(np.arange(target.num_labels), n_per_label)
    n = len(labels)
    pts = target.sample(labels, r.uniform(STREAM_TARGET_COMPONENT, 0, 0, n)[:, 0],
                        r.normal(STREAM_TARGET_SAMPLE, 0, 0, n, target.dim))
    return pts, labels


def generate(rule: StepRule, grid, fn, target, n_per_label: int, seed: int):
    """Run ``n_per_label`` chains per label; chain ids are disjoint across labels."""
    out = []
    for c in range(target.num_labels):
        rec = run_chain(rule, grid, fn, c, seed, n=n_per_label, dim=target.dim,
                        chain_offset=c * n_per_label)
        out.append(rec.final)
    return np.concatenate(out), np.repeat(np.arange(target.num_labels), n_per_label)


def _mean_reward(reward, points, labels):
    if reward is None:
        return ""
    return float(np.mean(np.concatenate([reward(points[labels == c], int(c))
                                         for c in np.unique(labels)])))


def _sweep(cfg: ExperimentConfig, stage, seed, nets, reward, gridset, out_dir, metrics, timings):
    ref, _ = reference_samples(cfg.target, cfg.eval_samples, seed + _REFERENCE_SEED_OFFSET)
    for sampler in cfg.samplers:
        if stage == "grpo" and sampler in SCORE_RULES:
            continue
        rule = StepRule(sampler, cfg.cfg_omega)
        fn = (NetScore(nets["score"]) if sampler in SCORE_RULES
              else NetProx(nets["prox"], support=gridset.support()))
        for K in cfg.steps:
            t0 = time.perf_counter()
            grid = make_time_grid(cfg.schedule, K, cfg.t_min)
            pts, labels = generate(rule, grid, fn, cfg.target, cfg.eval_samples, seed)
            tag = f"{stage}-{sampler}-K{K}-w{cfg.cfg_omega:g}-seed{seed}"
            write_points(out_dir / "samples" / f"{tag}.csv", pts, seed=seed)
            metrics.append({"experiment_id": cfg.experiment_id, "stage": stage,
                            "sampler": sampler, "K": K, "omega": float(cfg.cfg_omega),
                            "seed": seed, "energy_distance": energy_distance(pts, ref),
                            "mean_reward": _mean_reward(reward, pts, labels)})
            timings.append({"stage": stage, "sampler": sampler, "K": K, "seed": seed,
                            "seconds": round(time.perf_counter() - t0, 3)})
            logger.info("%s: energy distance %.5f", tag, metrics[-1]["energy_distance"])


def _run_seed(cfg: ExperimentConfig, seed, gridset, reward, out_dir, metrics, timings):
    pcfg = dataclasses.replace(cfg.pretrain, seed=seed)
    nets = {}
    stage = "pretrain"
    try:
        for kind, needed in (("prox", cfg.needs_prox), ("score", cfg.needs_score)):
            if not needed:
                continue
            t0 = time.perf_counter()
            net = build_net(cfg.arch(kind), cfg.schedule, seed=seed)
            if kind == "prox":
                curve = train_prox(net, cfg.target, pcfg, gridset)
            else:
                curve = train_score(net, cfg.target, pcfg, cfg.schedule, cfg.t_min)
            write_rows(out_dir / "curves" / f"{kind}-seed{seed}.csv", ["iteration", "loss"],
                       [{"iteration": i, "loss": float(l)} for i, l in curve])
            save_checkpoint(net, {"stage": "pretrain", "kind": kind, "seed": seed},
                            out_dir / "checkpoints" / f"pretrain-{kind}-seed{seed}.ckpt")
            timings.append({"stage": f"pretrain-{kind}", "sampler": "", "K": "", "seed": seed,
                            "seconds": round(time.perf_counter() - t0, 3)})
            nets[kind] = net
        stage = "sample"
        _sweep(cfg, "pretrain", seed, nets, reward, gridset, out_dir, metrics, timings)
        if cfg.grpo is None:
            return
        stage = "grpo"
        ckpt = out_dir / "checkpoints" / f"pretrain-prox-seed{seed}.ckpt"
        net, _ = load_checkpoint(ckpt, expect_arch=cfg.arch("prox"))
        t0 = time.perf_counter()
        log = grpo_update_loop(net, reward, list(cfg.prompts), cfg.grpo, seed,
                               cfg.schedule, cfg.t_min)
        write_rows(out_dir / "curves" / f"grpo-seed{seed}.csv",
                   ["update", "mean_reward", "mean_kl", "clip_fraction"], log)
        save_checkpoint(net, {"stage": "grpo", "kind": "prox", "seed": seed},
                        out_dir / "checkpoints" / f"grpo-prox-seed{seed}.ckpt")
        timings.append({"stage": "grpo", "sampler": "", "K": "", "seed": seed,
                        "seconds": round(time.perf_counter() - t0, 3)})
        stage = "resample"
        _sweep(cfg, "grpo", seed, {"prox": net}, reward, gridset, out_dir, metrics, timings)
    except ProxDiffError as exc:
        raise StageError(stage, seed, exc) from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, config_text: str) -> Path:
    files = sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != "manifest.txt")
    lines = ["# config", *(f"| {line}" for line in config_text.splitlines()), "# files"]
    lines += [f"{sha256_file(p)}  {p.relative_to(out_dir).as_posix()}" for p in files]
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Run every stage for every seed; returns the output directory."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gridset = StepGridSet(cfg.step_grid, cfg.schedule, cfg.t_min)
    reward = make_reward(cfg.reward, cfg.target) if cfg.reward else None
    metrics, timings = [], []
    for seed in cfg.seeds:
        _run_seed(cfg, seed, gridset, reward, out_dir, metrics, timings)
    write_rows(out_dir / "metrics.csv", METRIC_FIELDS, metrics)
    write_rows(out_dir / "timings.csv", ["stage", "sampler", "K", "seed", "seconds"], timings)
    write_manifest(out_dir, cfg.text)
    return out_dir
