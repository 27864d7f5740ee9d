"""Command-line entry point: ``proxdiff <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .errors import ProxDiffError
from .experiment import read_points, reference_samples, run_experiment, write_points, write_rows
from .grpo import REWARDS, GRPOConfig, grpo_update_loop, make_reward
from .metrics import energy_distance
from .nets import build_net
from .oracle_check import CHECKS, run_checks
from .pretrain import StepGridSet, train_prox, train_score
from .samplers import ALL_RULES, SCORE_RULES, NetProx, NetScore, StepRule, run_chain
from .schedule import make_time_grid


def _cmd_run(args):
    cfg = load_config(args.config)
    if args.output_dir:
        cfg = dataclasses.replace(cfg, output_dir=Path(args.output_dir))
    out = run_experiment(cfg)
    print(f"artifacts written to {out}")


def _cmd_pretrain(args):
    cfg = load_config(args.config)
    pcfg = dataclasses.replace(cfg.pretrain, seed=args.seed)
    net = build_net(cfg.arch(args.kind), cfg.schedule, seed=args.seed)
    if args.kind == "prox":
        curve = train_prox(net, cfg.target, pcfg, StepGridSet(cfg.step_grid, cfg.schedule, cfg.t_min))
    else:
        curve = train_score(net, cfg.target, pcfg, cfg.schedule, cfg.t_min)
    save_checkpoint(net, {"stage": "pretrain", "kind": args.kind, "seed": args.seed}, args.out)
    if args.curve:
        write_rows(args.curve, ["iteration", "loss"],
                   [{"iteration": i, "loss": float(l)} for i, l in curve])
    print(f"final loss {curve[-1][1]:.6g}; checkpoint {args.out}")


def _cmd_sample(args):
    net, meta = load_checkpoint(args.checkpoint)
    rule = StepRule(args.sampler, args.cfg_omega)
    if (args.sampler in SCORE_RULES) != (net.arch.kind == "score"):
        raise ProxDiffError(f"sampler {args.sampler} cannot use a {net.arch.kind} checkpoint")
    grid = make_time_grid(net.schedule, args.steps, args.t_min)
    fn = NetScore(net) if net.arch.kind == "score" else NetProx(net)
    c = None if args.label == "null" else int(args.label)
    rec = run_chain(rule, grid, fn, c, args.seed, n=args.n)
    write_points(args.out, rec.final, seed=args.seed)
    print(f"{args.n} samples written to {args.out}")


def _read_prompts(path):
    labels = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            labels.append(int(line))
    if not labels:
        raise ProxDiffError(f"no prompts in {path}")
    return labels


def _cmd_grpo(args):
    cfg = load_config(args.config)
    net, _ = load_checkpoint(args.checkpoint, expect_arch=cfg.arch("prox"))
    gcfg = GRPOConfig(group=args.group, steps=args.steps, kl=args.kl, clip=args.clip,
                      omega=args.omega, prompts_per_batch=args.prompts_per_batch, lr=args.lr,
                      updates=args.updates)
    prompts = _read_prompts(args.prompts) if args.prompts else list(cfg.prompts)
    out = Path(args.out_dir)
    every = args.checkpoint_every

    def on_update(row, current):
        if every and (row["update"] + 1) % every == 0:
            save_checkpoint(current, {"stage": "grpo", "update": row["update"] + 1},
                            out / "checkpoints" / f"grpo-{row['update'] + 1}.ckpt")

    log = grpo_update_loop(net, make_reward(args.reward, cfg.target), prompts, gcfg, args.seed,
                           cfg.schedule, cfg.t_min, on_update=on_update)
    write_rows(out / "grpo.csv", ["update", "mean_reward", "mean_kl", "clip_fraction"], log)
    save_checkpoint(net, {"stage": "grpo", "update": len(log)}, out / "checkpoints" / "grpo.ckpt")
    print(f"mean reward {log[0]['mean_reward']:.4f} -> {log[-1]['mean_reward']:.4f}")


def _cmd_eval(args):
    cfg = load_config(args.config)
    pts = read_points(args.samples)
    if args.label is None:
        n = -(-len(pts) // cfg.target.num_labels)
        ref, _ = reference_samples(cfg.target, n, args.seed)
    else:
        ref_all, labels = reference_samples(cfg.target, len(pts), args.seed)
        ref = ref_all[labels == args.label]
    print(f"energy_distance {energy_distance(pts, ref):.17g}")


def _cmd_oracle_check(args):
    ok = run_checks(sys.stdout, args.only or None)
    print("all checks passed" if ok else "some checks FAILED")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="proxdiff", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run the full staged pipeline from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir")
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("pretrain", help="train one network")
    s.add_argument("--config", required=True)
    s.add_argument("--kind", choices=["prox", "score"], default="prox")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--curve", help="training-curve CSV path")
    s.set_defaults(func=_cmd_pretrain)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sampler", choices=ALL_RULES, default="pda-hybrid")
    s.add_argument("--cfg-omega", type=float, default=0.0)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--t-min", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--label", default="0", help="condition label or 'null'")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_sample)

    d = GRPOConfig()
    s = sub.add_parser("grpo", help="fine-tune a prox checkpoint with GRPO")
    s.add_argument("--config", required=True, help="config holding the target and schedule")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--reward", choices=sorted(REWARDS), default="mode-dist")
    s.add_argument("--group", type=int, default=d.group)
    s.add_argument("--steps", type=int, default=d.steps)
    s.add_argument("--kl", type=float, default=d.kl)
    s.add_argument("--clip", type=float, default=d.clip)
    s.add_argument("--omega", type=float, default=d.omega)
    s.add_argument("--prompts-per-batch", type=int, default=d.prompts_per_batch)
    s.add_argument("--lr", type=float, default=d.lr)
    s.add_argument("--updates", type=int, default=d.updates)
    s.add_argument("--prompts", help="file with one label per line")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--checkpoint-every", type=int, default=100)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=_cmd_grpo)

    s = sub.add_parser("eval", help="energy distance of a sample CSV to the config target")
    s.add_argument("--config", required=True)
    s.add_argument("--samples", required=True)
    s.add_argument("--label", type=int, help="compare to one label instead of the full mixture")
    s.add_argument("--seed", type=int, default=12345)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("oracle-check", help="run the oracle self-checks; nonzero exit on failure")
    s.add_argument("--only", nargs="*", choices=sorted(CHECKS))
    s.set_defaults(func=_cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except ProxDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
