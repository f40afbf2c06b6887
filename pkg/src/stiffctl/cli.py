"""Command line entry point: train, ablate, demos, plot."""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import os
import sys

import numpy as np

from stiffctl.envs import ENV_IDS, Uncertainty, default_config, load_config_file

SEED_ENV = "STIFFCTL_SEED"
CONDITION_CHOICES = ["pos", "c1", "c2", "c3", "c4", "c5", "hybrid"]

log = logging.getLogger("stiffctl")


def _seed(value: int) -> int:
    """The STIFFCTL_SEED environment variable, when set, overrides every seed."""
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else value


def _uncertainty(args) -> Uncertainty | None:
    return Uncertainty.none() if args.no_uncertainty else None


def _base_config(args):
    from stiffctl.harness import ExperimentConfig

    overrides = {}
    if getattr(args, "env_config", None):
        cfg = load_config_file(args.env_config)
        if cfg.env_id != args.env:
            raise SystemExit(f"config file is for {cfg.env_id}, not {args.env}")
        keep = ("alpha", "beta", "d", "fragility", "k_passive", "horizon", "velocity_threshold", "params", "randomize")
        overrides = {k: getattr(cfg, k) for k in keep}
    unc = _uncertainty(args)
    return ExperimentConfig(
        env_id=args.env,
        epochs=args.epochs,
        cycles_per_epoch=args.cycles,
        demo_count=args.demo_count,
        eval_episodes=args.eval_episodes,
        demo_path=getattr(args, "demos", None),
        uncertainty=unc,
        env_overrides=overrides,
    )


def cmd_train(args) -> int:
    from stiffctl.harness import ExperimentAborted, run_experiment

    cfg = dataclasses.replace(_base_config(args), condition=args.condition, seed=_seed(args.seed), out_dir=args.out)

    def progress(row):
        log.info("epoch %d overall %.2f task %.2f safety %.2f k %.1f", row["epoch"], row["eval_overall"], row["eval_task"], row["eval_safety"], row["mean_k"])

    try:
        run_experiment(cfg, progress)
    except ExperimentAborted as exc:
        log.error("aborted: %s (partial log in %s)", exc, args.out)
        return 2
    return 0


def cmd_ablate(args) -> int:
    from stiffctl.harness import format_table, run_ablation

    seeds = [_seed(int(s)) for s in args.seeds.split(",")]
    if len(set(seeds)) < 3:
        log.error("an ablation needs at least 3 distinct seeds")
        return 1
    from stiffctl.harness import ALIASES, CONDITIONS

    conds = [ALIASES.get(c, c) for c in args.conditions.split(",")]
    unknown = [c for c in conds if c not in CONDITIONS]
    if unknown:
        log.error("unknown condition(s): %s", ", ".join(unknown))
        return 1
    def progress(row):
        log.info("epoch %d overall %.2f explore safety %.2f k %.1f", row["epoch"], row["eval_overall"], row["explore_safety"], row["mean_k"])

    table = run_ablation(args.env, seeds, _base_config(args), out_dir=args.out, conditions=conds, progress=progress)
    print(format_table(table))
    failed = any(t.get("failed_seeds") for t in table.values())
    return 2 if failed else 0


def cmd_demos(args) -> int:
    from stiffctl.demos import DemoError, augment_demo, generate_position_demos, save_demo

    cfg = default_config(args.env)
    if args.env_config:
        cfg = load_config_file(args.env_config)
    rng = np.random.default_rng(_seed(args.seed))
    try:
        demo = generate_position_demos(cfg, args.count, rng)
    except DemoError as exc:
        log.error("%s", exc)
        return 2
    if args.augment:
        demo = augment_demo(demo, cfg.k_passive, cfg.k_max)
    save_demo(demo, args.out)
    rates = {"task": np.mean([e.flags.task for e in demo.episodes]), "safety": np.mean([e.flags.safety for e in demo.episodes])}
    log.info("wrote %d demos to %s (attempts %d, safety rate %.2f)", demo.count, args.out, demo.meta["attempts"], rates["safety"])
    return 0


def cmd_plot(args) -> int:
    from stiffctl.plots import emit_plots

    files = sorted(glob.glob(os.path.join(args.inp, "**", "metrics.csv"), recursive=True))
    if not files:
        log.error("no metrics.csv under %s", args.inp)
        return 1
    out = args.out or os.path.join(args.inp, "plots")
    result = emit_plots(files, out)
    for path, reason in result["skipped"]:
        log.warning("skipped %s: %s", path, reason)
    print(json.dumps({"written": len(result["written"]), "skipped": len(result["skipped"]), "out": out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stiffctl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--env", choices=ENV_IDS, required=True)
        sp.add_argument("--epochs", type=int, default=50)
        sp.add_argument("--cycles", type=int, default=50, help="cycles per epoch")
        sp.add_argument("--demo-count", type=int, default=25)
        sp.add_argument("--eval-episodes", type=int, default=20)
        sp.add_argument("--demos", help="demo file (JSON lines) instead of generating demos")
        sp.add_argument("--env-config", help="INI file with [env]/[uncertainty]/[physics] sections")
        sp.add_argument("--no-uncertainty", action="store_true")

    t = sub.add_parser("train", help="train one condition/seed")
    common(t)
    t.add_argument("--condition", choices=CONDITION_CHOICES, default="c5")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="conditions 1-5 over several seeds")
    common(a)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--conditions", default="c1,c2,c3,c4,c5", help="comma list, e.g. pos,c1,c2,c3,c4,c5,hybrid")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("demos", help="record expert position-control demos")
    d.add_argument("--env", choices=ENV_IDS, required=True)
    d.add_argument("--count", type=int, default=25)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--augment", action="store_true", help="store the stiffness-augmented version")
    d.add_argument("--env-config")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_demos)

    pl = sub.add_parser("plot", help="SVG plots for every metrics.csv under a directory")
    pl.add_argument("--in", dest="inp", required=True)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
