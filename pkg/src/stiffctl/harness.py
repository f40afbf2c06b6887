"""Experiment runs: training loop, evaluation, metrics files and ablation summaries.

A metrics file is a JSON header line followed by CSV (one row per epoch).
Wall-clock numbers go to a separate ``timing.json`` so that the metrics file
itself is reproducible byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from stiffctl import learner as L
from stiffctl import physics
from stiffctl.demos import augment_demo, generate_position_demos, load_demo
from stiffctl.envs import EnvConfig, Uncertainty, default_config, make_env
from stiffctl.envs.base import reward_lower_bound
from stiffctl.envs.episode import Episode
from stiffctl.replay import DEMO, BufferSet, concat, episode_transitions, her_relabel, sample_batch, select_imitation_source

log = logging.getLogger(__name__)

# bc: demos cloned; qf: Q-filter; reg: imitation regulator; stiff: stiffness action dims
CONDITIONS = {
    "pos_control": dict(bc=True, qf=True, reg=True, stiff=False),
    "c1_scratch": dict(bc=False, qf=False, reg=False, stiff=True),
    "c2": dict(bc=True, qf=False, reg=False, stiff=True),
    "c3": dict(bc=True, qf=False, reg=True, stiff=True),
    "c4": dict(bc=True, qf=True, reg=False, stiff=True),
    "c5_scape": dict(bc=True, qf=True, reg=True, stiff=True),
    "hybrid": dict(bc=True, qf=True, reg=False, stiff=True),
}
ABLATION = ("c1_scratch", "c2", "c3", "c4", "c5_scape")
ALIASES = {"pos": "pos_control", "c1": "c1_scratch", "c5": "c5_scape", "scape": "c5_scape"}

METRIC_FIELDS = [
    "epoch", "stage", "event", "episodes", "steps",
    "eval_task", "eval_safety", "eval_overall",
    "explore_safety", "explore_overall", "regulator_sr", "imitation_source",
    "mean_q", "mean_force", "mean_true_force", "mean_k",
    "critic_loss", "bc_count", "q_filter_evals", "demo_samples", "sil_fallbacks", "faults",
]


class ExperimentAborted(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    env_id: str = "block"
    condition: str = "c5_scape"
    seed: int = 0
    epochs: int = 50
    cycles_per_epoch: int = 50
    episodes_per_cycle: int = 2
    eval_episodes: int = 20
    demo_count: int = 25
    sr_ref: float | None = None  # None: the environment's default
    sr_window: int = 100
    k_future: int = 4
    uncertainty: Uncertainty | None = None  # None: the environment's defaults
    hybrid_switch_epoch: int | None = None  # None: half of the epochs
    learner: dict = field(default_factory=dict)  # LearnerConfig overrides
    env_overrides: dict = field(default_factory=dict)
    demo_path: str | None = None
    out_dir: str | None = None
    checkpoint: bool = True

    def __post_init__(self):
        self.condition = ALIASES.get(self.condition, self.condition)
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.epochs < 1 or self.cycles_per_epoch < 1 or self.episodes_per_cycle < 1:
            raise ValueError("epochs, cycles and episodes per cycle must be positive")

    @property
    def flags(self) -> dict:
        return CONDITIONS[self.condition]

    def env_config(self) -> EnvConfig:
        cfg = default_config(self.env_id, **self.env_overrides)
        cfg = dataclasses.replace(cfg, stiffness_control=self.flags["stiff"])
        if self.uncertainty is not None:
            cfg = dataclasses.replace(cfg, uncertainty=self.uncertainty)
        if self.sr_ref is not None:
            cfg = dataclasses.replace(cfg, sr_ref=self.sr_ref)
        return cfg

    def learner_config(self) -> L.LearnerConfig:
        lc = L.LearnerConfig(**self.learner)
        f = self.flags
        return dataclasses.replace(lc, q_filter_enabled=f["qf"], regulator_enabled=f["reg"], bc_weight=lc.bc_weight if f["bc"] else 0.0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _streams(seed: int) -> dict:
    names = ("nets", "train_env", "eval_env", "sample", "explore", "demos", "relabel")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def load_or_make_demos(cfg: ExperimentConfig, env_cfg: EnvConfig, rng):
    demo = load_demo(cfg.demo_path) if cfg.demo_path else generate_position_demos(env_cfg, cfg.demo_count, rng)
    if demo.action_kind == "stiffness":
        from stiffctl.demos import project_to_position

        demo = project_to_position(demo)
    if env_cfg.stiffness_control:
        demo = augment_demo(demo, env_cfg.k_passive, env_cfg.k_max)
    return demo


def _rollout(env, nets: L.NetBundle, lc: L.LearnerConfig, rng, explore: bool, freeze_stiffness=False):
    """One episode with the current actor. Returns the episode and per-step (k, q) values."""
    obs, goal = env.reset()
    observations, actions, rewards, infos, qs = [obs], [], [], [], []
    done = False
    while not done:
        o = obs.vector()
        a = nets.act(o, goal)
        if explore:
            a = L.explore_action(a, lc, rng)
        else:
            qs.append(float(nets.q(o, goal, a)))
        if freeze_stiffness:
            a = a.copy()
            a[-2:] = 0.0
        obs, r, done, flags, info = env.step(a)
        observations.append(obs)
        actions.append(a)
        rewards.append(r)
        infos.append(dict(info, intact=env.intact))
    ep = Episode(goal, observations, actions, rewards, flags, infos)
    return ep, qs


def evaluate(env, nets, lc, n, freeze_stiffness=False, on_episode=None) -> dict:
    task = safety = overall = 0
    qs, forces, true_forces, ks = [], [], [], []
    for _ in range(n):
        ep, q = _rollout(env, nets, lc, None, False, freeze_stiffness)
        if on_episode:
            on_episode(ep, False)
        task += ep.flags.task
        safety += ep.flags.safety
        overall += ep.flags.overall
        qs += q
        forces += [o.force_norm for o in ep.observations[1:]]
        true_forces += [i["true_force"] for i in ep.infos]
        ks += [i["k"] for i in ep.infos]
    return {
        "eval_task": task / n,
        "eval_safety": safety / n,
        "eval_overall": overall / n,
        "mean_q": float(np.mean(qs)),
        "mean_force": float(np.mean(forces)),
        "mean_true_force": float(np.mean(true_forces)),
        "mean_k": float(np.mean(ks)),
    }


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


class MetricsWriter:
    def __init__(self, path, header: dict):
        self.path = path
        self.f = open(path, "w", newline="")
        self.f.write(json.dumps(header, sort_keys=True, default=str) + "\n")
        self.w = csv.writer(self.f, lineterminator="\n")
        self.w.writerow(METRIC_FIELDS)
        self.f.flush()

    def row(self, values: dict) -> None:
        self.w.writerow([_fmt(values.get(k, "")) for k in METRIC_FIELDS])
        self.f.flush()

    def close(self):
        self.f.close()


def read_metrics(path) -> tuple[dict, list[dict]]:
    """Parses a metrics file back into (header, rows) with numeric fields as floats."""
    with open(path) as f:
        header = json.loads(f.readline())
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        d = {}
        for k, v in r.items():
            if k in ("stage", "event", "imitation_source"):
                d[k] = v
            else:
                d[k] = float(v) if v != "" else float("nan")
        out.append(d)
    return header, out


@dataclass
class StagePlan:
    stage: str
    use_demos: bool
    reward_cfg: EnvConfig
    freeze_stiffness: bool


def stage_plan(cfg: ExperimentConfig, env_cfg: EnvConfig, epoch: int) -> StagePlan:
    """What an epoch trains on. The hybrid baseline imitates without penalties first, then runs plain RL."""
    flags = cfg.flags
    if cfg.condition == "hybrid":
        switch = cfg.hybrid_switch_epoch or max(cfg.epochs // 2, 1)
        if epoch <= switch:
            return StagePlan("il_rl", True, dataclasses.replace(env_cfg, alpha=0.0, beta=0.0), True)
        return StagePlan("rl", False, env_cfg, False)
    if not flags["bc"]:
        return StagePlan("rl", False, env_cfg, False)
    return StagePlan("scape" if cfg.condition == "c5_scape" else cfg.condition, True, env_cfg, False)


@dataclass
class Hooks:
    """Optional observers. on_episode(ep, explore) sees every rollout; on_filter(nets, batch, mask)
    sees each Q-filter mask before the actor step that uses it."""

    on_episode: object = None
    on_filter: object = None


def run_experiment(cfg: ExperimentConfig, progress=None, hooks: Hooks | None = None) -> list[dict]:
    """Trains and evaluates one (condition, seed). Returns the metric rows written."""
    hooks = hooks or Hooks()
    flags = cfg.flags
    env_cfg = cfg.env_config()
    lc = cfg.learner_config()
    rng = _streams(cfg.seed)

    train_env = make_env(env_cfg, seed=int(rng["train_env"].integers(2**63 - 1)))
    eval_env = make_env(env_cfg, seed=int(rng["eval_env"].integers(2**63 - 1)))
    obs0, g0 = train_env.reset()
    lc = dataclasses.replace(
        lc,
        target_min=reward_lower_bound(env_cfg, train_env.force_bound(), train_env.joint_speed_bound()) / (1.0 - lc.discount),
    )
    nets = L.NetBundle.create(obs0.vector().size, g0.size, train_env.action_dim, lc, rng["nets"])

    demo_batch = None
    if flags["bc"]:
        demo = load_or_make_demos(cfg, env_cfg, rng["demos"])
        demo_batch = concat([episode_transitions(ep, env_cfg) for ep in demo.episodes])
    buffers = BufferSet.create(demo=demo_batch)

    writer = None
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        # the output location is left out so two runs of one seed write identical files
        experiment = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
        header = {"experiment": experiment, "learner": dataclasses.asdict(lc), "learner_digest": lc.digest(), "env": env_cfg.to_dict()}
        writer = MetricsWriter(os.path.join(cfg.out_dir, "metrics.csv"), header)
    timing = {"epoch_seconds": []}

    window = deque(maxlen=cfg.sr_window)
    rows, episodes, steps = [], 0, 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            plan = stage_plan(cfg, env_cfg, epoch)
            use_demos, reward_cfg, freeze = plan.use_demos, plan.reward_cfg, plan.freeze_stiffness
            explore_safe = explore_ok = 0
            losses, bc_count = [], 0
            source = DEMO
            for _cycle in range(cfg.cycles_per_epoch):
                for _ in range(cfg.episodes_per_cycle):
                    ep, _ = _rollout(train_env, nets, lc, rng["explore"], True, freeze)
                    if hooks.on_episode:
                        hooks.on_episode(ep, True)
                    episodes += 1
                    steps += ep.length
                    explore_safe += ep.flags.safety
                    explore_ok += ep.flags.overall
                    window.append(ep.flags.overall)
                    relabeled = her_relabel(ep, cfg.k_future, rng["relabel"], reward_cfg)
                    buffers.d_rl.add(relabeled)
                    if ep.flags.overall:
                        buffers.d_sil.add(episode_transitions(ep, reward_cfg))
                    nets.o_norm.update(relabeled["o"])
                    nets.g_norm.update(relabeled["g"])
                sr = float(np.mean(window))
                if use_demos and lc.regulator_enabled:
                    source = select_imitation_source(sr, env_cfg.sr_ref)
                else:
                    source = DEMO
                for _ in range(lc.updates_per_cycle):
                    rl_b = buffers.d_rl.sample(lc.batch_size, rng["sample"])
                    im_b = None
                    if use_demos:
                        im_b, used = sample_batch(buffers, source, lc.imitation_batch, rng["sample"])
                        if used == DEMO:
                            nets.counters["demo_samples"] += len(im_b)
                        im_b = im_b.rescored(reward_cfg)
                    rl_b = rl_b.rescored(reward_cfg)
                    critic_b = concat([rl_b, im_b]) if im_b is not None else rl_b
                    nets, closs = L.critic_update(nets, critic_b, lc)
                    mask = L.imitation_mask(nets, im_b, lc)
                    if hooks.on_filter and mask is not None and lc.q_filter_enabled:
                        hooks.on_filter(nets, im_b, mask)
                    nets, al = L.actor_update(nets, rl_b, im_b, source, lc, mask=mask)
                    losses.append(closs)
                    bc_count += al["bc_count"]
                nets = L.target_soft_update(nets, lc.polyak)
                if not (nets.actor.is_finite() and nets.critic.is_finite()):
                    raise ExperimentAborted(f"non-finite network parameters at epoch {epoch}")
            ev = evaluate(eval_env, nets, lc, cfg.eval_episodes, freeze, hooks.on_episode)
            n_train = cfg.cycles_per_epoch * cfg.episodes_per_cycle
            row = {
                "epoch": epoch,
                "stage": plan.stage,
                "event": "stage_switch" if epoch > 1 and plan.stage != stage_plan(cfg, env_cfg, epoch - 1).stage else "",
                "episodes": episodes,
                "steps": steps,
                **ev,
                "explore_safety": explore_safe / n_train,
                "explore_overall": explore_ok / n_train,
                "regulator_sr": float(np.mean(window)),
                "imitation_source": source if use_demos else "",
                "critic_loss": float(np.mean(losses)),
                "bc_count": bc_count,
                "q_filter_evals": nets.counters["q_filter_evals"],
                "demo_samples": nets.counters["demo_samples"],
                "sil_fallbacks": buffers.fallbacks,
                "faults": nets.faults,
            }
            rows.append(row)
            if writer:
                writer.row(row)
            timing["epoch_seconds"].append(time.perf_counter() - t0)
            if progress:
                progress(row)
            if cfg.out_dir and cfg.checkpoint:
                L.save_checkpoint(
                    nets,
                    os.path.join(cfg.out_dir, "checkpoint"),
                    {"epoch": epoch, "sr": row["regulator_sr"], "config_hash": lc.digest(), "condition": cfg.condition},
                )
    except (physics.SimulationFault, ExperimentAborted, FloatingPointError) as exc:
        log.error("experiment aborted: %s", exc)
        raise ExperimentAborted(str(exc)) from exc
    finally:
        if writer:
            writer.close()
            with open(os.path.join(cfg.out_dir, "timing.json"), "w") as f:
                json.dump(timing, f)
    return rows


def run_hybrid_baseline(cfg: ExperimentConfig, progress=None, hooks: Hooks | None = None) -> list[dict]:
    return run_experiment(dataclasses.replace(cfg, condition="hybrid"), progress, hooks)


# -- ablations ------------------------------------------------------------------------------


def summarize(results: dict, last=10) -> dict:
    """results: condition -> {seed: rows or None}. Mean/std of final overall and late exploration safety."""
    table = {}
    for cond, by_seed in results.items():
        ok = {s: r for s, r in by_seed.items() if r}
        failed = sorted(s for s, r in by_seed.items() if not r)
        if not ok:
            table[cond] = {"failed_seeds": failed}
            continue
        final = [r[-1]["eval_overall"] for r in ok.values()]
        late_safe = [np.mean([x["explore_safety"] for x in r[-last:]]) for r in ok.values()]
        curves = np.array([[x["eval_overall"] for x in r] for r in ok.values()])
        table[cond] = {
            "final_overall_mean": float(np.mean(final)),
            "final_overall_std": float(np.std(final)),
            "explore_safety_mean": float(np.mean(late_safe)),
            "explore_safety_std": float(np.std(late_safe)),
            "overall_curve_mean": curves.mean(axis=0).tolist(),
            "overall_curve_std": curves.std(axis=0).tolist(),
            "seeds": sorted(ok),
            "failed_seeds": failed,
        }
    return table


def format_table(table: dict) -> str:
    buf = io.StringIO()
    buf.write(f"{'condition':<12} {'final overall':>16} {'explore safety':>16}  failed\n")
    for cond, t in table.items():
        if "final_overall_mean" not in t:
            buf.write(f"{cond:<12} {'-':>16} {'-':>16}  {t['failed_seeds']}\n")
            continue
        buf.write(
            f"{cond:<12} {t['final_overall_mean']:>8.2f} ± {t['final_overall_std']:<5.2f} "
            f"{t['explore_safety_mean']:>8.2f} ± {t['explore_safety_std']:<5.2f}  {t['failed_seeds'] or ''}\n"
        )
    return buf.getvalue()


def run_ablation(env_id: str, seeds, base: ExperimentConfig | None = None, out_dir=None, conditions=ABLATION, progress=None) -> dict:
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("an ablation needs at least 3 seeds")
    base = base or ExperimentConfig(env_id=env_id)
    results = {}
    for cond in conditions:
        results[cond] = {}
        for seed in seeds:
            sub = os.path.join(out_dir, f"{cond}_seed{seed}") if out_dir else None
            cfg = dataclasses.replace(base, env_id=env_id, condition=cond, seed=seed, out_dir=sub)
            log.info("running %s seed %s", cond, seed)
            try:
                results[cond][seed] = run_experiment(cfg, progress)
            except ExperimentAborted as exc:
                log.error("%s seed %s failed: %s", cond, seed, exc)
                results[cond][seed] = None
    table = summarize(results)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(table, f, indent=1)
        with open(os.path.join(out_dir, "summary.txt"), "w") as f:
            f.write(format_table(table))
    return table
