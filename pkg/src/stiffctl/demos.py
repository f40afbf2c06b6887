"""Scripted position-control experts, demo recording, and stiffness augmentation.

Experts know nothing about fragility: whenever they hold something they
command a full close. Augmentation turns their position actions into
stiffness actions that keep k at k_passive, which is why the resulting demos
are kinematically good but unsafe.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from stiffctl.envs import EnvConfig, Observation, make_env
from stiffctl.envs.episode import Episode, run_episode


class DemoError(RuntimeError):
    pass


@dataclass
class Demo:
    env_id: str
    action_kind: str  # "position" or "stiffness"
    episodes: list[Episode]
    k_passive: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.action_kind not in ("position", "stiffness"):
            raise ValueError(f"bad action_kind {self.action_kind!r}")
        dims = {len(a) for ep in self.episodes for a in ep.actions}
        if len(dims) > 1:
            raise ValueError(f"mixed action dimensions {sorted(dims)}")

    @property
    def count(self) -> int:
        return len(self.episodes)

    @property
    def action_dim(self) -> int:
        return len(self.episodes[0].actions[0]) if self.episodes else 0


# -- experts --------------------------------------------------------------------------------


class BlockExpert:
    """Approach above the block, descend, close fully, carry to the goal and hold."""

    def __init__(self, config: EnvConfig):
        self.p = config.params
        self.move = self.p["move_scale"]
        self.reset()

    def reset(self):
        self.phase = 0
        self.closing = 0

    def __call__(self, obs: Observation, goal):
        kin = obs.kinematics
        grip, objp, rel, w = kin[0:2], kin[2:4], kin[4:6], kin[6]
        grip_cmd = 0.0
        if self.phase == 0:
            target = objp + np.array([0.0, 0.06])
            if abs(rel[0]) < 0.01:
                self.phase = 1
        if self.phase == 1:
            target = objp.copy()
            if np.linalg.norm(rel) < 0.008:
                self.phase = 2
        if self.phase == 2:
            target, grip_cmd = objp.copy(), -1.0
            self.closing += 1
            if self.closing > 4 and w < self.p["block_half"] + 1e-3:
                self.phase = 3
        if self.phase == 3:
            target, grip_cmd = np.asarray(goal, dtype=np.float64), -1.0
            # dropped it: go back for another grasp
            if np.linalg.norm(rel) > 2 * self.p["pad_half"]:
                self.phase, self.closing = 0, 0
                grip_cmd = 1.0
        move = np.clip((target - grip) / self.move, -1.0, 1.0)
        return np.array([move[0], move[1], grip_cmd])


def make_expert(config: EnvConfig):
    if config.env_id == "block":
        return BlockExpert(config)
    if config.env_id == "chip":
        from stiffctl.envs.chip import ChipExpert

        return ChipExpert(config)
    if config.env_id == "fingers":
        from stiffctl.envs.fingers import FingersExpert

        return FingersExpert(config)
    raise ValueError(config.env_id)


def position_config(config: EnvConfig) -> EnvConfig:
    """The config the experts run under: no stiffness actions, breakage does not stop the episode."""
    return dataclasses.replace(config, stiffness_control=False, terminate_on_break=False)


def generate_position_demos(config: EnvConfig, count: int, rng: np.random.Generator, max_tries_factor=10) -> Demo:
    if count < 1:
        raise ValueError("count must be >= 1")
    pcfg = position_config(config)
    episodes = []
    tries = 0
    while len(episodes) < count:
        if tries >= max_tries_factor * count:
            raise DemoError(f"expert reached the goal in only {len(episodes)} of {tries} attempts")
        tries += 1
        env = make_env(pcfg, seed=int(rng.integers(2**63 - 1)))
        expert = make_expert(pcfg)
        ep = run_episode(env, expert)
        if ep.flags.task:
            episodes.append(ep)
    return Demo(config.env_id, "position", episodes, None, {"attempts": tries})


# -- augmentation ---------------------------------------------------------------------------


def augment_demo(demo: Demo, k_passive: float, k_max: float | None = None) -> Demo:
    """Position actions a -> [a, 0, 0]; observations gain (k, k_lim) = (k_passive, k_max)."""
    if demo.action_kind != "position":
        raise ValueError("demo is already a stiffness demo")
    k_max = k_passive if k_max is None else k_max
    stiff = np.array([k_passive, k_max], dtype=np.float64)
    episodes = []
    for ep in demo.episodes:
        obs = [dataclasses.replace(o, stiffness=stiff.copy()) for o in ep.observations]
        acts = [np.concatenate([a, [0.0, 0.0]]) for a in ep.actions]
        episodes.append(Episode(ep.goal.copy(), obs, acts, list(ep.rewards), ep.flags, list(ep.infos)))
    return Demo(demo.env_id, "stiffness", episodes, k_passive, dict(demo.meta))


def project_to_position(demo: Demo) -> Demo:
    if demo.action_kind != "stiffness":
        raise ValueError("demo is not augmented")
    episodes = []
    for ep in demo.episodes:
        obs = [dataclasses.replace(o, stiffness=np.zeros(0)) for o in ep.observations]
        acts = [np.asarray(a[:-2]).copy() for a in ep.actions]
        episodes.append(Episode(ep.goal.copy(), obs, acts, list(ep.rewards), ep.flags, list(ep.infos)))
    return Demo(demo.env_id, "position", episodes, None, dict(demo.meta))


# -- JSON lines -----------------------------------------------------------------------------


def save_demo(demo: Demo, path) -> None:
    with open(path, "w") as f:
        header = {
            "env_id": demo.env_id,
            "action_kind": demo.action_kind,
            "k_passive": demo.k_passive,
            "count": demo.count,
        }
        f.write(json.dumps(header) + "\n")
        for ep in demo.episodes:
            rec = {
                "goal": np.asarray(ep.goal).tolist(),
                "observations": [o.to_json() for o in ep.observations],
                "actions": [np.asarray(a).tolist() for a in ep.actions],
                "rewards": [float(r) for r in ep.rewards],
                "flags": ep.flags.as_dict(),
                "intact": [bool(i.get("intact", True)) for i in ep.infos],
            }
            f.write(json.dumps(rec) + "\n")


def load_demo(path) -> Demo:
    from stiffctl.envs.base import SuccessFlags

    with open(path) as f:
        lines = [ln for ln in f if ln.strip()]
    if not lines:
        raise DemoError(f"{path} is empty")
    header = json.loads(lines[0])
    for key in ("env_id", "action_kind", "count"):
        if key not in header:
            raise DemoError(f"{path}: header lacks {key!r}")
    episodes = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        flags = SuccessFlags(rec["flags"]["task"], rec["flags"]["safety"])
        infos = [{"intact": b} for b in rec.get("intact", [])]
        episodes.append(
            Episode(
                np.asarray(rec["goal"], dtype=np.float64),
                [Observation.from_json(o) for o in rec["observations"]],
                [np.asarray(a, dtype=np.float64) for a in rec["actions"]],
                rec["rewards"],
                flags,
                infos,
            )
        )
    if len(episodes) != header["count"]:
        raise DemoError(f"{path}: header says {header['count']} episodes, found {len(episodes)}")
    return Demo(header["env_id"], header["action_kind"], episodes, header.get("k_passive"))
