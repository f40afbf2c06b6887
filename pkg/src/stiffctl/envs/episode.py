"""Episode records, a rollout helper, and JSON-lines step traces."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from stiffctl.envs.base import Observation, SuccessFlags


@dataclass
class Episode:
    goal: np.ndarray
    observations: list[Observation]  # T + 1 entries
    actions: list[np.ndarray]  # executed-as-commanded policy actions, T entries
    rewards: list[float]
    flags: SuccessFlags
    infos: list[dict] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.actions)

    def arrays(self) -> dict:
        """Dense per-step arrays used by the replay buffers."""
        obs = self.observations
        return {
            "o": np.stack([ob.vector() for ob in obs]),
            "ag": np.stack([ob.achieved_goal for ob in obs]),
            "f": np.array([ob.force_norm for ob in obs]),
            "q": np.array([ob.joint_speed for ob in obs]),
            "a": np.stack(self.actions) if self.actions else np.zeros((0, 0)),
            "r": np.asarray(self.rewards, dtype=np.float64),
            "g": np.asarray(self.goal, dtype=np.float64),
        }

    @property
    def safety_trace(self) -> list[bool]:
        return [bool(i.get("intact", True)) for i in self.infos]


def run_episode(env, policy, record_infos=True) -> Episode:
    """Rolls ``policy(obs, goal) -> action`` until the environment reports done."""
    obs, goal = env.reset()
    observations, actions, rewards, infos = [obs], [], [], []
    done = False
    flags = env.success_flags()
    while not done:
        a = np.asarray(policy(obs, goal), dtype=np.float64)
        obs, r, done, flags, info = env.step(a)
        observations.append(obs)
        actions.append(a)
        rewards.append(r)
        if record_infos:
            info = dict(info, intact=env.intact)
            infos.append(info)
    return Episode(goal, observations, actions, rewards, flags, infos)


def write_trace(episode: Episode, path) -> None:
    """One JSON object per step: observation after the step, action, reward, flags so far."""
    with open(path, "w") as f:
        for t in range(episode.length):
            info = episode.infos[t] if t < len(episode.infos) else {}
            rec = {
                "t": t,
                "goal": np.asarray(episode.goal).tolist(),
                "obs": episode.observations[t + 1].to_json(),
                "action": np.asarray(episode.actions[t]).tolist(),
                "reward": float(episode.rewards[t]),
                "intact": bool(info.get("intact", True)),
                "true_force": float(info.get("true_force", float("nan"))),
            }
            if t == episode.length - 1:
                rec["flags"] = episode.flags.as_dict()
            f.write(json.dumps(rec) + "\n")
