"""Episode bookkeeping shared by every task: stiffness commands, uncertainty
draws, force channels, fragility latching and termination."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from stiffctl import physics
from stiffctl.envs.base import (
    ContractError,
    EnvConfig,
    Observation,
    SuccessFlags,
    apply_uncertainties,
    compute_reward,
    is_success,
    randomize_domain,
)


@dataclass
class StiffnessState:
    k: float
    k_lim: float


def update_stiffness(s: StiffnessState, dk: float, dk_lim: float, config: EnvConfig) -> StiffnessState:
    """Applies normalised stiffness deltas: k_lim in [floor, k_max], then k in [floor, k_lim]."""
    step = config.k_step_frac * config.k_passive
    k_lim = float(np.clip(s.k_lim + step * dk_lim, config.k_floor, config.k_max))
    k = float(np.clip(s.k + step * dk, config.k_floor, k_lim))
    return StiffnessState(k, k_lim)


class ManipulationEnv:
    """Base class: subclasses provide ``_reset_world``, ``_advance`` and ``_observe``.

    ``step`` takes the normalised action vector (pose deltas, grip deltas, then
    dk and dk_lim when stiffness control is on) and returns
    ``(obs, reward, done, flags, info)``.
    """

    n_pose: int = 0
    n_grip: int = 0
    noise_dims: int = 0

    def __init__(self, config: EnvConfig, seed=None):
        self.base_config = config
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.state = None
        self.goal = None
        self.t = 0
        self.done = True

    @property
    def action_dim(self) -> int:
        return self.n_pose + self.n_grip + (2 if self.config.stiffness_control else 0)

    def seed(self, seed) -> None:
        self.rng = np.random.default_rng(seed)

    def reset(self):
        cfg = self.base_config
        if cfg.randomize:
            cfg = randomize_domain(cfg, self.rng)
        self.config = cfg
        self.stiffness = StiffnessState(cfg.k_passive, cfg.k_max)
        self.est = physics.ForceChannel(tau=cfg.force_tau)
        self.true = physics.ForceChannel(tau=cfg.force_tau)
        self.intact = True
        self.prev_action = None
        self.t = 0
        self.done = False
        self.goal = self._reset_world()
        self.noise = np.zeros(self.noise_dims)
        self.last_obs = self._observe()
        return self.last_obs, self.goal.copy()

    def check_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (self.action_dim,):
            raise ContractError(f"action shape {a.shape} != ({self.action_dim},)")
        if not np.all(np.isfinite(a)) or np.any(np.abs(a) > 1.0 + 1e-9):
            raise ContractError("action components must be finite and within [-1, 1]")
        return np.clip(a, -1.0, 1.0)

    def step(self, action):
        if self.done:
            raise ContractError("episode has terminated; call reset()")
        a = self.check_action(action)
        cfg = self.config
        draw = apply_uncertainties(a, self.prev_action, self.rng, cfg.uncertainty, self.noise_dims)
        a = draw.action
        self.prev_action = a.copy()
        self.noise = draw.noise
        if cfg.stiffness_control:
            self.stiffness = update_stiffness(self.stiffness, a[-2], a[-1], cfg)
        pose = a[: self.n_pose + self.n_grip]
        sub_dt = cfg.dt / cfg.substeps
        try:
            self._advance(pose, draw.kick, sub_dt)
        except physics.SimulationFault:
            self.intact = False
            self.done = True
            raise
        self.t += 1
        obs = self._observe()
        self.last_obs = obs
        reward = compute_reward(obs, self.goal, cfg)
        broken = not self.intact
        self.done = self.t >= cfg.horizon or (broken and cfg.terminate_on_break)
        flags = self.success_flags()
        info = {
            "control_failure": draw.failed,
            "true_force": self.true_force_norm(),
            "executed_action": a,
            "k": self.stiffness.k,
            "k_lim": self.stiffness.k_lim,
        }
        return obs, reward, self.done, flags, info

    def _filter_forces(self, est_raw: float, true_raw: float, sub_dt: float) -> None:
        self.est = physics.low_pass(self.est, est_raw, sub_dt)
        self.true = physics.low_pass(self.true, true_raw, sub_dt)
        self.intact = physics.check_fragility(self.true_force_norm(), self.config.fragility, self.intact)

    def stiffness_obs(self) -> np.ndarray:
        if not self.config.stiffness_control:
            return np.zeros(0)
        return np.array([self.stiffness.k, self.stiffness.k_lim])

    def success_flags(self) -> SuccessFlags:
        return is_success(self.true_achieved_goal(), self.goal, self.intact, self.config)

    def snapshot(self) -> dict:
        """Plain-data copy of the full simulator state."""
        d = {k: v for k, v in self.state.__dict__.items()}
        d.update(
            k=self.stiffness.k,
            k_lim=self.stiffness.k_lim,
            est_force=self.est.filtered,
            true_force=self.true.filtered,
            intact=self.intact,
            t=self.t,
        )
        return {k: (dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v) for k, v in d.items()}

    # subclass hooks
    def _reset_world(self) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, pose_action: np.ndarray, kick: float, sub_dt: float) -> None:
        raise NotImplementedError

    def _observe(self) -> Observation:
        raise NotImplementedError

    def true_achieved_goal(self) -> np.ndarray:
        raise NotImplementedError

    def true_force_norm(self) -> float:
        raise NotImplementedError

    def force_bound(self) -> float:
        """Largest estimated force norm the actuators can report."""
        raise NotImplementedError

    def joint_speed_bound(self) -> float:
        return 0.0
