"""Types and functions shared by the three manipulation tasks."""

from __future__ import annotations

import configparser
import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from stiffctl import physics

ENV_IDS = ("block", "chip", "fingers")


class ContractError(ValueError):
    """An action or call that violates the environment's input contract."""


@dataclass
class Uncertainty:
    measurement_noise: bool = True
    perturbation: bool = True
    control_failure: bool = True
    noise_scale: float = 0.01  # m (block, chip) or rad (fingers)
    perturbation_scale: float = 0.5  # m/s or rad/s
    failure_prob: float = 0.10

    @classmethod
    def none(cls) -> Uncertainty:
        return cls(False, False, False)


@dataclass
class EnvConfig:
    env_id: str
    alpha: float
    beta: float
    d: float
    fragility: float
    k_passive: float
    horizon: int
    sr_ref: float
    uncertainty: Uncertainty = field(default_factory=Uncertainty)
    randomize: bool = False
    stiffness_control: bool = True
    terminate_on_break: bool = True
    k_floor_frac: float = 0.01
    k_step_frac: float = 0.2
    dt: float = physics.DT
    substeps: int = physics.SUBSTEPS
    force_tau: float = physics.FORCE_TAU
    velocity_threshold: float = 0.02  # chip only: object speed below which it counts as at rest
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ValueError(f"unknown env {self.env_id!r}")
        if self.alpha < 0 or self.beta < 0 or self.d <= 0 or self.horizon <= 0:
            raise ValueError("need alpha >= 0, beta >= 0, d > 0, horizon > 0")
        if self.fragility <= 0 or self.k_passive <= 0:
            raise ValueError("fragility and k_passive must be positive")

    @property
    def k_max(self) -> float:
        return self.k_passive

    @property
    def k_floor(self) -> float:
        return self.k_floor_frac * self.k_passive

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EnvConfig:
        d = dict(d)
        d["uncertainty"] = Uncertainty(**d.get("uncertainty", {}))
        return cls(**d)


# -- observations, goals, actions ----------------------------------------------------------


@dataclass
class Observation:
    kinematics: np.ndarray
    estimated_force: np.ndarray
    joint_velocity: np.ndarray
    stiffness: np.ndarray  # (k, k_lim)
    achieved_goal: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.kinematics, self.estimated_force, self.joint_velocity, self.stiffness])

    @property
    def force_norm(self) -> float:
        return float(np.linalg.norm(self.estimated_force))

    @property
    def joint_speed(self) -> float:
        return float(np.linalg.norm(self.joint_velocity)) if self.joint_velocity.size else 0.0

    def to_json(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> Observation:
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass
class StiffnessAction:
    """Normalised action; every component lies in [-1, 1]."""

    pose_delta: np.ndarray
    grip_delta: np.ndarray
    dk: float | None = None
    dk_lim: float | None = None

    @property
    def has_stiffness(self) -> bool:
        return self.dk is not None

    def vector(self) -> np.ndarray:
        parts = [np.atleast_1d(self.pose_delta), np.atleast_1d(self.grip_delta)]
        if self.has_stiffness:
            parts.append(np.array([self.dk, self.dk_lim]))
        return np.concatenate(parts).astype(np.float64)

    @classmethod
    def from_vector(cls, v, n_pose: int, n_grip: int, stiffness: bool) -> StiffnessAction:
        v = np.asarray(v, dtype=np.float64)
        expect = n_pose + n_grip + (2 if stiffness else 0)
        if v.shape != (expect,):
            raise ContractError(f"action has shape {v.shape}, expected ({expect},)")
        dk = float(v[-2]) if stiffness else None
        dk_lim = float(v[-1]) if stiffness else None
        return cls(v[:n_pose].copy(), v[n_pose : n_pose + n_grip].copy(), dk, dk_lim)


@dataclass
class SuccessFlags:
    task: bool
    safety: bool

    @property
    def overall(self) -> bool:
        return self.task and self.safety

    def as_dict(self) -> dict:
        return {"task": self.task, "safety": self.safety, "overall": self.overall}


# -- reward and success --------------------------------------------------------------------


def goal_met(achieved_goal, goal, config: EnvConfig):
    """Kinematic goal test; works on single goals or batches (last axis = goal dims)."""
    ag = np.asarray(achieved_goal, dtype=np.float64)
    g = np.asarray(goal, dtype=np.float64)
    if config.env_id == "chip":
        # goal = (position, velocity); velocity part must be near rest
        pos_err = np.linalg.norm(ag[..., :2] - g[..., :2], axis=-1)
        speed = np.linalg.norm(ag[..., 2:] - g[..., 2:], axis=-1)
        return (pos_err < config.d) & (speed < config.velocity_threshold)
    if config.env_id == "fingers":
        err = np.abs(np.angle(np.exp(1j * (ag[..., 0] - g[..., 0]))))
        return err < config.d
    return np.linalg.norm(ag - g, axis=-1) < config.d


def reward_from_parts(achieved_goal, goal, force_norm, joint_speed, config: EnvConfig):
    """R = r_task + r_safety with r_task in {-1, 0} and r_safety = -alpha|F| - beta|qdot|."""
    r_task = goal_met(achieved_goal, goal, config).astype(np.float64) - 1.0
    r_safety = -config.alpha * np.asarray(force_norm, dtype=np.float64) - config.beta * np.asarray(
        joint_speed, dtype=np.float64
    )
    return r_task + r_safety


def compute_reward(obs: Observation, goal, config: EnvConfig) -> float:
    return float(reward_from_parts(obs.achieved_goal, goal, obs.force_norm, obs.joint_speed, config))


def is_success(true_achieved_goal, goal, intact: bool, config: EnvConfig) -> SuccessFlags:
    return SuccessFlags(bool(goal_met(true_achieved_goal, goal, config)), bool(intact))


def reward_lower_bound(config: EnvConfig, force_max: float, joint_speed_max: float) -> float:
    return -(1.0 + config.alpha * force_max + config.beta * joint_speed_max)


# -- uncertainties and domain randomisation ------------------------------------------------


@dataclass
class UncertaintyDraw:
    action: np.ndarray
    failed: bool
    kick: float
    noise: np.ndarray


def apply_uncertainties(action, prev_action, rng: np.random.Generator, unc: Uncertainty, noise_dims: int) -> UncertaintyDraw:
    """Draws this step's uncertainty realisation.

    A control failure replaces the whole action with the previously executed one.
    The kick is an object velocity increment and the noise an additive offset on
    the measured object pose. Disabled mechanisms draw nothing from ``rng``.
    """
    action = np.asarray(action, dtype=np.float64)
    failed = False
    if unc.control_failure and prev_action is not None and rng.random() < unc.failure_prob:
        action = np.array(prev_action, dtype=np.float64)
        failed = True
    kick = float(rng.uniform(-unc.perturbation_scale, unc.perturbation_scale)) if unc.perturbation else 0.0
    if unc.measurement_noise:
        noise = rng.uniform(-unc.noise_scale, unc.noise_scale, size=noise_dims)
    else:
        noise = np.zeros(noise_dims)
    return UncertaintyDraw(action, failed, kick, noise)


FINGERS_RANDOMIZATION = {
    "band_stiffness": (0.0, 100.0),  # N/m
    "object_width": (0.015, 0.025),  # m
    "object_offset": (-0.005, 0.005),  # m, perpendicular to the grasp
}


def randomize_domain(config: EnvConfig, rng: np.random.Generator) -> EnvConfig:
    """Returns a copy of ``config`` with fingers parameters drawn from their ranges."""
    if config.env_id != "fingers":
        warnings.warn(f"domain randomisation is only defined for fingers, not {config.env_id}", stacklevel=2)
        return config
    params = dict(config.params)
    for key, (lo, hi) in FINGERS_RANDOMIZATION.items():
        params[key] = float(rng.uniform(lo, hi))
    return dataclasses.replace(config, params=params)


# -- plain-text config files ---------------------------------------------------------------

_SCALAR_FIELDS = {f.name: f.type for f in dataclasses.fields(EnvConfig) if f.name not in ("uncertainty", "params")}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.strip().lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        return text.strip()


def load_config_file(path, base: EnvConfig | None = None) -> EnvConfig:
    """Reads an INI-style file with [env], [uncertainty] and [physics] sections.

    Keys missing from the file fall back to ``base`` (or the defaults for the
    file's env_id).
    """
    from stiffctl.envs import default_config

    cp = configparser.ConfigParser()
    cp.optionxform = str
    with open(path) as f:
        cp.read_file(f)
    env_vals = {k: _parse_value(v) for k, v in cp["env"].items()} if cp.has_section("env") else {}
    if base is None:
        env_id = env_vals.get("env_id")
        if env_id is None:
            raise ValueError(f"{path}: [env] section must give env_id")
        base = default_config(env_id)
    unknown = set(env_vals) - set(_SCALAR_FIELDS)
    if unknown:
        raise ValueError(f"{path}: unknown [env] keys {sorted(unknown)}")
    unc = dataclasses.asdict(base.uncertainty)
    if cp.has_section("uncertainty"):
        for k, v in cp["uncertainty"].items():
            if k not in unc:
                raise ValueError(f"{path}: unknown [uncertainty] key {k!r}")
            unc[k] = _parse_value(v)
    params = dict(base.params)
    if cp.has_section("physics"):
        params.update({k: _parse_value(v) for k, v in cp["physics"].items()})
    return dataclasses.replace(base, **env_vals, uncertainty=Uncertainty(**unc), params=params)


def dump_config_file(config: EnvConfig, path) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["env"] = {k: json.dumps(getattr(config, k)) for k in _SCALAR_FIELDS}
    cp["uncertainty"] = {k: json.dumps(v) for k, v in dataclasses.asdict(config.uncertainty).items()}
    cp["physics"] = {k: json.dumps(v) for k, v in config.params.items()}
    with open(path, "w") as f:
        cp.write(f)
