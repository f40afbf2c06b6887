"""Series-elastic joints, quasi-static force estimates, force filtering, fragility."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

DT = 0.02
SUBSTEPS = 4
FORCE_TAU = 0.05


class SimulationFault(RuntimeError):
    """Raised when the integrator produces a non-finite state."""


@dataclass(frozen=True)
class ElasticJoint:
    """One series-elastic actuator driving a 1-DOF joint (prismatic or revolute)."""

    x_current: float
    x_desired: float
    velocity: float
    k: float
    k_lim: float
    k_passive: float
    damping: float
    mass: float
    control_range: tuple[float, float]
    limits: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.control_range
        if not lo <= self.x_desired <= hi:
            object.__setattr__(self, "x_desired", float(np.clip(self.x_desired, lo, hi)))

    def command(self, x_desired: float) -> ElasticJoint:
        lo, hi = self.control_range
        return replace(self, x_desired=float(np.clip(x_desired, lo, hi)))


@dataclass(frozen=True)
class ForceChannel:
    raw: float = 0.0
    filtered: float = 0.0
    tau: float = FORCE_TAU


def quasi_static_force(joint: ElasticJoint) -> float:
    """Force read off the spring deflection, positive when the setpoint leads the position."""
    return joint.k * (joint.x_desired - joint.x_current)


def low_pass_gain(dt: float, tau: float) -> float:
    if dt <= 0 or tau <= 0:
        raise ValueError("dt and tau must be positive")
    return dt / (tau + dt)


def low_pass(channel: ForceChannel, raw: float, dt: float) -> ForceChannel:
    g = low_pass_gain(dt, channel.tau)
    return ForceChannel(raw, channel.filtered + g * (raw - channel.filtered), channel.tau)


def step_joint(joint: ElasticJoint, dt: float, external_force: float = 0.0) -> ElasticJoint:
    """Semi-implicit Euler step; the position is clamped to the mechanical limits
    and velocity zeroed on the limit it hit."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    spring = joint.k * (joint.x_desired - joint.x_current)
    acc = (spring - joint.damping * joint.velocity + external_force) / joint.mass
    v = joint.velocity + dt * acc
    x = joint.x_current + dt * v
    lo, hi = joint.limits
    if x < lo:
        x, v = lo, max(v, 0.0)
    elif x > hi:
        x, v = hi, min(v, 0.0)
    if not (np.isfinite(x) and np.isfinite(v)):
        raise SimulationFault(f"joint state diverged (x={x}, v={v})")
    return replace(joint, x_current=x, velocity=v)


def check_fragility(ground_truth_force: float, fragility: float, intact: bool = True) -> bool:
    """Returns the intact flag; once broken it stays broken."""
    if fragility <= 0:
        raise ValueError("fragility must be positive")
    return bool(intact and abs(ground_truth_force) <= fragility)
