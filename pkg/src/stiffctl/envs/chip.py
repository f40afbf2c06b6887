"""ChipLite: slide a thin chip up a wall with a compliant wrist.

Vertical plane, ``y`` up, ``n`` the distance from the wall. A kinematic
forearm base moves in (y, n); a single finger of length ``finger_len`` hangs
from it on a series-elastic wrist joint ``theta`` (positive rotates the tip
toward the wall). Pressing the tip onto the chip creates a normal force
``N = tau / lever``; finger friction drags the chip along the wall while wall
friction and gravity resist. The estimate is the wrist torque only, while the
ground truth includes the finger friction force.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from stiffctl import physics
from stiffctl.envs.base import EnvConfig, Observation, Uncertainty
from stiffctl.envs.core import ManipulationEnv

CHIP_PARAMS = {
    "chip_half": 0.02,  # m, half height of the chip along the wall
    "chip_thick": 0.005,  # m
    "chip_mass": 0.1,  # kg
    "finger_len": 0.05,  # m
    "wrist_inertia": 2e-3,  # kg m^2
    "wrist_damping": 0.2,  # Nms/rad
    "wrist_range": [-1.0, 1.0],  # rad, setpoint control range
    "wrist_scale": 1.0,  # rad of setpoint offset per unit action
    "move_scale": 0.05,  # m of base travel per unit action per step
    "base_range": [0.0, 0.2],  # m, both forearm axes
    "mu_finger": 1.0,
    "mu_wall": 0.5,
    "gravity": 9.81,
    "base_start": [0.06, 0.06],  # (n, y)
    "goal_y": [0.1, 0.16],
}


def chip_config(**kw) -> EnvConfig:
    base = dict(
        env_id="chip",
        alpha=2e-2,
        beta=0.0,
        d=0.05,
        fragility=200.0,
        k_passive=50.0,
        horizon=50,
        sr_ref=0.85,
        uncertainty=Uncertainty(),
        params=dict(CHIP_PARAMS),
    )
    base.update(kw)
    return EnvConfig(**base)


@dataclass
class ChipState:
    base: np.ndarray  # (n, y)
    base_vel: np.ndarray
    wrist: physics.ElasticJoint
    chip_y: float
    chip_vy: float
    normal_force: float
    friction_force: float


class ChipEnv(ManipulationEnv):
    n_pose = 2
    n_grip = 1
    noise_dims = 2

    def _reset_world(self):
        p = self.config.params
        wrist = physics.ElasticJoint(
            x_current=0.0,
            x_desired=0.0,
            velocity=0.0,
            k=self.stiffness.k,
            k_lim=self.stiffness.k_lim,
            k_passive=self.config.k_passive,
            damping=p["wrist_damping"],
            mass=p["wrist_inertia"],
            control_range=tuple(p["wrist_range"]),
            limits=tuple(p["wrist_range"]),
        )
        goal = np.array([p["chip_thick"] / 2, self.rng.uniform(*p["goal_y"]), 0.0, 0.0])
        self.state = ChipState(np.array(p["base_start"], dtype=np.float64), np.zeros(2), wrist, p["chip_half"], 0.0, 0.0, 0.0)
        return goal

    def tip(self, base=None, theta=None):
        s = self.state
        base = s.base if base is None else base
        theta = s.wrist.x_current if theta is None else theta
        ell = self.config.params["finger_len"]
        return np.array([base[0] - ell * np.sin(theta), base[1] - ell * np.cos(theta)])

    def _contact_angle(self, base, chip_y):
        """Wrist angle at which the tip meets the chip face, or None when the chip is out of reach."""
        p = self.config.params
        ell, h = p["finger_len"], p["chip_thick"]
        reach = (base[0] - h) / ell
        if not 0.0 <= reach <= 1.0:
            return None
        theta_c = float(np.arcsin(reach))
        tip_y = base[1] - ell * np.cos(theta_c)
        if abs(tip_y - chip_y) > p["chip_half"]:
            return None
        return theta_c

    def _advance(self, pose_action, kick, sub_dt):
        p = self.config.params
        s = self.state
        dt, n = self.config.dt, self.config.substeps
        lo, hi = p["base_range"]
        target = np.clip(s.base + p["move_scale"] * pose_action[:2], lo, hi)
        cmd_vel = (target - s.base) / dt
        ramp = [s.base_vel + (cmd_vel - s.base_vel) * (i + 1) / n for i in range(n)]
        wrist = replace(s.wrist, k=self.stiffness.k, k_lim=self.stiffness.k_lim)
        wrist = wrist.command(wrist.x_current + p["wrist_scale"] * pose_action[2])
        m, g = p["chip_mass"], p["gravity"]
        lever = p["finger_len"]
        base, chip_y, vy = s.base.copy(), s.chip_y, s.chip_vy
        if s.normal_force > 0.0:
            vy += kick
        normal = friction = 0.0
        for i in range(n):
            base_vel = ramp[i]
            base = np.clip(base + base_vel * sub_dt, lo, hi)
            theta_c = self._contact_angle(base, chip_y)
            upper = p["wrist_range"][1] if theta_c is None else min(theta_c, p["wrist_range"][1])
            wrist = replace(wrist, limits=(p["wrist_range"][0], upper))
            est_raw = physics.quasi_static_force(wrist)
            acc = (est_raw - wrist.damping * wrist.velocity) / wrist.mass
            w_free = wrist.velocity + sub_dt * acc
            pushed = theta_c is not None and wrist.x_current > theta_c  # base moved into the chip
            wrist = physics.step_joint(wrist, sub_dt)
            normal = 0.0
            if theta_c is not None and wrist.x_current >= theta_c - 1e-12:
                torque = wrist.mass * max(w_free, 0.0) / sub_dt
                if pushed:
                    torque = max(torque, est_raw)
                normal = max(torque, 0.0) / (lever * max(np.cos(wrist.x_current), 0.1))

            # chip along the wall: finger and wall friction act together on the gravity-updated velocity
            v = vy - g * sub_dt
            friction = 0.0
            if normal > 0.0:
                tip_vy = base_vel[1]
                cap_f = p["mu_finger"] * normal * sub_dt
                cap_w = p["mu_wall"] * normal * sub_dt
                # impulse the finger must supply for the chip to move with the tip
                need = m * (tip_vy - v)
                if tip_vy != 0.0:
                    need += np.sign(tip_vy) * cap_w
                else:
                    need = np.sign(need) * max(abs(need) - cap_w, 0.0)
                if abs(need) <= cap_f:
                    friction = need / sub_dt
                    v = tip_vy
                else:
                    j = np.sign(tip_vy - v) * cap_f
                    friction = j / sub_dt
                    v += j / m
                    v = 0.0 if m * abs(v) <= cap_w else v - np.sign(v) * cap_w / m
            if chip_y + v * sub_dt < p["chip_half"]:
                v = (p["chip_half"] - chip_y) / sub_dt
            chip_y = max(chip_y + v * sub_dt, p["chip_half"])
            vy = v
            true_raw = float(np.hypot(normal, friction))
            self._filter_forces(est_raw, true_raw, sub_dt)
        self.state = ChipState(base, ramp[-1], wrist, chip_y, vy, normal, friction)

    def _observe(self):
        s = self.state
        p = self.config.params
        chip = np.array([p["chip_thick"] / 2, s.chip_y]) + self.noise
        tip = self.tip()
        ell, th = p["finger_len"], s.wrist.x_current
        tip_vel = s.base_vel + ell * s.wrist.velocity * np.array([-np.cos(th), np.sin(th)])
        kin = np.concatenate([s.base, tip, chip, chip - tip, [th], tip_vel, [s.chip_vy], [s.wrist.velocity]])
        return Observation(
            kinematics=kin,
            estimated_force=np.array([self.est.filtered]),
            joint_velocity=np.zeros(0),
            stiffness=self.stiffness_obs(),
            achieved_goal=np.array([chip[0], chip[1], 0.0, s.chip_vy]),
        )

    def true_achieved_goal(self):
        p = self.config.params
        return np.array([p["chip_thick"] / 2, self.state.chip_y, 0.0, self.state.chip_vy])

    def true_force_norm(self):
        return abs(self.true.filtered)

    def force_bound(self):
        lo, hi = self.config.params["wrist_range"]
        return self.config.k_max * (hi - lo)


class ChipExpert:
    """Line the fingertip up with the chip, press the wrist fully, slide to the goal height, hold."""

    approach_angle = 0.3

    def __init__(self, config: EnvConfig):
        self.p = config.params
        self.reset()

    def reset(self):
        self.phase = 0
        self.pressing = 0

    def __call__(self, obs: Observation, goal):
        p = self.p
        kin = obs.kinematics
        base, chip, theta = kin[0:2], kin[4:6], kin[8]
        ell = p["finger_len"]
        n_touch = p["chip_thick"] + ell * np.sin(self.approach_angle)
        wrist = -theta  # hold the wrist near zero while approaching
        if self.phase == 0:
            target = np.array([n_touch, chip[1] + ell * np.cos(self.approach_angle)])
            if np.linalg.norm(target - base) < 0.004:
                self.phase = 1
        if self.phase == 1:
            target = np.array([n_touch, base[1]])
            wrist = 1.0
            self.pressing += 1
            if self.pressing >= 3:
                self.phase = 2
        if self.phase == 2:
            target = np.array([n_touch, goal[1] + ell * np.cos(theta)])
            wrist = 1.0
        move = np.clip((target - base) / p["move_scale"], -1.0, 1.0)
        return np.array([move[0], move[1], np.clip(wrist, -1.0, 1.0)])
