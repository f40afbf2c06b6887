"""BlockLite: planar pick-and-place with a compliant parallel gripper.

The gripper centre moves in the x-z plane like a mocap body. The two fingers
close along the out-of-plane axis and share one series-elastic joint ``w``
(half-opening). The block is held by finger friction only, so a weak grip lets
it slip out under gravity and perturbation kicks, while a stiff full-close
command crushes it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from stiffctl import physics
from stiffctl.envs.base import EnvConfig, Observation, Uncertainty
from stiffctl.envs.core import ManipulationEnv

SQRT2 = np.sqrt(2.0)

BLOCK_PARAMS = {
    "block_half": 0.025,  # m, half edge of the cube
    "object_mass": 0.2,  # kg
    "finger_mass": 0.4,  # kg
    "finger_damping": 20.0,  # Ns/m
    "finger_open": 0.05,  # m, max half-opening
    "grip_range": [-1.0, 1.0],  # m, finger setpoint control range
    "grip_scale": 1.0,  # m of setpoint offset per unit action
    "move_scale": 0.025,  # m of gripper travel per unit action per step
    "pad_half": 0.02,  # m, half size of the finger pad region
    "mu_finger": 1.0,
    "mu_table": 1.0,
    "gravity": 9.81,
    "workspace_x": [-0.25, 0.25],
    "workspace_z": [0.025, 0.35],
    "object_x": [-0.15, 0.15],
    "goal_x": [-0.15, 0.15],
    "goal_z": [0.1, 0.25],
    "grip_start": [0.0, 0.15],
}


def block_config(**kw) -> EnvConfig:
    base = dict(
        env_id="block",
        alpha=2e-3,
        beta=0.0,
        d=0.05,
        fragility=300.0,
        k_passive=250.0,
        horizon=50,
        sr_ref=0.65,
        uncertainty=Uncertainty(),
        params=dict(BLOCK_PARAMS),
    )
    base.update(kw)
    return EnvConfig(**base)


@dataclass
class BlockState:
    grip_pos: np.ndarray
    grip_vel: np.ndarray
    finger: physics.ElasticJoint
    obj_pos: np.ndarray
    obj_vel: np.ndarray
    between: bool
    contact_force: float


class BlockEnv(ManipulationEnv):
    n_pose = 2
    n_grip = 1
    noise_dims = 2

    def _reset_world(self):
        p = self.config.params
        rng = self.rng
        finger = physics.ElasticJoint(
            x_current=p["finger_open"],
            x_desired=p["finger_open"],
            velocity=0.0,
            k=self.stiffness.k,
            k_lim=self.stiffness.k_lim,
            k_passive=self.config.k_passive,
            damping=p["finger_damping"],
            mass=p["finger_mass"],
            control_range=tuple(p["grip_range"]),
            limits=(0.0, p["finger_open"]),
        )
        obj = np.array([rng.uniform(*p["object_x"]), p["block_half"]])
        goal = np.array([rng.uniform(*p["goal_x"]), rng.uniform(*p["goal_z"])])
        self.state = BlockState(
            grip_pos=np.array(p["grip_start"], dtype=np.float64),
            grip_vel=np.zeros(2),
            finger=finger,
            obj_pos=obj,
            obj_vel=np.zeros(2),
            between=False,
            contact_force=0.0,
        )
        return goal

    def _advance(self, pose_action, kick, sub_dt):
        p = self.config.params
        s = self.state
        dt = self.config.dt
        lo = np.array([p["workspace_x"][0], p["workspace_z"][0]])
        hi = np.array([p["workspace_x"][1], p["workspace_z"][1]])
        target = np.clip(s.grip_pos + p["move_scale"] * pose_action[:2], lo, hi)
        # velocity ramps linearly from its previous value to the commanded one
        n = self.config.substeps
        cmd_vel = (target - s.grip_pos) / dt
        ramp = [s.grip_vel + (cmd_vel - s.grip_vel) * (i + 1) / n for i in range(n)]
        finger = s.finger
        finger = replace(finger, k=self.stiffness.k, k_lim=self.stiffness.k_lim).command(finger.x_current + p["grip_scale"] * pose_action[2])
        obj_pos, obj_vel = s.obj_pos.copy(), s.obj_vel.copy()
        b, m = p["block_half"], p["object_mass"]
        if s.between and s.contact_force > 0.0:
            obj_vel[0] += kick
        grip_pos = s.grip_pos.copy()
        between = s.between
        gvec = np.array([0.0, -p["gravity"]])
        fc = 0.0
        for i in range(n):
            grip_vel = ramp[i]
            grip_pos = np.clip(grip_pos + grip_vel * sub_dt, lo, hi)
            # the block face is a unilateral limit for the fingers while it sits between them
            finger = replace(finger, limits=(b if between else 0.0, p["finger_open"]))
            est_raw = physics.quasi_static_force(finger)
            acc = (est_raw - finger.damping * finger.velocity) / finger.mass
            v_free = finger.velocity + sub_dt * acc
            finger = physics.step_joint(finger, sub_dt)
            fc = 0.0
            if between and finger.x_current <= b:
                fc = finger.mass * max(-v_free, 0.0) / sub_dt

            v = obj_vel + gvec * sub_dt
            if between and fc > 0.0:
                rel = v - grip_vel
                need = m * np.linalg.norm(rel)
                cap = p["mu_finger"] * 2.0 * fc * sub_dt
                if need <= cap:
                    v = grip_vel.copy()
                else:
                    v = v - rel * (cap / need)
            if obj_pos[1] + v[1] * sub_dt < b:
                landing = (b - obj_pos[1]) / sub_dt
                jn = m * (landing - v[1])
                v[1] = landing
                v[0] = np.sign(v[0]) * max(abs(v[0]) - p["mu_table"] * jn / m, 0.0)
            obj_pos = obj_pos + v * sub_dt
            obj_pos[1] = max(obj_pos[1], b)
            # side walls at the workspace edge stop a released block dead
            if not lo[0] <= obj_pos[0] <= hi[0]:
                obj_pos[0] = np.clip(obj_pos[0], lo[0], hi[0])
                v[0] = 0.0
            obj_vel = v

            rel_pos = obj_pos - grip_pos
            inside = abs(rel_pos[0]) <= p["pad_half"] and abs(rel_pos[1]) <= p["pad_half"]
            if between:
                between = inside
            else:
                between = inside and finger.x_current >= b
            self._filter_forces(est_raw, fc, sub_dt)
        self.state = BlockState(grip_pos, grip_vel, finger, obj_pos, obj_vel, between, fc)

    def _observe(self):
        s = self.state
        obj_seen = s.obj_pos + self.noise
        kin = np.concatenate(
            [
                s.grip_pos,
                obj_seen,
                obj_seen - s.grip_pos,
                [s.finger.x_current],
                s.obj_vel - s.grip_vel,
                s.grip_vel,
                [s.finger.velocity],
            ]
        )
        f = self.est.filtered
        return Observation(
            kinematics=kin,
            estimated_force=np.array([f, f]),
            joint_velocity=np.zeros(0),
            stiffness=self.stiffness_obs(),
            achieved_goal=obj_seen.copy(),
        )

    def true_achieved_goal(self):
        return self.state.obj_pos.copy()

    def true_force_norm(self):
        return SQRT2 * abs(self.true.filtered)

    def force_bound(self):
        lo, hi = self.config.params["grip_range"]
        return SQRT2 * self.config.k_max * (hi - lo)
