"""FingersLite: two fingers rotate an elastically grounded block.

Each fingertip is described in polar coordinates (r, phi) about the nominal
object centre. ``phi`` is position controlled; ``r`` (the grasping direction)
runs through a series-elastic joint whose stiffness is the controlled one.
The block (width ``object_width`` across the grasp) turns about its own centre,
which may sit ``object_offset`` off the nominal centre. An elastic band pulls
it back to zero; finger friction is the only way to turn it. Joint velocities
come from inverse kinematics of a two-link finger for each tip.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from stiffctl import physics
from stiffctl.envs.base import EnvConfig, Observation, Uncertainty
from stiffctl.envs.core import ManipulationEnv

FINGERS_PARAMS = {
    "object_width": 0.02,  # m, randomised 15..25 mm
    "object_offset": 0.0,  # m, randomised -5..5 mm
    "band_stiffness": 50.0,  # N/m, randomised 0..100
    "band_arm": 0.02,  # m
    "object_length": 0.06,  # m, face length
    "object_inertia": 1e-4,  # kg m^2
    "object_damping": 1e-3,  # Nms/rad
    "finger_mass": 0.05,  # kg
    "finger_damping": 2.0,  # Ns/m
    "radial_range": [-0.03, 0.06],  # m, setpoint control range
    "radial_limits": [0.0, 0.06],  # m
    "radial_scale": 0.1,  # m of setpoint offset per unit action
    "radial_start": 0.04,
    "phi_scale": 0.1,  # rad per unit action per step
    "phi_span": 1.5,  # rad either side of the nominal finger angle
    "mu_finger": 1.0,
    "link_lengths": [0.05, 0.05],
    "finger_bases": [[0.05, -0.06], [-0.05, -0.06]],
    "goal_abs": [0.4, 0.9],  # rad, goal magnitude range (either sign)
}

NOMINAL_PHI = np.array([0.0, np.pi])


def fingers_config(**kw) -> EnvConfig:
    base = dict(
        env_id="fingers",
        alpha=0.4,
        beta=1.0,
        d=np.pi / 16,
        fragility=6.0,
        k_passive=200.0,
        horizon=100,
        sr_ref=0.65,
        uncertainty=Uncertainty(noise_scale=0.02, perturbation_scale=0.5),
        params=dict(FINGERS_PARAMS),
    )
    base.update(kw)
    return EnvConfig(**base)


def two_link_ik(tip, base, lengths) -> np.ndarray:
    """Elbow-down joint angles reaching ``tip`` (clamped to the reachable annulus)."""
    l1, l2 = lengths
    d = np.asarray(tip, dtype=np.float64) - np.asarray(base, dtype=np.float64)
    c2 = np.clip((d @ d - l1**2 - l2**2) / (2 * l1 * l2), -1.0, 1.0)
    q2 = np.arccos(c2)
    q1 = np.arctan2(d[1], d[0]) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    return np.array([q1, q2])


@dataclass
class FingersState:
    phi: np.ndarray
    phi_vel: np.ndarray
    radial: list  # ElasticJoint per finger
    theta: float
    omega: float
    normals: np.ndarray
    frictions: np.ndarray
    joints: np.ndarray  # 4 joint angles
    joint_vel: np.ndarray


class FingersEnv(ManipulationEnv):
    n_pose = 2
    n_grip = 2
    noise_dims = 1

    def _reset_world(self):
        p = self.config.params
        radial = [
            physics.ElasticJoint(
                x_current=p["radial_start"],
                x_desired=p["radial_start"],
                velocity=0.0,
                k=self.stiffness.k,
                k_lim=self.stiffness.k_lim,
                k_passive=self.config.k_passive,
                damping=p["finger_damping"],
                mass=p["finger_mass"],
                control_range=tuple(p["radial_range"]),
                limits=tuple(p["radial_limits"]),
            )
            for _ in range(2)
        ]
        phi = NOMINAL_PHI.copy()
        joints = self._joint_angles(phi, [j.x_current for j in radial])
        mag = self.rng.uniform(*p["goal_abs"])
        sign = 1.0 if self.rng.random() < 0.5 else -1.0
        goal = np.array([sign * mag])
        self.state = FingersState(phi, np.zeros(2), radial, 0.0, 0.0, np.zeros(2), np.zeros(2), joints, np.zeros(4))
        return goal

    def _joint_angles(self, phi, r):
        p = self.config.params
        q = [two_link_ik(ri * np.array([np.cos(f), np.sin(f)]), b, p["link_lengths"]) for f, ri, b in zip(phi, r, p["finger_bases"])]
        return np.concatenate(q)

    def _faces(self, theta):
        """Object centre and outward face normals (finger 0 meets face 0)."""
        p = self.config.params
        c = np.array([0.0, p["object_offset"]])  # offset is perpendicular to the grasp axis
        n0 = np.array([np.cos(theta), np.sin(theta)])
        return c, (n0, -n0)

    def _contact_radius(self, i, phi_i, theta):
        """Radius at which finger ``i`` meets its face, or None if it misses the face."""
        p = self.config.params
        c, normals = self._faces(theta)
        n = normals[i]
        u = np.array([np.cos(phi_i), np.sin(phi_i)])
        cosang = n @ u
        if cosang < 0.3:
            return None
        r_c = (p["object_width"] / 2 + n @ c) / cosang
        tip = r_c * u
        t = np.array([-n[1], n[0]])
        if abs(t @ (tip - c)) > p["object_length"] / 2 or r_c <= 0.0:
            return None
        return float(r_c)

    def _advance(self, pose_action, kick, sub_dt):
        p = self.config.params
        s = self.state
        cfg = self.config
        dt, nsub = cfg.dt, cfg.substeps
        span = p["phi_span"]
        target = np.clip(s.phi + p["phi_scale"] * pose_action[:2], NOMINAL_PHI - span, NOMINAL_PHI + span)
        cmd_vel = (target - s.phi) / dt
        ramp = [s.phi_vel + (cmd_vel - s.phi_vel) * (k + 1) / nsub for k in range(nsub)]
        radial = [
            replace(j, k=self.stiffness.k, k_lim=self.stiffness.k_lim).command(j.x_current + p["radial_scale"] * a)
            for j, a in zip(s.radial, pose_action[2:4])
        ]
        phi, theta, omega = s.phi.copy(), s.theta, s.omega
        half_w = p["object_width"] / 2
        inertia = p["object_inertia"]
        band = p["band_stiffness"] * p["band_arm"] ** 2
        if np.any(s.normals > 0.0):
            omega += kick
        normals, frictions = np.zeros(2), np.zeros(2)
        for k in range(nsub):
            phi_vel = ramp[k]
            phi = phi + phi_vel * sub_dt
            est = np.zeros(2)
            targets = np.zeros(2)
            for i in range(2):
                r_c = self._contact_radius(i, phi[i], theta)
                lo = p["radial_limits"][0] if r_c is None else max(r_c, p["radial_limits"][0])
                j = replace(radial[i], limits=(lo, p["radial_limits"][1]))
                est[i] = physics.quasi_static_force(j)
                acc = (est[i] - j.damping * j.velocity) / j.mass
                v_free = j.velocity + sub_dt * acc
                pushed = r_c is not None and j.x_current < r_c
                j = physics.step_joint(j, sub_dt)
                normals[i] = 0.0
                if r_c is not None and j.x_current <= r_c + 1e-12:
                    normals[i] = j.mass * max(-v_free, 0.0) / sub_dt
                    if pushed:
                        normals[i] = max(normals[i], -est[i])
                radial[i] = j
                # object rate that would keep the contact point stuck to this tip
                c, ns = self._faces(theta)
                t = np.array([-ns[i][1], ns[i][0]])
                u_perp = np.array([-np.sin(phi[i]), np.cos(phi[i])])
                v_tip = j.x_current * phi_vel[i] * u_perp + j.velocity * np.array([np.cos(phi[i]), np.sin(phi[i])])
                targets[i] = (v_tip @ t) / half_w

            # object rotation: band and damping, then finger friction toward the tips' rate
            w = omega + sub_dt * (-band * theta - p["object_damping"] * omega) / inertia
            frictions = np.zeros(2)
            total_n = normals.sum()
            if total_n > 0.0:
                w_t = float(normals @ targets / total_n)
                cap = p["mu_finger"] * total_n * half_w * sub_dt
                need = inertia * (w_t - w)
                j_imp = need if abs(need) <= cap else np.sign(need) * cap
                w += j_imp / inertia
                frictions = (j_imp / (half_w * sub_dt)) * normals / total_n
            theta += w * sub_dt
            omega = w
            true_raw = float(np.sqrt(np.sum(normals**2) + np.sum(frictions**2)))
            self._filter_est_true(np.linalg.norm(est), true_raw, sub_dt)
        joints = self._joint_angles(phi, [j.x_current for j in radial])
        joint_vel = (joints - s.joints) / dt
        self.state = FingersState(phi, ramp[-1], radial, theta, omega, normals, frictions, joints, joint_vel)

    def _filter_est_true(self, est_norm, true_raw, sub_dt):
        # the two estimated finger forces share a filter through their norm
        self._filter_forces(est_norm, true_raw, sub_dt)

    def _observe(self):
        s = self.state
        theta_seen = s.theta + self.noise[0]
        r = np.array([j.x_current for j in s.radial])
        rdot = np.array([j.velocity for j in s.radial])
        kin = np.concatenate(
            [[theta_seen, s.omega], r, s.phi, rdot, s.phi_vel, s.phi - NOMINAL_PHI - theta_seen]
        )
        f = self.est.filtered / np.sqrt(2.0)
        return Observation(
            kinematics=kin,
            estimated_force=np.array([f, f]),
            joint_velocity=s.joint_vel.copy(),
            stiffness=self.stiffness_obs(),
            achieved_goal=np.array([theta_seen]),
        )

    def true_achieved_goal(self):
        return np.array([self.state.theta])

    def true_force_norm(self):
        return abs(self.true.filtered)

    def force_bound(self):
        lo, hi = self.config.params["radial_range"]
        return np.sqrt(2.0) * self.config.k_max * (hi - lo)

    def joint_speed_bound(self):
        # loose bound: tips move at most phi_scale/dt in angle over the reachable radius
        p = self.config.params
        tip_speed = p["radial_limits"][1] * p["phi_scale"] / self.config.dt + p["radial_scale"] / self.config.dt
        return 4.0 * tip_speed / min(p["link_lengths"]) * 2.0


class FingersExpert:
    """Close both fingers fully, then turn them together to the goal angle and hold."""

    def __init__(self, config: EnvConfig):
        self.p = config.params
        self.reset()

    def reset(self):
        self.closing = 0

    def __call__(self, obs: Observation, goal):
        kin = obs.kinematics
        theta = kin[0]
        self.closing += 1
        turn = 0.0
        if self.closing > 6:
            turn = np.clip((goal[0] - theta) / self.p["phi_scale"], -1.0, 1.0)
        return np.array([turn, turn, -1.0, -1.0])
