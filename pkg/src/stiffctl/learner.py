"""Goal-conditioned DDPG with Q-filtered behaviour cloning.

Inputs to both networks are normalised (observation, goal) pairs; the critic
also takes the action. Losses follow the usual baselines composition: the
actor minimises -Q plus a small action-magnitude penalty, plus the masked
cloning term when an imitation batch is given.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from stiffctl import nn


@dataclass
class LearnerConfig:
    batch_size: int = 256
    imitation_batch: int = 128
    discount: float = 0.98
    polyak: float = 0.95
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    hidden: tuple = (64, 64, 64)
    action_l2: float = 1.0
    bc_weight: float = 1.0
    noise_scale: float = 0.2
    random_action_prob: float = 0.1
    q_filter_enabled: bool = True
    regulator_enabled: bool = True
    updates_per_cycle: int = 40
    clip_obs: float = 5.0
    norm_eps: float = 1e-2
    target_min: float = -np.inf  # set from the reward bound by the harness

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Normalizer:
    """Running mean/std with clipping."""

    def __init__(self, size: int, eps=1e-2, clip=5.0):
        self.size = size
        self.eps = eps
        self.clip = clip
        self.total = np.zeros(size)
        self.sumsq = np.zeros(size)
        self.count = 0
        self.mean = np.zeros(size)
        self.std = np.ones(size)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.size)
        self.total += x.sum(axis=0)
        self.sumsq += (x**2).sum(axis=0)
        self.count += len(x)
        self.mean = self.total / self.count
        var = np.maximum(self.sumsq / self.count - self.mean**2, 0.0)
        self.std = np.sqrt(np.maximum(var, self.eps**2))

    def __call__(self, x):
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)

    def state(self) -> dict:
        return {"total": self.total.tolist(), "sumsq": self.sumsq.tolist(), "count": self.count}

    def load_state(self, d) -> None:
        self.total = np.asarray(d["total"], dtype=np.float64)
        self.sumsq = np.asarray(d["sumsq"], dtype=np.float64)
        self.count = int(d["count"])
        if self.count:
            self.update(np.zeros((0, self.size)))


@dataclass
class NetBundle:
    actor: nn.MlpParams
    critic: nn.MlpParams
    target_actor: nn.MlpParams
    target_critic: nn.MlpParams
    actor_opt: nn.OptimizerState
    critic_opt: nn.OptimizerState
    o_norm: Normalizer
    g_norm: Normalizer
    faults: int = 0
    counters: dict = field(default_factory=lambda: {"q_filter_evals": 0, "demo_samples": 0, "bc_active": 0})

    @property
    def action_dim(self) -> int:
        return self.actor.layer_sizes[-1]

    @classmethod
    def create(cls, obs_dim, goal_dim, action_dim, config: LearnerConfig, rng) -> NetBundle:
        hidden = list(config.hidden)
        actor = nn.init_mlp([obs_dim + goal_dim, *hidden, action_dim], rng, "tanh")
        critic = nn.init_mlp([obs_dim + goal_dim + action_dim, *hidden, 1], rng, "identity")
        return cls(
            actor,
            critic,
            actor.copy(),
            critic.copy(),
            nn.OptimizerState.for_params(actor, config.actor_lr),
            nn.OptimizerState.for_params(critic, config.critic_lr),
            Normalizer(obs_dim, config.norm_eps, config.clip_obs),
            Normalizer(goal_dim, config.norm_eps, config.clip_obs),
        )

    def inputs(self, o, g):
        return np.concatenate([self.o_norm(o), self.g_norm(g)], axis=-1)

    def act(self, o, g, target=False):
        return nn.mlp_forward(self.target_actor if target else self.actor, self.inputs(o, g))

    def q(self, o, g, a, target=False):
        x = np.concatenate([self.inputs(o, g), a], axis=-1)
        return nn.mlp_forward(self.target_critic if target else self.critic, x)[..., 0]


def critic_targets(nets: NetBundle, batch, config: LearnerConfig) -> np.ndarray:
    a2 = nets.act(batch["o2"], batch["g"], target=True)
    q2 = nets.q(batch["o2"], batch["g"], a2, target=True)
    y = batch["r"] + config.discount * (1.0 - batch["done"].astype(np.float64)) * q2
    return np.clip(y, config.target_min, 0.0)


def critic_update(nets: NetBundle, batch, config: LearnerConfig) -> tuple[NetBundle, float]:
    """One Adam step on the mean squared Bellman error. Non-finite steps are skipped and counted."""
    y = critic_targets(nets, batch, config)
    x = np.concatenate([nets.inputs(batch["o"], batch["g"]), batch["a"]], axis=-1)
    q, cache = nn.forward_cached(nets.critic, x)
    err = q[:, 0] - y
    loss = float(np.mean(err**2))
    if not np.isfinite(loss):
        nets.faults += 1
        return nets, loss
    grads, _ = nn.backward(nets.critic, cache, (2.0 / len(err)) * err[:, None])
    try:
        nets.critic, nets.critic_opt = nn.adam_step(nets.critic, grads, nets.critic_opt)
    except nn.NonFiniteError:
        nets.faults += 1
    return nets, loss


def q_filter_mask(nets: NetBundle, demo_batch) -> np.ndarray:
    """True where the live critic values the demo action strictly above the policy's."""
    o, g = demo_batch["o"], demo_batch["g"]
    q_demo = nets.q(o, g, demo_batch["a"])
    q_pi = nets.q(o, g, nets.act(o, g))
    nets.counters["q_filter_evals"] += len(q_demo)
    return q_demo > q_pi


def actor_loss_and_grads(nets: NetBundle, rl_batch, imitation_batch, mask, config: LearnerConfig):
    """Loss terms and actor gradients; ``mask`` gates the cloning samples."""
    n_rl = len(rl_batch["r"])
    x_rl = nets.inputs(rl_batch["o"], rl_batch["g"])
    if imitation_batch is not None and config.bc_weight > 0:
        x_im = nets.inputs(imitation_batch["o"], imitation_batch["g"])
        x = np.concatenate([x_rl, x_im])
    else:
        x_im = None
        x = x_rl
    pi, cache = nn.forward_cached(nets.actor, x)
    pi_rl = pi[:n_rl]

    # -Q term, differentiated through the critic's action input
    xq = np.concatenate([x_rl, pi_rl], axis=-1)
    q, qcache = nn.forward_cached(nets.critic, xq)
    _, dq_dx = nn.backward(nets.critic, qcache, np.full((n_rl, 1), -1.0 / n_rl))
    grad_pi = np.zeros_like(pi)
    grad_pi[:n_rl] = dq_dx[:, x_rl.shape[1] :]
    # action magnitude penalty
    grad_pi[:n_rl] += config.action_l2 * 2.0 * pi_rl / pi_rl.size
    losses = {
        "actor_q": float(-np.mean(q)),
        "action_l2": float(config.action_l2 * np.mean(pi_rl**2)),
        "bc": 0.0,
        "bc_count": 0,
    }
    if x_im is not None:
        m = np.asarray(mask, dtype=np.float64)[:, None]
        diff = pi[n_rl:] - imitation_batch["a"]
        # mean over the samples that pass the filter
        count = int(m.sum())
        scale = config.bc_weight / max(count, 1)
        losses["bc"] = float(scale * np.sum(m * diff**2))
        losses["bc_count"] = count
        grad_pi[n_rl:] = scale * 2.0 * m * diff
    grads, _ = nn.backward(nets.actor, cache, grad_pi)
    losses["total"] = losses["actor_q"] + losses["action_l2"] + losses["bc"]
    return losses, grads


def imitation_mask(nets: NetBundle, imitation_batch, config: LearnerConfig):
    """Which imitation samples the cloning term sees: Q-filtered, or all of them."""
    if imitation_batch is None or config.bc_weight <= 0:
        return None
    if config.q_filter_enabled:
        return q_filter_mask(nets, imitation_batch)
    return np.ones(len(imitation_batch["r"]), dtype=bool)


def actor_update(nets: NetBundle, rl_batch, imitation_batch, source_id, config: LearnerConfig, mask=None):
    """One Adam step on -Q + action_l2 + bc_weight * masked cloning error.

    ``imitation_batch`` may be None (no demos). Without the Q-filter every
    imitation sample is cloned. A precomputed ``mask`` (from ``imitation_mask``
    on the same nets) is used as given.
    """
    if mask is None:
        mask = imitation_mask(nets, imitation_batch, config)
    if mask is not None:
        nets.counters["bc_active"] += int(mask.sum())
    losses, grads = actor_loss_and_grads(nets, rl_batch, imitation_batch, mask, config)
    losses["source"] = source_id
    if not np.isfinite(losses["total"]):
        nets.faults += 1
        return nets, losses
    try:
        nets.actor, nets.actor_opt = nn.adam_step(nets.actor, grads, nets.actor_opt)
    except nn.NonFiniteError:
        nets.faults += 1
    return nets, losses


def _blend(target: nn.MlpParams, source: nn.MlpParams, polyak: float) -> nn.MlpParams:
    return target.with_arrays([polyak * t + (1.0 - polyak) * s for t, s in zip(target.arrays, source.arrays)])


def target_soft_update(nets: NetBundle, polyak: float) -> NetBundle:
    if not 0.0 <= polyak <= 1.0:
        raise ValueError("polyak must lie in [0, 1]")
    nets.target_actor = _blend(nets.target_actor, nets.actor, polyak)
    nets.target_critic = _blend(nets.target_critic, nets.critic, polyak)
    return nets


def explore_action(policy_out, config: LearnerConfig, rng: np.random.Generator) -> np.ndarray:
    a = np.asarray(policy_out, dtype=np.float64)
    if rng.random() < config.random_action_prob:
        return rng.uniform(-1.0, 1.0, size=a.shape)
    return np.clip(a + config.noise_scale * rng.standard_normal(a.shape), -1.0, 1.0)


# -- checkpoints ----------------------------------------------------------------------------

NETS = ("actor", "critic", "target_actor", "target_critic")


def save_checkpoint(nets: NetBundle, prefix, meta: dict) -> None:
    for name in NETS:
        nn.save(getattr(nets, name), f"{prefix}.{name}.bin")
    side = dict(meta, o_norm=nets.o_norm.state(), g_norm=nets.g_norm.state())
    with open(f"{prefix}.json", "w") as f:
        json.dump(side, f, indent=1)


def load_checkpoint(prefix, config: LearnerConfig) -> tuple[NetBundle, dict]:
    nets_ = {name: nn.load(f"{prefix}.{name}.bin") for name in NETS}
    with open(f"{prefix}.json") as f:
        meta = json.load(f)
    o_norm = Normalizer(len(meta["o_norm"]["total"]), config.norm_eps, config.clip_obs)
    g_norm = Normalizer(len(meta["g_norm"]["total"]), config.norm_eps, config.clip_obs)
    o_norm.load_state(meta["o_norm"])
    g_norm.load_state(meta["g_norm"])
    bundle = NetBundle(
        **nets_,
        actor_opt=nn.OptimizerState.for_params(nets_["actor"], config.actor_lr),
        critic_opt=nn.OptimizerState.for_params(nets_["critic"], config.critic_lr),
        o_norm=o_norm,
        g_norm=g_norm,
    )
    return bundle, meta
