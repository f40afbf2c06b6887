import dataclasses
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stiffctl.envs import (
    ENV_IDS,
    ContractError,
    Observation,
    StiffnessAction,
    Uncertainty,
    apply_uncertainties,
    compute_reward,
    default_config,
    is_success,
    load_config_file,
    make_env,
    randomize_domain,
    reward_from_parts,
)
from stiffctl.envs.base import FINGERS_RANDOMIZATION, dump_config_file
from stiffctl.envs.core import StiffnessState, update_stiffness
from stiffctl.envs.episode import run_episode, write_trace


def quiet(env_id, **kw):
    return default_config(env_id, uncertainty=Uncertainty.none(), **kw)


def obs_with(ag, force, qdot):
    return Observation(np.zeros(3), np.asarray(force, float), np.asarray(qdot, float), np.zeros(2), np.asarray(ag, float))


# -- reward ---------------------------------------------------------------------------------


def test_reward_examples():
    block = default_config("block")
    assert compute_reward(obs_with([0.1, 0.2], [0.0, 0.0], []), [0.1, 0.2], block) == 0.0
    f = [100 / np.sqrt(2)] * 2
    assert compute_reward(obs_with([0.0, 0.0], f, []), [1.0, 1.0], block) == pytest.approx(-1.2)
    fingers = default_config("fingers")
    r = compute_reward(obs_with([0.3], [1.0, 0.0], [0.1, 0.0]), [0.3], fingers)
    assert r == pytest.approx(-0.5)


def test_reward_oracle_on_random_observations():
    rng = np.random.default_rng(0)
    for env_id in ENV_IDS:
        cfg = default_config(env_id)
        gdim = {"block": 2, "chip": 4, "fingers": 1}[env_id]
        for _ in range(1000):
            ag, g = rng.uniform(-0.2, 0.2, gdim), rng.uniform(-0.2, 0.2, gdim)
            if rng.random() < 0.3:
                g = ag + rng.uniform(-0.01, 0.01, gdim)
            force, qdot = rng.uniform(-50, 50, 2), rng.uniform(-2, 2, 2)
            if env_id == "chip":
                met = np.linalg.norm(ag[:2] - g[:2]) < cfg.d and np.linalg.norm(ag[2:] - g[2:]) < cfg.velocity_threshold
            elif env_id == "fingers":
                met = abs(np.angle(np.exp(1j * (ag[0] - g[0])))) < cfg.d
            else:
                met = np.linalg.norm(ag - g) < cfg.d
            r_task = 0.0 if met else -1.0
            r_safety = -cfg.alpha * np.linalg.norm(force) - cfg.beta * np.linalg.norm(qdot)
            expect = r_task + r_safety
            assert compute_reward(obs_with(ag, force, qdot), g, cfg) == expect


@given(st.floats(0, 500), st.floats(0, 500), st.floats(0, 5))
def test_reward_monotone_and_nonpositive(f1, f2, q):
    cfg = default_config("fingers")
    lo, hi = sorted([f1, f2])
    r_lo = reward_from_parts([0.0], [0.0], lo, q, cfg)
    r_hi = reward_from_parts([0.0], [0.0], hi, q, cfg)
    assert r_hi <= r_lo <= 0.0
    assert reward_from_parts([0.0], [0.0], lo, q + 1.0, cfg) <= r_lo


def test_success_flags():
    cfg = default_config("block")
    assert is_success([0, 0.1], [0, 0.1], True, cfg).as_dict() == {"task": True, "safety": True, "overall": True}
    assert is_success([0, 0.1], [0, 0.1], False, cfg).as_dict() == {"task": True, "safety": False, "overall": False}
    assert is_success([0, 0.1], [0.5, 0.1], True, cfg).as_dict() == {"task": False, "safety": True, "overall": False}


# -- reset and step contracts ---------------------------------------------------------------


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_reset_state(env_id):
    cfg = quiet(env_id)
    env = make_env(cfg, 0)
    for _ in range(20):
        obs, goal = env.reset()
        assert env.intact and env.stiffness.k == cfg.k_passive and env.stiffness.k_lim == cfg.k_max
        assert obs.force_norm == 0.0
        assert list(obs.stiffness) == [cfg.k_passive, cfg.k_max]
        if env_id == "block":
            assert goal[1] > cfg.params["block_half"]
        if env_id == "chip":
            assert np.all(goal[2:] == 0.0)


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_action_contract(env_id):
    env = make_env(quiet(env_id), 0)
    env.reset()
    with pytest.raises(ContractError):
        env.step(np.full(env.action_dim, 1.5))
    with pytest.raises(ContractError):
        env.step(np.zeros(env.action_dim + 1))
    with pytest.raises(ContractError):
        env.step(np.full(env.action_dim, np.nan))


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_zero_action_keeps_object_still(env_id):
    env = make_env(quiet(env_id), 1)
    obs, goal = env.reset()
    ag0 = env.true_achieved_goal()
    for _ in range(10):
        obs, r, done, flags, info = env.step(np.zeros(env.action_dim))
        assert r <= 0.0
    assert np.allclose(env.true_achieved_goal(), ag0, atol=1e-9)


def test_stiffness_floor_recurrence():
    cfg = quiet("block")
    env = make_env(cfg, 0)
    env.reset()
    ks = []
    a = np.zeros(env.action_dim)
    a[-2:] = -1.0
    for _ in range(10):
        env.step(a)
        ks.append(env.stiffness.k)
    s = StiffnessState(cfg.k_passive, cfg.k_max)
    expect = []
    for _ in range(10):
        s = update_stiffness(s, -1.0, -1.0, cfg)
        expect.append(s.k)
    assert ks == expect
    assert ks[-1] == pytest.approx(cfg.k_floor)


@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=40))
def test_stiffness_clamps(deltas):
    cfg = default_config("chip")
    s = StiffnessState(cfg.k_passive, cfg.k_max)
    for dk, dl in deltas:
        s = update_stiffness(s, dk, dl, cfg)
        assert 0 < cfg.k_floor <= s.k <= s.k_lim <= cfg.k_max


def test_grasp_force_decays_when_stiffness_drops():
    """Close fully around the block, then command dk = -1: the estimate falls toward zero."""
    from stiffctl.demos import BlockExpert

    cfg = quiet("block")
    env = make_env(cfg, 3)
    obs, goal = env.reset()
    ex = BlockExpert(cfg)
    while ex.phase < 3:
        obs, *_ = env.step(np.concatenate([ex(obs, goal), [0.0, 0.0]]))
    f_before = obs.force_norm
    for _ in range(30):  # 5 steps to the floor, then the force filter settles
        obs, *_ = env.step(np.array([0.0, 0.0, -1.0, -1.0, -1.0]))
    assert f_before > 200.0
    # k sits at its 1% floor; the estimate is bounded by floor * largest deflection
    assert env.stiffness.k == cfg.k_floor
    bound = np.sqrt(2) * cfg.k_floor * (cfg.params["finger_open"] - cfg.params["grip_range"][0])
    assert obs.force_norm <= bound * 1.001 < 0.03 * f_before


def test_breakage_terminates_and_latches():
    from stiffctl.demos import BlockExpert

    cfg = quiet("block")
    env = make_env(cfg, 3)
    obs, goal = env.reset()
    ex = BlockExpert(cfg)
    done, t = False, 0
    while not done:
        obs, r, done, flags, info = env.step(np.concatenate([ex(obs, goal), [0.0, 0.0]]))
        t += 1
    assert t < cfg.horizon and not flags.safety and not flags.overall
    with pytest.raises(ContractError):
        env.step(np.zeros(env.action_dim))
    # without termination the broken flag stays latched to the horizon
    env = make_env(dataclasses.replace(cfg, terminate_on_break=False), 3)
    ep = run_episode(env, lambda o, g, ex=BlockExpert(cfg): np.concatenate([ex(o, g), [0.0, 0.0]]))
    trace = ep.safety_trace
    first = trace.index(False)
    assert not any(trace[first:]) and ep.length == cfg.horizon


def test_position_control_has_no_stiffness_dims():
    cfg = quiet("block", stiffness_control=False)
    env = make_env(cfg, 0)
    obs, _ = env.reset()
    assert env.action_dim == 3 and obs.stiffness.size == 0


def test_action_dataclass_roundtrip():
    v = np.array([0.1, -0.2, 0.3, -1.0, 1.0])
    a = StiffnessAction.from_vector(v, 2, 1, True)
    assert a.has_stiffness and np.array_equal(a.vector(), v)
    with pytest.raises(ContractError):
        StiffnessAction.from_vector(v, 2, 1, False)


# -- uncertainties --------------------------------------------------------------------------


def test_control_failure_rate():
    rng = np.random.default_rng(0)
    unc = Uncertainty()
    prev = np.zeros(3)
    fails = 0
    n = 100_000
    for i in range(n):
        a = np.full(3, (i % 7) / 7.0)
        d = apply_uncertainties(a, prev, rng, unc, 2)
        if d.failed:
            fails += 1
            assert np.array_equal(d.action, prev)
        prev = d.action
    assert abs(fails / n - 0.10) <= 0.01


def test_noise_and_kick_ranges():
    rng = np.random.default_rng(1)
    unc = Uncertainty()
    draws = [apply_uncertainties(np.zeros(3), None, rng, unc, 2) for _ in range(20000)]
    noise = np.array([d.noise for d in draws])
    kick = np.array([d.kick for d in draws])
    assert np.all(np.abs(noise) <= 0.01) and np.all(np.abs(kick) <= 0.5)
    # uniform moments: mean 0, variance (2b)^2 / 12
    assert abs(noise.mean()) < 2e-4 and noise.var() == pytest.approx(0.02**2 / 12, rel=0.03)
    assert abs(kick.mean()) < 1e-2 and kick.var() == pytest.approx(1.0 / 12, rel=0.03)
    assert not any(d.failed for d in draws)  # no previous action yet


def test_disabled_uncertainties_change_nothing():
    rng = np.random.default_rng(2)
    state = rng.bit_generator.state
    a = np.array([0.3, -0.1, 0.9])
    d = apply_uncertainties(a, np.zeros(3), rng, Uncertainty.none(), 2)
    assert np.array_equal(d.action, a) and d.kick == 0.0 and not d.noise.any() and not d.failed
    assert rng.bit_generator.state == state


def test_env_control_failure_repeats_executed_action():
    cfg = default_config("block", uncertainty=Uncertainty(False, False, True))
    env = make_env(cfg, 5)
    env.reset()
    rng = np.random.default_rng(0)
    prev, seen = None, 0
    for _ in range(200):
        if env.done:
            env.reset()
            prev = None
        _, _, _, _, info = env.step(rng.uniform(-1, 1, env.action_dim))
        if info["control_failure"]:
            seen += 1
            assert np.array_equal(info["executed_action"], prev)
        prev = info["executed_action"]
    assert seen > 0


# -- domain randomisation -------------------------------------------------------------------


def test_randomization_means():
    cfg = default_config("fingers")
    rng = np.random.default_rng(0)
    draws = [randomize_domain(cfg, rng).params for _ in range(10_000)]
    for key, (lo, hi) in FINGERS_RANDOMIZATION.items():
        vals = np.array([d[key] for d in draws])
        assert np.all((vals >= lo) & (vals <= hi))
        mid = (lo + hi) / 2
        scale = abs(mid) if mid != 0 else (hi - lo) / 2
        assert abs(vals.mean() - mid) <= 0.05 * scale


def test_randomization_deterministic_and_fingers_only():
    cfg = default_config("fingers")
    a = randomize_domain(cfg, np.random.default_rng(7))
    b = randomize_domain(cfg, np.random.default_rng(7))
    assert a.params == b.params
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        same = randomize_domain(default_config("block"), np.random.default_rng(7))
    assert same == default_config("block") and w


def test_fingers_defaults_are_midpoints():
    cfg = default_config("fingers")
    assert not cfg.randomize
    assert cfg.params["object_width"] == 0.02 and cfg.params["band_stiffness"] == 50.0


# -- determinism, traces and config files ---------------------------------------------------


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_same_seed_same_episode(env_id):
    def roll(seed):
        env = make_env(default_config(env_id, randomize=env_id == "fingers"), seed)
        rng = np.random.default_rng(9)
        ep = run_episode(env, lambda o, g: rng.uniform(-1, 1, env.action_dim))
        return np.stack([o.vector() for o in ep.observations]), ep.rewards

    a, b = roll(3), roll(3)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_trace_export(tmp_path):
    env = make_env(default_config("chip"), 0)
    ep = run_episode(env, lambda o, g: np.zeros(env.action_dim))
    path = tmp_path / "trace.jsonl"
    write_trace(ep, path)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert len(lines) == ep.length
    assert {"obs", "action", "reward", "intact"} <= set(lines[0])
    assert lines[-1]["flags"] == ep.flags.as_dict()


def test_config_file_roundtrip(tmp_path):
    cfg = default_config("fingers", alpha=0.3)
    path = tmp_path / "fingers.ini"
    dump_config_file(cfg, path)
    back = load_config_file(path)
    assert back == cfg
    path.write_text("[env]\nenv_id = block\nfragility = 123\n[uncertainty]\nperturbation = false\n[physics]\nobject_mass = 0.3\n")
    c = load_config_file(path)
    assert c.fragility == 123 and not c.uncertainty.perturbation and c.params["object_mass"] == 0.3
    path.write_text("[env]\nenv_id = block\nbogus = 1\n")
    with pytest.raises(ValueError):
        load_config_file(path)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(ENV_IDS), st.integers(0, 1000))
def test_overall_implies_task_and_safety(env_id, seed):
    env = make_env(default_config(env_id), seed)
    rng = np.random.default_rng(seed)
    ep = run_episode(env, lambda o, g: rng.uniform(-1, 1, env.action_dim))
    f = ep.flags
    assert f.overall <= min(f.task, f.safety)
    assert all(r <= 0 for r in ep.rewards)
