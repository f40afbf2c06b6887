import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stiffctl.envs import default_config, make_env, reward_from_parts
from stiffctl.envs.episode import run_episode
from stiffctl.replay import (
    DEMO,
    FIELDS,
    SIL,
    Batch,
    BufferSet,
    RingBuffer,
    episode_transitions,
    her_relabel,
    load_buffer,
    sample_batch,
    save_buffer,
    select_imitation_source,
    store_episode,
)

CFG = default_config("block")


def episode(seed, env_id="block"):
    cfg = default_config(env_id)
    env = make_env(cfg, seed)
    rng = np.random.default_rng(seed)
    return run_episode(env, lambda o, g: rng.uniform(-1, 1, env.action_dim))


def numbered(n, start=0):
    """A batch whose reward field carries the row id."""
    ids = np.arange(start, start + n, dtype=np.float64)
    return Batch(
        o=np.zeros((n, 2)), a=np.zeros((n, 1)), o2=np.zeros((n, 2)), ag2=np.zeros((n, 2)), g=np.zeros((n, 2)),
        f2=np.zeros(n), q2=np.zeros(n), r=ids, done=np.zeros(n, bool), intact=np.ones(n, bool), ok=np.zeros(n, bool),
    )


def test_episode_transitions_shapes_and_rewards():
    ep = episode(0)
    b = episode_transitions(ep, CFG)
    T = ep.length
    assert len(b) == T and set(b) == set(FIELDS)
    assert np.allclose(b["r"], ep.rewards)
    assert not b["done"].any()
    assert np.array_equal(b["o2"][:-1], b["o"][1:])


def test_her_self_consistency_on_1e4_transitions():
    rng = np.random.default_rng(0)
    total = 0
    seed = 0
    while total < 10_000:
        ep = episode(seed)
        seed += 1
        b = her_relabel(ep, 4, rng, CFG)
        T = ep.length
        assert len(b) == T * 5
        r = reward_from_parts(b["ag2"], b["g"], b["f2"], b["q2"], CFG)
        assert np.array_equal(r, b["r"])
        # relabeled goals are achieved goals from the same or a later step
        ag = np.stack([o.achieved_goal for o in ep.observations])[1:]
        for j in range(1, 5):
            part = b["g"][j * T : (j + 1) * T]
            for t in range(T):
                assert any(np.array_equal(part[t], ag[u]) for u in range(t, T))
        total += len(b)


def test_her_future_goal_at_last_step_is_own():
    ep = episode(3)
    b = her_relabel(ep, 3, np.random.default_rng(1), CFG)
    T = ep.length
    for j in range(1, 4):
        assert np.array_equal(b["g"][(j + 1) * T - 1], b["ag2"][T - 1])
        assert b["r"][(j + 1) * T - 1] == -CFG.alpha * b["f2"][T - 1]
    with pytest.raises(ValueError):
        her_relabel(ep, -1, np.random.default_rng(0), CFG)


def test_rescored_under_other_config():
    b = her_relabel(episode(4), 2, np.random.default_rng(0), CFG)
    import dataclasses

    free = dataclasses.replace(CFG, alpha=0.0)
    r = b.rescored(free)["r"]
    assert set(np.unique(r)) <= {-1.0, 0.0}
    assert np.array_equal(b.rescored(CFG)["r"], b["r"])


def test_ring_buffer_fifo():
    buf = RingBuffer(10, "t")
    buf.add(numbered(7))
    buf.add(numbered(6, start=7))
    assert len(buf) == 10
    assert list(buf.ordered()["r"]) == list(range(3, 13))
    buf.add(numbered(25, start=100))
    assert list(buf.ordered()["r"]) == list(range(115, 125))
    with pytest.raises(ValueError):
        RingBuffer(0)
    with pytest.raises(ValueError):
        RingBuffer(3).sample(1, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.lists(st.integers(0, 20), min_size=1, max_size=8))
def test_ring_buffer_keeps_newest(capacity, sizes):
    buf = RingBuffer(capacity)
    seen = []
    for n in sizes:
        buf.add(numbered(n, start=len(seen)))
        seen += list(range(len(seen), len(seen) + n))
    assert len(buf) == min(capacity, len(seen))
    if seen:
        assert list(buf.ordered()["r"]) == seen[-capacity:]


def test_sampling_is_uniform_chi_square():
    buf = RingBuffer(100)
    buf.add(numbered(130))  # wrapped, so sampling must respect the ring offset
    rng = np.random.default_rng(0)
    counts = np.zeros(100)
    draws = 200_000
    for _ in range(draws // 1000):
        ids = buf.sample(1000, rng)["r"].astype(int) - 30
        assert ids.min() >= 0
        counts += np.bincount(ids, minlength=100)
    expected = draws / 100
    chi2 = np.sum((counts - expected) ** 2 / expected)
    # 99.9th percentile of chi-square with 99 degrees of freedom is about 148.2
    assert chi2 < 148.2


def test_frozen_demo_buffer():
    bs = BufferSet.create(rl_capacity=50, sil_capacity=20, demo=numbered(5))
    assert len(bs.d_demo) == 5 and bs.d_demo.frozen
    with pytest.raises(RuntimeError):
        bs.d_demo.add(numbered(1))


def test_store_episode_routes_successes():
    bs = BufferSet.create(rl_capacity=10_000, sil_capacity=1000)
    ep = episode(5)
    store_episode(bs, ep, CFG, 4, np.random.default_rng(0))
    assert len(bs.d_rl) == 5 * ep.length
    assert len(bs.d_sil) == (ep.length if ep.flags.overall else 0)
    ep.flags.task, ep.flags.safety = True, True
    store_episode(bs, ep, CFG, 4, np.random.default_rng(0))
    assert len(bs.d_sil) >= ep.length and bs.d_sil.ordered()["ok"].all()


@pytest.mark.parametrize("sr_ref", [0.65, 0.85, 0.65])
def test_regulator_flips_exactly_at_reference(sr_ref):
    assert select_imitation_source(sr_ref, sr_ref) == SIL
    assert select_imitation_source(np.nextafter(sr_ref, 0.0), sr_ref) == DEMO
    assert select_imitation_source(0.0, sr_ref) == DEMO
    assert select_imitation_source(1.0, sr_ref) == SIL
    with pytest.raises(ValueError):
        select_imitation_source(1.1, sr_ref)


def test_environment_sr_refs():
    assert [default_config(e).sr_ref for e in ("block", "chip", "fingers")] == [0.65, 0.85, 0.65]


def test_empty_sil_falls_back_with_warning():
    bs = BufferSet.create(rl_capacity=100, sil_capacity=100, demo=numbered(5))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        b, used = sample_batch(bs, SIL, 8, np.random.default_rng(0))
    assert used == DEMO and bs.fallbacks == 1 and len(b) == 8
    assert any(issubclass(x.category, RuntimeWarning) for x in w)
    bs.d_sil.add(numbered(3, start=50))
    b, used = sample_batch(bs, SIL, 8, np.random.default_rng(0))
    assert used == SIL and set(b["r"]) <= {50.0, 51.0, 52.0} and bs.fallbacks == 1


def test_buffer_file_roundtrip(tmp_path):
    buf = RingBuffer(40, "d_sil")
    buf.add(episode_transitions(episode(6), CFG))
    path = tmp_path / "sil.jsonl"
    save_buffer(buf, path, "block")
    back = load_buffer(path)
    assert back.name == "d_sil" and len(back) == len(buf)
    a, b = buf.ordered(), back.ordered()
    for k in FIELDS:
        assert np.array_equal(np.asarray(a[k], dtype=np.float64), np.asarray(b[k], dtype=np.float64))
