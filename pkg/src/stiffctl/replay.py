"""Replay buffers, hindsight relabeling and the imitation-source switch.

Buffers are struct-of-arrays ring stores. Rewards are kept alongside the raw
fields they derive from (achieved goal, goal, force norm, joint speed) so any
batch can be re-scored under a different reward configuration.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from stiffctl.envs.base import EnvConfig, reward_from_parts
from stiffctl.envs.episode import Episode

FIELDS = ("o", "a", "o2", "ag2", "g", "f2", "q2", "r", "done", "intact", "ok")
DEMO, SIL = "d_demo", "d_sil"


@dataclass
class Transition:
    o: np.ndarray
    a: np.ndarray
    o2: np.ndarray
    ag2: np.ndarray
    g: np.ndarray
    f2: float
    q2: float
    r: float
    done: bool
    intact: bool
    ok: bool  # overall success flag of the source episode

    def to_json(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in FIELDS}

    @classmethod
    def from_json(cls, d: dict) -> Transition:
        vals = {k: np.asarray(d[k], dtype=np.float64) for k in ("o", "a", "o2", "ag2", "g")}
        return cls(**vals, f2=float(d["f2"]), q2=float(d["q2"]), r=float(d["r"]),
                   done=bool(d["done"]), intact=bool(d["intact"]), ok=bool(d["ok"]))


class Batch(dict):
    """Dict of stacked arrays keyed by FIELDS."""

    def __len__(self):
        return len(self["r"])

    def transition(self, i) -> Transition:
        return Transition(**{k: self[k][i] for k in FIELDS})

    def rescored(self, config: EnvConfig) -> Batch:
        out = Batch(self)
        out["r"] = reward_from_parts(self["ag2"], self["g"], self["f2"], self["q2"], config)
        return out


def episode_transitions(episode: Episode, config: EnvConfig) -> Batch:
    """The T raw transitions of an episode. Episode ends are truncations (done=False)."""
    arr = episode.arrays()
    T = episode.length
    intact = episode.safety_trace or [episode.flags.safety] * T
    g = np.repeat(arr["g"][None], T, axis=0)
    r = reward_from_parts(arr["ag"][1:], g, arr["f"][1:], arr["q"][1:], config)
    return Batch(
        o=arr["o"][:-1],
        a=arr["a"],
        o2=arr["o"][1:],
        ag2=arr["ag"][1:],
        g=g,
        f2=arr["f"][1:],
        q2=arr["q"][1:],
        r=r,
        done=np.zeros(T, dtype=bool),
        intact=np.asarray(intact, dtype=bool),
        ok=np.full(T, episode.flags.overall),
    )


def concat(batches) -> Batch:
    batches = [b for b in batches if len(b)]
    return Batch({k: np.concatenate([b[k] for b in batches]) for k in FIELDS})


def her_relabel(episode: Episode, k_future: int, rng: np.random.Generator, config: EnvConfig) -> Batch:
    """Original transitions plus ``k_future`` copies per step with future achieved goals.

    Goal for a copy of step t is the achieved goal after a uniformly drawn step
    t' in [t, T-1]. Output length is T * (1 + k_future).
    """
    if k_future < 0:
        raise ValueError("k_future must be >= 0")
    base = episode_transitions(episode, config)
    T = len(base)
    parts = [base]
    for _ in range(k_future):
        fut = rng.integers(np.arange(T), T)
        copy = Batch({k: v.copy() for k, v in base.items()})
        copy["g"] = base["ag2"][fut].copy()
        copy["r"] = reward_from_parts(copy["ag2"], copy["g"], copy["f2"], copy["q2"], config)
        parts.append(copy)
    return concat(parts)


class RingBuffer:
    """FIFO transition store; the oldest entries are overwritten at capacity."""

    def __init__(self, capacity: int, name: str = "buffer"):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.name = name
        self.data: dict | None = None
        self.size = 0
        self.head = 0
        self.frozen = False

    def __len__(self):
        return self.size

    def add(self, batch: Batch) -> None:
        if self.frozen:
            raise RuntimeError(f"{self.name} is read-only")
        n = len(batch)
        if n == 0:
            return
        if self.data is None:
            self.data = {k: np.zeros((self.capacity,) + np.shape(batch[k])[1:], dtype=np.asarray(batch[k]).dtype) for k in FIELDS}
        if n > self.capacity:
            batch = Batch({k: v[-self.capacity :] for k, v in batch.items()})
            n = self.capacity
        idx = (self.head + np.arange(n)) % self.capacity
        for k in FIELDS:
            self.data[k][idx] = batch[k]
        self.head = (self.head + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def ordered(self) -> Batch:
        """Contents oldest-first."""
        if self.size == 0:
            return Batch()
        start = (self.head - self.size) % self.capacity
        idx = (start + np.arange(self.size)) % self.capacity
        return Batch({k: self.data[k][idx] for k in FIELDS})

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError(f"{self.name} is empty")
        if n < 1:
            raise ValueError("n must be >= 1")
        start = (self.head - self.size) % self.capacity
        idx = (start + rng.integers(0, self.size, size=n)) % self.capacity
        return Batch({k: self.data[k][idx] for k in FIELDS})


@dataclass
class BufferSet:
    d_demo: RingBuffer
    d_sil: RingBuffer
    d_rl: RingBuffer
    fallbacks: int = 0  # times an empty d_sil fell back to d_demo

    @classmethod
    def create(cls, rl_capacity=1_000_000, sil_capacity=100_000, demo: Batch | None = None) -> BufferSet:
        n_demo = len(demo) if demo is not None and len(demo) else 1
        d_demo = RingBuffer(n_demo, DEMO)
        if demo is not None and len(demo):
            d_demo.add(demo)
        d_demo.frozen = True
        return cls(d_demo, RingBuffer(sil_capacity, SIL), RingBuffer(rl_capacity, "d_rl"))


def store_episode(buffers: BufferSet, episode: Episode, config: EnvConfig, k_future: int, rng) -> BufferSet:
    """Appends the relabeled episode to d_rl and, on overall success, the raw episode to d_sil."""
    buffers.d_rl.add(her_relabel(episode, k_future, rng, config))
    if episode.flags.overall:
        buffers.d_sil.add(episode_transitions(episode, config))
    return buffers


def select_imitation_source(sr: float, sr_ref: float) -> str:
    if not (0.0 <= sr <= 1.0 and 0.0 <= sr_ref <= 1.0):
        raise ValueError("sr and sr_ref must lie in [0, 1]")
    return DEMO if sr < sr_ref else SIL


def sample_batch(buffers: BufferSet, source: str, n: int, rng) -> tuple[Batch, str]:
    """Samples from the named buffer; an empty d_sil falls back to d_demo.

    Returns the batch and the id of the buffer actually used.
    """
    buf = getattr(buffers, source)
    if source == SIL and len(buf) == 0:
        buffers.fallbacks += 1
        warnings.warn("d_sil is empty; sampling d_demo instead", RuntimeWarning, stacklevel=2)
        buf, source = buffers.d_demo, DEMO
    return buf.sample(n, rng), source


def save_buffer(buf: RingBuffer, path, env_id: str) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"env_id": env_id, "buffer": buf.name, "count": len(buf)}) + "\n")
        b = buf.ordered()
        for i in range(len(buf)):
            f.write(json.dumps(b.transition(i).to_json()) + "\n")


def load_buffer(path, capacity=None) -> RingBuffer:
    with open(path) as f:
        header = json.loads(f.readline())
        rows = [Transition.from_json(json.loads(ln)) for ln in f if ln.strip()]
    buf = RingBuffer(capacity or max(len(rows), 1), header.get("buffer", "buffer"))
    if rows:
        buf.add(Batch({k: np.stack([np.asarray(getattr(t, k)) for t in rows]) for k in FIELDS}))
    return buf
