"""Dense ReLU networks with hand-written backprop and an Adam optimizer.

Everything is float64 and works on single vectors or (batch, features) arrays.
Weights are stored as (out, in) matrices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("identity", "tanh")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class MlpParams:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("need one weight matrix and bias per layer transition")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expect or b.shape != (expect[0],):
                raise ShapeError(f"layer {i}: got {w.shape}/{b.shape}, expected {expect}")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def with_arrays(self, arrays) -> MlpParams:
        n = len(self.weights)
        return MlpParams(list(self.layer_sizes), list(arrays[:n]), list(arrays[n:]), self.output_activation)

    def copy(self) -> MlpParams:
        return self.with_arrays([a.copy() for a in self.arrays])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays)


def init_mlp(layer_sizes, rng: np.random.Generator, output_activation="identity", final_scale=3e-3) -> MlpParams:
    """Uniform fan-in init; the last layer is kept small so initial outputs sit near zero."""
    weights, biases = [], []
    n = len(layer_sizes) - 1
    for i in range(n):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        bound = final_scale if i == n - 1 else 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(list(layer_sizes), weights, biases, output_activation)


def _as_batch(x, width):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"input has shape {x.shape}, network expects width {width}")
    return x, single


def forward_cached(params: MlpParams, x):
    """Forward pass that also returns the per-layer activations for backprop."""
    x, single = _as_batch(x, params.layer_sizes[0])
    acts = [x]
    h = x
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < n - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    out = np.tanh(h) if params.output_activation == "tanh" else h
    return out, (acts, out, single)


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    out, (_, _, single) = forward_cached(params, x)
    return out[0] if single else out


def backward(params: MlpParams, cache, grad_out):
    """Reverse accumulation through the cached pass.

    Returns (grads, grad_input) where grads matches ``params.arrays`` ordering.
    """
    acts, out, single = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if single and g.ndim == 1:
        g = g[None, :]
    if g.shape != out.shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match output {out.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("upstream gradient is not finite")
    if params.output_activation == "tanh":
        g = g * (1.0 - out**2)
    n = len(params.weights)
    dws, dbs = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * (acts[i + 1] > 0.0)
        dws[i] = g.T @ acts[i]
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return [*dws, *dbs], (g[0] if single else g)


def mlp_gradient(params: MlpParams, x, loss_grad_at_output) -> list[np.ndarray]:
    _, cache = forward_cached(params, x)
    grads, _ = backward(params, cache, loss_grad_at_output)
    return grads


@dataclass
class OptimizerState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, learning_rate=1e-3, **kw) -> OptimizerState:
        zeros = [np.zeros_like(a) for a in params.arrays]
        return cls(zeros, [z.copy() for z in zeros], 0, learning_rate, **kw)

    def copy(self) -> OptimizerState:
        return OptimizerState(
            [m.copy() for m in self.first_moment],
            [v.copy() for v in self.second_moment],
            self.step_count,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
        )


def adam_step(params: MlpParams, grads, state: OptimizerState) -> tuple[MlpParams, OptimizerState]:
    """Bias-corrected Adam update. Raises NonFiniteError (and changes nothing) on bad gradients."""
    arrays = params.arrays
    if len(grads) != len(arrays) or any(g.shape != a.shape for g, a in zip(grads, arrays)):
        raise ShapeError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteError("non-finite gradient, update skipped")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * m0 + (1 - b1) * g for m0, g in zip(state.first_moment, grads)]
    v = [b2 * v0 + (1 - b2) * g * g for v0, g in zip(state.second_moment, grads)]
    lr_t = state.learning_rate * np.sqrt(1 - b2**t) / (1 - b1**t)
    new = [a - lr_t * mi / (np.sqrt(vi) + state.epsilon) for a, mi, vi in zip(arrays, m, v)]
    new_state = OptimizerState(m, v, t, state.learning_rate, b1, b2, state.epsilon)
    return params.with_arrays(new), new_state


# -- flat binary snapshots ------------------------------------------------------

_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


def to_bytes(params: MlpParams) -> bytes:
    """Header: int32 layer count, int32 sizes, int32 output-activation code (all little-endian).
    Body: each weight matrix row-major, then each bias, as little-endian float64."""
    sizes = params.layer_sizes
    head = struct.pack(f"<i{len(sizes)}ii", len(sizes), *sizes, _ACT_CODES[params.output_activation])
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays)
    return head + body


def from_bytes(blob: bytes) -> MlpParams:
    (n,) = struct.unpack_from("<i", blob, 0)
    off = 4
    sizes = list(struct.unpack_from(f"<{n}i", blob, off))
    off += 4 * n
    (code,) = struct.unpack_from("<i", blob, off)
    off += 4
    weights, biases = [], []
    for i in range(n - 1):
        shape = (sizes[i + 1], sizes[i])
        cnt = shape[0] * shape[1]
        weights.append(np.frombuffer(blob, dtype="<f8", count=cnt, offset=off).reshape(shape).astype(np.float64))
        off += 8 * cnt
    for i in range(n - 1):
        cnt = sizes[i + 1]
        biases.append(np.frombuffer(blob, dtype="<f8", count=cnt, offset=off).astype(np.float64))
        off += 8 * cnt
    if off != len(blob):
        raise ShapeError(f"snapshot has {len(blob) - off} trailing bytes")
    return MlpParams(sizes, weights, biases, ACTIVATIONS[code])


def save(params: MlpParams, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(params))


def load(path) -> MlpParams:
    with open(path, "rb") as f:
        return from_bytes(f.read())
