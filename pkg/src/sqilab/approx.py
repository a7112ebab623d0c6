"""Small feedforward network with hand-written backprop and Adam.

Parameters flatten in a fixed order: for each layer, the weight matrix
(shape ``(fan_in, fan_out)``, row-major) followed by its bias vector.
Hidden layers use tanh; the output layer is linear.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError

CHECKPOINT_FORMAT = "sqilab-network"
CHECKPOINT_VERSION = 1

# loss_fn(outputs) -> (loss, d_loss / d_outputs)
LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class Network:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, layer_sizes: Sequence[int], rng: np.random.Generator) -> "Network":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ContractError(f"invalid layer sizes {sizes}")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(sizes, weights, biases)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "Network":
        sizes = tuple(int(s) for s in layer_sizes)
        return cls(
            sizes,
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
        )

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "Network":
        return Network(self.layer_sizes, [w.copy() for w in self.weights],
                       [b.copy() for b in self.biases])


def flatten(net: Network) -> np.ndarray:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(layer_sizes: Sequence[int], flat: np.ndarray) -> Network:
    sizes = tuple(int(s) for s in layer_sizes)
    flat = np.asarray(flat, dtype=float)
    weights, biases = [], []
    i = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[i:i + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        i += fan_in * fan_out
        biases.append(flat[i:i + fan_out].copy())
        i += fan_out
    if i != flat.size:
        raise ContractError(f"expected {i} parameters for sizes {sizes}, got {flat.size}")
    return Network(sizes, weights, biases)


def set_flat(net: Network, flat: np.ndarray) -> None:
    """Overwrite ``net``'s parameters in place from a flat vector."""
    i = 0
    for w, b in zip(net.weights, net.biases):
        w[...] = flat[i:i + w.size].reshape(w.shape)
        i += w.size
        b[...] = flat[i:i + b.size]
        i += b.size
    if i != flat.size:
        raise ContractError(f"expected {i} parameters, got {flat.size}")


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_size:
        raise ContractError(
            f"input of shape {x.shape} does not match network input size {net.input_size}"
        )
    return x, single


def forward(net: Network, obs) -> np.ndarray:
    x, single = _as_batch(net, obs)
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
    return h[0] if single else h


def _forward_cached(net: Network, x: np.ndarray):
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def _backward(net: Network, acts: list[np.ndarray], d_out: np.ndarray) -> np.ndarray:
    grads = []
    delta = d_out
    for i in range(len(net.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append((acts[i].T @ delta).ravel())
        if i > 0:
            delta = (delta @ net.weights[i].T) * (1.0 - acts[i] ** 2)
    grads.reverse()
    return np.concatenate(grads)


def backprop(net: Network, inputs, d_out: np.ndarray) -> np.ndarray:
    """Flat gradient given d(loss)/d(outputs) for every batch row."""
    x, single = _as_batch(net, inputs)
    d_out = np.asarray(d_out, dtype=float).reshape(x.shape[0], net.output_size)
    _, acts = _forward_cached(net, x)
    grad = _backward(net, acts, d_out)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient during backpropagation")
    return grad


def value_and_gradient(net: Network, inputs, loss_fn: LossFn) -> tuple[float, np.ndarray]:
    x, _ = _as_batch(net, inputs)
    out, acts = _forward_cached(net, x)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite network output")
    loss, d_out = loss_fn(out)
    d_out = np.asarray(d_out, dtype=float).reshape(out.shape)
    if not np.isfinite(loss) or not np.all(np.isfinite(d_out)):
        raise NumericalError("non-finite loss or output gradient")
    grad = _backward(net, acts, d_out)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient during backpropagation")
    return float(loss), grad


def loss_gradient(net: Network, inputs, loss_fn: LossFn) -> np.ndarray:
    return value_and_gradient(net, inputs, loss_fn)[1]


def numerical_gradient(f: Callable[[np.ndarray], float], theta: np.ndarray,
                       epsilon: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat parameter vector."""
    theta = np.array(theta, dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + epsilon
        hi = f(theta)
        theta[i] = orig - epsilon
        lo = f(theta)
        theta[i] = orig
        grad[i] = (hi - lo) / (2.0 * epsilon)
    return grad


def max_relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """max_i |a_i - r_i| / max(1, |a_i|)."""
    analytic = np.asarray(analytic, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - reference) / np.maximum(1.0, np.abs(analytic))))


def finite_diff_check(net: Network, inputs, loss_fn: LossFn, epsilon: float = 1e-5) -> float:
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    _, analytic = value_and_gradient(net, inputs, loss_fn)
    probe = net.copy()

    def f(theta):
        set_flat(probe, theta)
        return float(loss_fn(forward(probe, inputs))[0])

    numeric = numerical_gradient(f, flatten(net), epsilon)
    return max_relative_error(analytic, numeric)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, **kw)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray
              ) -> tuple[np.ndarray, AdamState]:
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ContractError(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, moments {state.m.shape}"
        )
    if np.any(np.isnan(grad)):
        raise NumericalError("NaN in gradient passed to adam_step")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=t)


def save_checkpoint(net: Network, path: str | Path) -> None:
    """JSON with a versioned header, layer sizes and flattened parameters."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "activation": "tanh",
        "params": [float(p) for p in flatten(net)],
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_checkpoint(path: str | Path) -> Network:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a network checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {payload.get('version')}")
    return unflatten(payload["layer_sizes"], np.array(payload["params"], dtype=float))
