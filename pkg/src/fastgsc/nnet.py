"""Minimal fully-connected networks with hand-written backprop.

Every approximator in this package (noise predictor, policy, critic) is a
small tanh MLP with a linear head. The explicit backward pass keeps the
whole gradient path checkable against central finite differences.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class MLP:
    """Feed-forward net: tanh hidden layers, linear output.

    Weights are stored as (fan_in, fan_out) matrices; a batch is a
    (B, fan_in) array.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = weights
        self.biases = biases

    @classmethod
    def create(cls, sizes: Sequence[int], rng: np.random.Generator) -> "MLP":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass keeping the post-activation of every layer."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> list[np.ndarray]:
        """Gradients w.r.t. parameters, ordered [W0, b0, W1, b1, ...].

        ``dout`` is dLoss/d(output), shape (B, out_dim).
        """
        grads: list[np.ndarray] = [np.empty(0)] * (2 * len(self.weights))
        delta = dout
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = acts[i]
            grads[2 * i] = a_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return grads

    # flat parameter vector helpers (checkpointing, finite differences)

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_params(self, flat: np.ndarray) -> None:
        i = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[i : i + w.size].reshape(w.shape)
            i += w.size
            b[...] = flat[i : i + b.size]
            i += b.size
        if i != flat.size:
            raise ValueError(f"parameter vector length {flat.size}, expected {i}")

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    @classmethod
    def from_param_arrays(cls, arrays: dict[str, np.ndarray]) -> "MLP":
        n_layers = len(arrays) // 2
        weights = [np.array(arrays[f"w{i}"], dtype=float) for i in range(n_layers)]
        biases = [np.array(arrays[f"b{i}"], dtype=float) for i in range(n_layers)]
        return cls(weights, biases)


def flatten_grads(grads: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, net: MLP, grads: list[np.ndarray]) -> None:
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            w -= self.lr * grads[2 * i]
            b -= self.lr * grads[2 * i + 1]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, net: MLP, grads: list[np.ndarray]) -> None:
        if self._m is None:
            self._m = [np.zeros_like(g) for g in grads]
            self._v = [np.zeros_like(g) for g in grads]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        params = []
        for w, b in zip(net.weights, net.biases):
            params.extend([w, b])
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def finite_difference_grad(
    f: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        plus = params.copy()
        minus = params.copy()
        plus[i] += eps
        minus[i] -= eps
        grad[i] = (f(plus) - f(minus)) / (2 * eps)
    return grad


def sinusoidal_embedding(t: np.ndarray | int, dim: int) -> np.ndarray:
    """Sinusoidal position embedding of (batched) integer timesteps."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        return emb[0]
    return emb
