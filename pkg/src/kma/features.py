"""Learned lifting ``z = g(x) = [x, mlp(x)]`` with exact reverse-mode gradients.

The state is always carried through unchanged as the first ``n`` lifted
coordinates; only the remaining ``n_extra`` coordinates come from the MLP.
Parameters flatten layer by layer as ``W.ravel()`` (row-major, shape
``(fan_out, fan_in)``) followed by ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np

ACTIVATIONS = ("tanh", "relu")


class GradientBundle(NamedTuple):
    d_theta: np.ndarray
    d_input: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class FeatureMap:
    n: int
    n_extra: int
    weights: tuple
    biases: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights:
            if self.weights[0].shape[1] != self.n or self.weights[-1].shape[0] != self.n_extra:
                raise ValueError("layer shapes do not match (n, n_extra)")
        elif self.n_extra:
            raise ValueError("n_extra > 0 requires at least one layer")
        for W in self.weights:
            W.setflags(write=False)
        for b in self.biases:
            b.setflags(write=False)

    @property
    def n_lift(self) -> int:
        return self.n + self.n_extra

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def hidden_sizes(self) -> List[int]:
        return [W.shape[0] for W in self.weights[:-1]]

    def params(self) -> np.ndarray:
        """Flattened parameter vector."""
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_params(self, theta) -> "FeatureMap":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        weights, biases, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            weights.append(theta[k:k + W.size].reshape(W.shape).copy())
            k += W.size
            biases.append(theta[k:k + b.size].copy())
            k += b.size
        return FeatureMap(self.n, self.n_extra, tuple(weights), tuple(biases), self.activation)

    def lift(self, x):
        return feature_forward(self, x)

    def __eq__(self, other):
        return (
            isinstance(other, FeatureMap)
            and (self.n, self.n_extra, self.activation) == (other.n, other.n_extra, other.activation)
            and len(self.weights) == len(other.weights)
            and np.array_equal(self.params(), other.params())
        )

    def to_dict(self):
        return {
            "kind": "mlp",
            "n": self.n,
            "n_extra": self.n_extra,
            "activation": self.activation,
            "layers": [
                {"rows": W.shape[0], "cols": W.shape[1], "w": W.ravel().tolist(), "b": b.tolist()}
                for W, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        weights = tuple(
            np.asarray(L["w"], dtype=float).reshape(L["rows"], L["cols"]) for L in d["layers"]
        )
        biases = tuple(np.asarray(L["b"], dtype=float) for L in d["layers"])
        return cls(int(d["n"]), int(d["n_extra"]), weights, biases, d.get("activation", "tanh"))


def init_features(n, n_extra, hidden_sizes=(10,), activation="tanh", seed=0) -> FeatureMap:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    if n_extra == 0:
        return FeatureMap(n, 0, (), (), activation)
    if not hidden_sizes:
        raise ValueError("hidden_sizes must be nonempty")
    rng = np.random.default_rng(seed)
    sizes = [n, *hidden_sizes, n_extra]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return FeatureMap(n, n_extra, tuple(weights), tuple(biases), activation)


def _act(name, h):
    return np.tanh(h) if name == "tanh" else np.maximum(h, 0.0)


def _dact(name, h, a):
    return 1.0 - a * a if name == "tanh" else (h > 0.0).astype(float)


def _mlp_forward(fm: FeatureMap, X):
    """Return the MLP output and the cached (pre, post) activations."""
    cache = []
    a = X
    last = len(fm.weights) - 1
    for i, (W, b) in enumerate(zip(fm.weights, fm.biases)):
        h = a @ W.T + b
        if i < last:
            a_next = _act(fm.activation, h)
            cache.append((a, h, a_next))
            a = a_next
        else:
            cache.append((a, h, h))
            a = h
    return a, cache


def feature_forward(fm: FeatureMap, x):
    """Evaluate the lift on one state ``(n,)`` or a batch ``(m, n)``."""
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    if X.shape[1] != fm.n:
        raise ValueError(f"expected state dimension {fm.n}, got {X.shape[1]}")
    if fm.n_extra:
        out, _ = _mlp_forward(fm, X)
        Z = np.concatenate([X, out], axis=1)
    else:
        Z = X.copy()
    return Z[0] if x.ndim == 1 else Z


def feature_backward(fm: FeatureMap, x, upstream, with_input=False) -> GradientBundle:
    """Gradient of ``sum_i <upstream_i, g(x_i)>`` w.r.t. the flat parameters.

    The identity prefix has no parameters, so only ``upstream[..., n:]``
    reaches ``d_theta``; it does contribute to ``d_input``.
    """
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    G = np.atleast_2d(np.asarray(upstream, dtype=float))
    if G.shape != (X.shape[0], fm.n_lift):
        raise ValueError(f"upstream must have shape {(X.shape[0], fm.n_lift)}, got {G.shape}")
    d_input = G[:, : fm.n].copy() if with_input else None
    if not fm.n_extra:
        d_theta = np.zeros(0)
    else:
        _, cache = _mlp_forward(fm, X)
        delta = G[:, fm.n:]
        grads = []
        last = len(fm.weights) - 1
        for i in range(last, -1, -1):
            a_in, h, a_out = cache[i]
            if i < last:
                delta = delta * _dact(fm.activation, h, a_out)
            grads.append((delta.T @ a_in, delta.sum(axis=0)))
            delta = delta @ fm.weights[i]
        if with_input:
            d_input += delta
        d_theta = np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in reversed(grads)])
    if with_input and x.ndim == 1:
        d_input = d_input[0]
    return GradientBundle(d_theta, d_input)

