"""Least-squares identification of linear embedding models on lifted data."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from .errors import RankDeficientWarning
from .features import FeatureMap

VAR_FLOOR = 1e-12
RCOND = 1e-10


def least_squares(Phi, Y, ridge=0.0, rcond=RCOND):
    """Minimize ``||Y - Phi W||_F^2 + ridge ||W||_F^2`` through an SVD.

    Singular values below ``rcond * s_max`` are discarded, which yields the
    minimum-norm solution for rank-deficient designs. A
    :class:`RankDeficientWarning` is emitted in that case.

    Parameters
    ----------
    Phi : array_like, shape (m, d)
    Y : array_like, shape (m, q) or (m,)
    ridge : float
        Tikhonov weight, ``>= 0``.

    Returns
    -------
    np.ndarray, shape (d, q) or (d,)
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Phi.shape[0] < 1:
        raise ValueError("least_squares needs at least one row")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    d = Phi.shape[1]
    U, s, Vt = np.linalg.svd(Phi, full_matrices=False)
    smax = s[0] if s.size else 0.0
    keep = s > rcond * smax if smax > 0 else np.zeros_like(s, dtype=bool)
    rank = int(np.count_nonzero(keep))
    if rank < d:
        warnings.warn(
            f"design matrix is rank deficient (rank {rank} < {d}); returning minimum-norm fit",
            RankDeficientWarning,
            stacklevel=2,
        )
    s_inv = np.zeros_like(s)
    s_inv[keep] = s[keep] / (s[keep] ** 2 + ridge)
    W = Vt.T @ (s_inv[:, None] * (U.T @ Y.reshape(len(Y), -1)))
    return W[:, 0] if Y.ndim == 1 else W


class MonomialFeatures:
    """Fixed polynomial dictionary: state, constant, then degree 2..max_degree.

    ``(a, b)`` with ``max_degree=2`` lifts to ``(a, b, 1, a^2, ab, b^2)``.
    """

    def __init__(self, n, max_degree=2):
        if max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        self.n = int(n)
        self.max_degree = int(max_degree)
        self._terms = [
            c for d in range(2, self.max_degree + 1) for c in combinations_with_replacement(range(self.n), d)
        ]

    @property
    def n_lift(self):
        return self.n + 1 + len(self._terms)

    def lift(self, x):
        return monomial_features(x, self.max_degree, self._terms)

    def __eq__(self, other):
        return isinstance(other, MonomialFeatures) and (self.n, self.max_degree) == (other.n, other.max_degree)

    def to_dict(self):
        return {"kind": "monomials", "n": self.n, "max_degree": self.max_degree}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n"], d["max_degree"])


def monomial_features(x, max_degree=2, terms=None):
    """Graded-lexicographic monomials of ``x`` (single state or batch)."""
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    if terms is None:
        if max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        terms = [
            c for d in range(2, max_degree + 1) for c in combinations_with_replacement(range(X.shape[1]), d)
        ]
    cols = [X, np.ones((len(X), 1))]
    cols += [np.prod(X[:, list(t)], axis=1, keepdims=True) for t in terms]
    Z = np.concatenate(cols, axis=1)
    return Z[0] if x.ndim == 1 else Z


def lift_from_dict(d):
    if d.get("kind", "mlp") == "monomials":
        return MonomialFeatures.from_dict(d)
    return FeatureMap.from_dict(d)


@dataclass
class GaussianNoiseModel:
    """Diagonal Gaussian residual model; fields hold variances."""

    sigma_x: np.ndarray
    sigma_z: np.ndarray


@dataclass
class LinearEmbeddingModel:
    """``z+ = A z + B u`` in the lifted space, ``x+ = C z+`` in state space."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    noise: Optional[GaussianNoiseModel] = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(self.A.shape[0], -1)
        self.C = np.asarray(self.C, dtype=float).reshape(-1, self.A.shape[0])
        if self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")

    @property
    def n_lift(self):
        return self.A.shape[0]

    @property
    def n(self):
        return self.C.shape[0]

    @property
    def p(self):
        return self.B.shape[1]

    def latent_step(self, z, u):
        return np.asarray(z) @ self.A.T + np.asarray(u) @ self.B.T

    def predict(self, z, u):
        return self.latent_step(z, u) @ self.C.T

    def with_noise(self, noise):
        return replace(self, noise=noise)


def _regressors(lift, data):
    Gx = lift.lift(data.X)
    Gy = lift.lift(data.Y)
    U = np.asarray(data.U, dtype=float).reshape(len(Gx), -1)
    return Gx, U, Gy


def fit_dynamics(lift, data, ridge=0.0):
    """EDMD with inputs: ``[A B] = argmin sum ||g(y) - [A B][g(x); u]||^2``.

    ``data`` is anything with ``X``, ``U`` and ``Y`` sample arrays.
    """
    if len(data.X) == 0:
        raise ValueError("fit_dynamics needs at least one sample")
    Gx, U, Gy = _regressors(lift, data)
    W = least_squares(np.hstack([Gx, U]), Gy, ridge)
    n_lift = Gx.shape[1]
    return W[:n_lift].T.copy(), W[n_lift:].T.copy()


def fit_decoder(lift, data, ridge=0.0):
    """Linear decoder ``C = argmin sum ||x - C g(x)||^2``."""
    if len(data.X) == 0:
        raise ValueError("fit_decoder needs at least one sample")
    X = np.asarray(data.X, dtype=float)
    return least_squares(lift.lift(X), X, ridge).T.copy()


def identity_decoder(n, n_lift):
    """``C = [I_n 0]`` for lifts whose first ``n`` coordinates are the state."""
    return np.eye(n, n_lift)


def fit_noise(model: LinearEmbeddingModel, lift, data, var_floor=VAR_FLOOR) -> GaussianNoiseModel:
    """Maximum-likelihood diagonal variances of the one-step residuals."""
    if len(data.X) < 2:
        raise ValueError("fit_noise needs at least two samples")
    Gx, U, Gy = _regressors(lift, data)
    Zp = model.latent_step(Gx, U)
    rx = np.asarray(data.Y, dtype=float) - Zp @ model.C.T
    rz = Gy - Zp
    return GaussianNoiseModel(
        np.maximum(np.mean(rx**2, axis=0), var_floor),
        np.maximum(np.mean(rz**2, axis=0), var_floor),
    )


def fit_model(lift, data, ridge=0.0, fit_c=True) -> LinearEmbeddingModel:
    """Fit ``(A, B, C)`` and the noise model on one data subset."""
    A, B = fit_dynamics(lift, data, ridge)
    if fit_c:
        C = fit_decoder(lift, data, ridge)
    else:
        C = identity_decoder(data.X.shape[1], A.shape[0])
    model = LinearEmbeddingModel(A, B, C)
    return model.with_noise(fit_noise(model, lift, data))
