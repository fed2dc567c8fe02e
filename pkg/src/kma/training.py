"""Joint training of the lift and the embedding matrices.

The objective for a batch of transitions ``(x_i, u_i, y_i)`` is::

    sum_i  lambda1 * ||A g(x_i) + B u_i - g(y_i)||^2
         + lambda2 * ||C (A g(x_i) + B u_i) - y_i||^2

Reported train/validation losses are this sum divided by the number of
samples.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence

import numpy as np

from .edmd import LinearEmbeddingModel, fit_decoder, fit_dynamics, identity_decoder
from .errors import ConfigError, DivergedError
from .features import FeatureMap, feature_backward, feature_forward, init_features

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr: float = 1e-3
    epochs: int = 2000
    batch_size: int = 256
    optimizer: str = "adam"
    seed: int = 0
    val_fraction: float = 0.1
    fix_decoder: bool = True
    n_extra: int = 1
    hidden_sizes: Sequence[int] = (10,)
    activation: str = "tanh"

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.lambda1 < 0 or self.lambda2 < 0 or (self.lambda1 == 0 and self.lambda2 == 0):
            raise ConfigError("train.lambda1", "loss weights must be >= 0 and not both zero")
        if not self.lr > 0:
            raise ConfigError("train.lr", "must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("train.optimizer", f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("train.val_fraction", "must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs", "epochs and batch_size must be >= 1")


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    best_val_loss: float = float("inf")
    best_epoch: int = -1
    wall_time: float = 0.0

    def best_so_far(self):
        return np.minimum.accumulate(self.val_loss).tolist()


class LossGradients(NamedTuple):
    theta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray


def _residuals(fm, A, B, C, X, U, Y):
    Gx = feature_forward(fm, np.atleast_2d(X))
    Gy = feature_forward(fm, np.atleast_2d(Y))
    U = np.asarray(U, dtype=float).reshape(len(Gx), -1)
    P = Gx @ A.T + U @ B.T
    return Gx, Gy, U, P, P - Gy, P @ C.T - np.atleast_2d(Y)


def problem1_loss(fm: FeatureMap, A, B, C, batch, lambda1=1.0, lambda2=1.0) -> float:
    """Summed joint loss over ``batch`` (an object with ``X``, ``U``, ``Y``)."""
    *_, r1, r2 = _residuals(fm, A, B, C, batch.X, batch.U, batch.Y)
    return float(lambda1 * np.sum(r1 * r1) + lambda2 * np.sum(r2 * r2))


def loss_gradients(fm: FeatureMap, A, B, C, batch, lambda1=1.0, lambda2=1.0):
    """Loss and its exact gradients with respect to ``(theta, A, B, C)``.

    Both ``g(x_i)`` and ``g(y_i)`` depend on ``theta`` and both paths are
    back-propagated.
    """
    Gx, Gy, U, P, r1, r2 = _residuals(fm, A, B, C, batch.X, batch.U, batch.Y)
    loss = float(lambda1 * np.sum(r1 * r1) + lambda2 * np.sum(r2 * r2))
    dP = 2.0 * lambda1 * r1 + 2.0 * lambda2 * (r2 @ C)
    dA = dP.T @ Gx
    dB = dP.T @ U
    dC = 2.0 * lambda2 * (r2.T @ P)
    d_theta = (
        feature_backward(fm, batch.X, dP @ A).d_theta
        + feature_backward(fm, batch.Y, -2.0 * lambda1 * r1).d_theta
    )
    return loss, LossGradients(d_theta, dA, dB, dC)


class _Batch(NamedTuple):
    X: np.ndarray
    U: np.ndarray
    Y: np.ndarray


class Adam:
    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, size, lr=1e-3):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


def validation_split(data, val_fraction=0.1):
    """Split by trajectory: the last ``val_fraction`` of trajectories validate.

    Falls back to the last samples if the data holds a single trajectory.
    """
    ids = data.trajectory_ids()
    if len(ids) >= 2:
        n_val = min(len(ids) - 1, max(1, int(round(val_fraction * len(ids)))))
        val_mask = np.isin(data.traj_id, ids[-n_val:])
    else:
        n_val = min(len(data) - 1, max(1, int(round(val_fraction * len(data)))))
        val_mask = np.zeros(len(data), dtype=bool)
        val_mask[len(data) - n_val:] = True
    return data.take(~val_mask), data.take(val_mask)


class _Packer:
    """Flat vector <-> (theta, A, B, C) with an optionally frozen decoder."""

    def __init__(self, fm, A, B, C, fix_decoder):
        self.fm = fm
        self.shapes = [A.shape, B.shape] + ([] if fix_decoder else [C.shape])
        self.C_fixed = C if fix_decoder else None

    def pack(self, theta, A, B, C):
        parts = [theta, A.ravel(), B.ravel()]
        if self.C_fixed is None:
            parts.append(C.ravel())
        return np.concatenate(parts)

    def unpack(self, vec):
        k = self.fm.n_params
        theta = vec[:k]
        mats = []
        for shape in self.shapes:
            size = shape[0] * shape[1]
            mats.append(vec[k:k + size].reshape(shape))
            k += size
        C = self.C_fixed if self.C_fixed is not None else mats[2]
        return self.fm.with_params(theta), mats[0], mats[1], C

    def grad(self, g: LossGradients):
        return self.pack(g.theta, g.A, g.B, g.C)


def train_base_model(data, config: TrainConfig = None, fm: FeatureMap = None):
    """Train the lift and ``(A, B, C)`` jointly on one data partition.

    The lift is initialized from ``config.seed`` (unless ``fm`` is given) and
    ``(A, B)`` (and ``C`` when it is learned) are warm-started by least
    squares on the initial lift. Minibatches are reshuffled every epoch and
    the parameters with the lowest validation loss are returned.

    Returns
    -------
    fm : FeatureMap
    model : LinearEmbeddingModel
        Without a noise model.
    report : TrainReport

    Raises
    ------
    DivergedError
        If the loss becomes non-finite.
    """
    config = config or TrainConfig()
    if len(data) == 0:
        raise ValueError("training partition is empty")
    t0 = time.perf_counter()
    n = data.X.shape[1]
    if fm is None:
        fm = init_features(n, config.n_extra, config.hidden_sizes, config.activation, config.seed)
    train, val = validation_split(data, config.val_fraction)

    A, B = fit_dynamics(fm, train)
    C = identity_decoder(n, fm.n_lift) if config.fix_decoder else fit_decoder(fm, train)
    packer = _Packer(fm, A, B, C, config.fix_decoder)
    vec = packer.pack(fm.params(), A, B, C)
    opt_cls = Adam if config.optimizer == "adam" else SGD
    opt = opt_cls(vec.size, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    lam = (config.lambda1, config.lambda2)

    def mean_loss(v, part):
        return problem1_loss(*packer.unpack(v), part, *lam) / len(part)

    report = TrainReport()
    best = vec.copy()
    m = len(train)
    for epoch in range(config.epochs):
        order = rng.permutation(m)
        for start in range(0, m, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = _Batch(train.X[idx], train.U[idx], train.Y[idx])
            _, g = loss_gradients(*packer.unpack(vec), batch, *lam)
            vec = opt.step(vec, packer.grad(g) / len(idx))
        tr = mean_loss(vec, train)
        va = mean_loss(vec, val)
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise DivergedError(f"training diverged in epoch {epoch}", step=epoch)
        report.train_loss.append(tr)
        report.val_loss.append(va)
        if va < report.best_val_loss:
            report.best_val_loss, report.best_epoch = va, epoch
            best = vec.copy()
        if epoch % 100 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d train %.3e val %.3e", epoch, tr, va)
    report.wall_time = time.perf_counter() - t0
    fm, A, B, C = packer.unpack(best)
    return fm, LinearEmbeddingModel(A.copy(), B.copy(), np.array(C, copy=True)), report
