"""Pseudo-BMA model averaging of linear embedding models.

Every ensemble member shares one lift ``g``. Members are scored by their
summed log predictive density on a held-out partition, the scores are
turned into softmax weights, and the weighted model keeps four averaged
matrices::

    A_bar  = sum_i w_i A_i          B_bar  = sum_i w_i B_i
    CA_bar = sum_i w_i C_i A_i      CB_bar = sum_i w_i C_i B_i

Note that ``CA_bar`` averages the products ``C_i A_i``; it is not
``(sum w_i C_i)(sum w_i A_i)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .dynamics import HELDOUT
from .edmd import LinearEmbeddingModel, fit_model, fit_noise
from .errors import ConfigError, DivergedError
from .training import TrainConfig, TrainReport, train_base_model

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelEnsemble:
    lift: object
    members: List[LinearEmbeddingModel]
    partitions: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        for m in self.members:
            if m.n_lift != self.lift.n_lift:
                raise ValueError("member dimension does not match the lift")

    def __len__(self):
        return len(self.members)


@dataclass
class WeightedModel:
    A_bar: np.ndarray
    B_bar: np.ndarray
    CA_bar: np.ndarray
    CB_bar: np.ndarray
    w: np.ndarray

    @property
    def n(self):
        return self.CA_bar.shape[0]

    @property
    def n_lift(self):
        return self.A_bar.shape[0]

    @property
    def p(self):
        return self.B_bar.shape[1]


def as_weighted(model: LinearEmbeddingModel) -> WeightedModel:
    """View a single model as a one-member weighted model."""
    return build_weighted_model([model], [1.0])


def log_predictive_density(member: LinearEmbeddingModel, lift, x, u, y, space="state"):
    """Gaussian log density of the observed successor under ``member``.

    ``space="state"`` scores ``y`` against ``C (A g(x) + B u)`` with the
    diagonal variances ``sigma_x``; ``space="latent"`` scores ``g(y)``
    against ``A g(x) + B u`` with ``sigma_z``. Works per sample or on
    batches (returns one value per row).
    """
    if member.noise is None:
        raise ValueError("member has no noise model; call fit_noise first")
    x = np.asarray(x, dtype=float)
    z = lift.lift(np.atleast_2d(x))
    zp = member.latent_step(z, np.asarray(u, dtype=float).reshape(len(z), -1))
    if space == "state":
        r = np.atleast_2d(y) - zp @ member.C.T
        var = member.noise.sigma_x
    elif space == "latent":
        r = lift.lift(np.atleast_2d(y)) - zp
        var = member.noise.sigma_z
    else:
        raise ValueError(f"unknown space {space!r}")
    ll = -0.5 * (r.shape[1] * LOG_2PI + np.sum(np.log(var)) + np.sum(r * r / var, axis=1))
    return float(ll[0]) if x.ndim == 1 else ll


def elpd(member, lift, heldout, space="state") -> float:
    """Summed held-out log predictive density of one member."""
    if len(heldout.X) == 0:
        raise ValueError("held-out partition is empty")
    ll = log_predictive_density(member, lift, heldout.X, heldout.U, heldout.Y, space)
    return math.fsum(ll.tolist())


def pseudo_bma_weights(elpds) -> np.ndarray:
    """Softmax of the elpd scores, computed after subtracting the maximum."""
    e = np.asarray(elpds, dtype=float)
    if e.ndim != 1 or e.size == 0:
        raise ValueError("need a nonempty vector of elpd values")
    if not np.all(np.isfinite(e)):
        raise ValueError("elpd values must be finite")
    ex = np.exp(e - e.max())
    return ex / math.fsum(ex.tolist())


def build_weighted_model(ensemble, w) -> WeightedModel:
    """Combine members into the four averaged matrices."""
    members = ensemble.members if isinstance(ensemble, ModelEnsemble) else list(ensemble)
    w = np.asarray(w, dtype=float)
    if w.shape != (len(members),):
        raise ValueError(f"weight vector has shape {w.shape}, expected ({len(members)},)")
    shapes = {(m.A.shape, m.B.shape, m.C.shape) for m in members}
    if len(shapes) != 1:
        raise ValueError("ensemble members have inconsistent dimensions")
    A_bar = sum(wi * m.A for wi, m in zip(w, members))
    B_bar = sum(wi * m.B for wi, m in zip(w, members))
    CA_bar = sum(wi * (m.C @ m.A) for wi, m in zip(w, members))
    CB_bar = sum(wi * (m.C @ m.B) for wi, m in zip(w, members))
    return WeightedModel(A_bar, B_bar, CA_bar, CB_bar, w.copy())


def advance_latent(wm: WeightedModel, z, u):
    return wm.A_bar @ np.asarray(z, dtype=float) + wm.B_bar @ np.atleast_1d(np.asarray(u, dtype=float))


def predict_state(wm: WeightedModel, z, u):
    return wm.CA_bar @ np.asarray(z, dtype=float) + wm.CB_bar @ np.atleast_1d(np.asarray(u, dtype=float))


def rollout(wm: WeightedModel, lift, x0, inputs, re_encode=False) -> np.ndarray:
    """Multi-step prediction from ``x0``; returns states ``x_1 .. x_T``.

    By default the latent state evolves autonomously under ``A_bar`` after
    the initial encoding. With ``re_encode`` every predicted state is lifted
    again before the next step.

    Raises
    ------
    DivergedError
        On the first non-finite prediction.
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1, wm.p)
    if len(inputs) == 0:
        raise ValueError("inputs must be nonempty")
    z = lift.lift(np.asarray(x0, dtype=float))
    out = np.empty((len(inputs), wm.n))
    for k, u in enumerate(inputs):
        out[k] = predict_state(wm, z, u)
        if not np.all(np.isfinite(out[k])):
            raise DivergedError("rollout diverged", step=k + 1)
        z = lift.lift(out[k]) if re_encode else advance_latent(wm, z, u)
    return out


@dataclass
class KmaResult:
    lift: object
    ensemble: ModelEnsemble
    elpds: np.ndarray
    w: np.ndarray
    weighted: WeightedModel
    report: Optional[TrainReport] = None
    n_heldout: int = 0


def member_partitions(labels: Sequence[str]):
    """Training partitions ``D1..DN`` in numeric order; requires ``Da``."""
    if HELDOUT not in labels:
        raise ConfigError("plan", "held-out partition required (Da)")
    parts = sorted((l for l in labels if l != HELDOUT), key=lambda l: int(l[1:]))
    if not parts or parts[0] != "D1":
        raise ConfigError("plan", "base partition D1 required")
    return parts


def run_kma(dataset, config: TrainConfig = None, ridge=0.0, n_members=None, base=None) -> KmaResult:
    """Full KMA pipeline on a partitioned dataset.

    Trains the base model on ``D1`` (or reuses ``base = (lift, model,
    report)``), fits one EDMD member per additional partition with the lift
    frozen, fits per-member noise on each member's own partition, scores all
    members on ``Da`` and averages them.
    """
    config = config or TrainConfig()
    parts = member_partitions(dataset.labels)
    if n_members is not None:
        if not 1 <= n_members <= len(parts):
            raise ConfigError("ensemble.n_members", f"must lie in [1, {len(parts)}]")
        parts = parts[:n_members]
    d1 = dataset.select("D1")
    if base is None:
        lift, model, report = train_base_model(d1, config)
    else:
        lift, model, report = base
    members = [model.with_noise(fit_noise(model, lift, d1))]
    for label in parts[1:]:
        members.append(fit_model(lift, dataset.select(label), ridge, fit_c=True))
    ensemble = ModelEnsemble(lift, members, parts)
    heldout = dataset.select(HELDOUT)
    elpds = np.array([elpd(m, lift, heldout) for m in members])
    w = pseudo_bma_weights(elpds)
    log.info("elpd %s -> weights %s", np.array2string(elpds, precision=4), np.array2string(w, precision=4))
    return KmaResult(lift, ensemble, elpds, w, build_weighted_model(ensemble, w), report, len(heldout))
