"""End-to-end experiment steps shared by the CLI and the acceptance tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from ..averaging import KmaResult, as_weighted, rollout, run_kma
from ..control import MpcController, closed_loop, design_lqr
from ..dynamics import HELDOUT, generate_dataset, simulate
from ..edmd import MonomialFeatures, fit_model
from ..training import train_base_model
from .config import ExperimentConfig

log = logging.getLogger(__name__)

EVAL_STREAM = 7777


@dataclass
class Metrics:
    rmse_per_step: List[float]
    total_rmse: float
    validation_loss: Optional[float] = None
    elpds: Optional[List[float]] = None
    weights: Optional[List[float]] = None

    def to_dict(self):
        return {
            "rmse_per_step": self.rmse_per_step,
            "total_rmse": self.total_rmse,
            "validation_loss": self.validation_loss,
            "elpds": self.elpds,
            "weights": self.weights,
        }


def gen_data(cfg: ExperimentConfig):
    return generate_dataset(cfg.system, cfg.plan, cfg.seed, cfg.ic_range, cfg.u_range)


def run(cfg: ExperimentConfig, dataset) -> KmaResult:
    return run_kma(dataset, cfg.train, cfg.ridge, cfg.n_members)


@dataclass
class Baselines:
    edmd_lift: MonomialFeatures
    edmd_model: object
    nn_lift: object
    nn_model: object
    nn_report: object = None


def train_baselines(cfg: ExperimentConfig, dataset) -> Baselines:
    """EDMD on a monomial dictionary and a single jointly trained model, both on all data."""
    lift = MonomialFeatures(cfg.system.n, cfg.edmd_degree)
    edmd_model = fit_model(lift, dataset, cfg.ridge, fit_c=True)
    nn_lift, nn_model, report = train_base_model(dataset, cfg.train)
    return Baselines(lift, edmd_model, nn_lift, nn_model, report)


def evaluation_set(cfg: ExperimentConfig, n_ics=None, steps=None):
    """Fresh initial conditions and input sequences for prediction tests."""
    ev = cfg.evaluate
    n_ics = int(ev.get("n_ics", 10) if n_ics is None else n_ics)
    steps = int(ev.get("steps", 50) if steps is None else steps)
    rng = np.random.default_rng([cfg.seed, EVAL_STREAM])
    ic_range = float(ev.get("ic_range", cfg.ic_range))
    u_range = float(ev.get("u_range", cfg.u_range))
    x0s = rng.uniform(-ic_range, ic_range, size=(n_ics, cfg.system.n))
    inputs = rng.uniform(-u_range, u_range, size=(n_ics, steps, cfg.system.p))
    return x0s, inputs


def rmse_metrics(system, predictor, lift, x0s, inputs) -> Metrics:
    """RMSE of multi-step predictions against the true plant, per step and overall."""
    sq = []
    for x0, U in zip(x0s, inputs):
        truth = simulate(system, x0, U).states[1:]
        pred = rollout(predictor, lift, x0, U)
        sq.append(np.mean((pred - truth) ** 2, axis=1))
    sq = np.array(sq)
    return Metrics(np.sqrt(sq.mean(axis=0)).tolist(), float(np.sqrt(sq.mean())))


def evaluate_models(cfg: ExperimentConfig, predictors: Dict[str, tuple]) -> Dict[str, Metrics]:
    """``predictors`` maps a name to ``(model, lift)``; models may be linear or weighted."""
    x0s, inputs = evaluation_set(cfg)
    out = {}
    for name, (model, lift) in predictors.items():
        wm = model if hasattr(model, "CA_bar") else as_weighted(model)
        out[name] = rmse_metrics(cfg.system, wm, lift, x0s, inputs)
        log.info("%s: total RMSE %.4g", name, out[name].total_rmse)
    return out


def lqr_experiment(cfg: ExperimentConfig, wm, lift, x0=None, steps=None):
    ctrl = design_lqr(wm, lift, cfg.lqr.Q_x, cfg.lqr.R, cfg.lqr.tol, cfg.lqr.max_iter)
    x0 = cfg.lqr.x0 if x0 is None else x0
    return ctrl, closed_loop(cfg.system, ctrl, x0, cfg.lqr.steps if steps is None else steps)


def mpc_experiment(cfg: ExperimentConfig, wm, lift, x0=None, steps=None):
    ctrl = MpcController(wm, lift, cfg.mpc.spec)
    x0 = cfg.mpc.x0 if x0 is None else x0
    return ctrl, closed_loop(cfg.system, ctrl, x0, cfg.mpc.steps if steps is None else steps)


def heldout_size(dataset):
    return int(np.count_nonzero(dataset.partition == HELDOUT))
