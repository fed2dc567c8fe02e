"""Experiment configuration: TOML in, validated dataclasses out."""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import tomli_w

from ..control import MpcSpec, step_reference
from ..dynamics import DEFAULT_PLAN, HELDOUT, SystemSpec, make_system
from ..errors import ConfigError
from ..training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


BASE_DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "system": {"name": "duffing", "dt": 0.01, "integrator": "euler"},
    "data": {
        "ic_range": 3.0,
        "u_range": 2.5,
        "plan": {k: list(v) for k, v in DEFAULT_PLAN.items()},
    },
    "train": {},
    "ensemble": {"n_members": 5, "ridge": 0.0},
    "baselines": {"edmd_degree": 2},
    "lqr": {"Q_x": [1.0, 1.0], "R": [0.1], "steps": 1000, "x0": [0.5, -0.5]},
    "mpc": {
        "horizon": 20,
        "Q_x": [10.0, 0.0],
        "R": [0.001],
        "u_min": [-10.0],
        "u_max": [10.0],
        "steps": 2000,
        "x0": [0.0, 0.0],
        "preview": False,
        "reference": {"kind": "step", "before": -1.0, "after": 1.0, "t_switch": 10.0},
    },
    "evaluate": {"n_ics": 10, "steps": 50, "ic_range": 3.0, "u_range": 2.5},
}

SYSTEM_OVERRIDES: Dict[str, Dict[str, Any]] = {
    "duffing": {},
    "cartpole": {
        "train": {"n_extra": 4, "hidden_sizes": [10, 10]},
        "lqr": {"Q_x": [1.0, 1.0, 1.0, 1.0], "x0": [0.2, -0.2, 0.2, -0.2]},
        "mpc": {"Q_x": [10.0, 0.0, 0.0, 0.0], "x0": [0.0, 0.0, 0.0, 0.0]},
    },
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "plan":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def default_config_dict(system="duffing") -> Dict[str, Any]:
    if system not in SYSTEM_OVERRIDES:
        raise ConfigError("system.name", f"unknown system {system!r} (expected duffing or cartpole)")
    d = _merge(BASE_DEFAULTS, SYSTEM_OVERRIDES[system])
    d["system"]["name"] = system
    return d


def _weight_matrix(value, size, name):
    a = np.asarray(value, dtype=float)
    if a.ndim == 1:
        a = np.diag(a)
    if a.shape != (size, size):
        raise ConfigError(name, f"expected {size} diagonal entries or a {size}x{size} matrix")
    return a


def _vector(value, size, name):
    a = np.asarray(value, dtype=float).ravel()
    if a.shape != (size,):
        raise ConfigError(name, f"expected {size} entries, got {a.size}")
    return a


@dataclass
class LqrSettings:
    Q_x: np.ndarray
    R: np.ndarray
    steps: int
    x0: np.ndarray
    tol: float = 1e-10
    max_iter: int = 10000


@dataclass
class MpcSettings:
    spec: MpcSpec
    steps: int
    x0: np.ndarray


@dataclass
class ExperimentConfig:
    system: SystemSpec
    plan: Dict[str, Tuple[int, int]]
    train: TrainConfig
    n_members: int
    ridge: float
    lqr: LqrSettings
    mpc: MpcSettings
    seed: int = 0
    ic_range: float = 3.0
    u_range: float = 2.5
    edmd_degree: int = 2
    evaluate: Dict[str, Any] = field(default_factory=dict)
    raw: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentConfig":
        name = d.get("system", {}).get("name", "duffing")
        merged = _merge(default_config_dict(name), d)
        try:
            return cls._build(merged)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("config", str(exc)) from exc

    @classmethod
    def _build(cls, d):
        s = d["system"]
        system = make_system(s["name"], dt=float(s.get("dt", 0.01)), params=s.get("params"),
                             integrator=s.get("integrator", "euler"))
        n, p = system.n, system.p
        seed = int(d["seed"])

        plan = {}
        for label, spec in d["data"]["plan"].items():
            if not (isinstance(spec, (list, tuple)) and len(spec) == 2):
                raise ConfigError(f"data.plan.{label}", "expected [n_trajectories, length]")
            n_traj, length = int(spec[0]), int(spec[1])
            if n_traj < 1 or length < 1:
                raise ConfigError(f"data.plan.{label}", "counts must be >= 1")
            plan[label] = (n_traj, length)
        if "D1" not in plan:
            raise ConfigError("data.plan", "base partition D1 required")
        if HELDOUT not in plan:
            raise ConfigError("data.plan", "held-out partition required (Da)")

        t = dict(d["train"])
        t.setdefault("seed", seed)
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(t) - known
        if unknown:
            raise ConfigError(f"train.{sorted(unknown)[0]}", "unknown field")
        train = TrainConfig(**t)

        e = d["ensemble"]
        n_members = int(e["n_members"])
        n_parts = sum(1 for k in plan if k != HELDOUT)
        if not 1 <= n_members <= n_parts:
            raise ConfigError("ensemble.n_members", f"must lie in [1, {n_parts}] for this plan")

        lq = d["lqr"]
        lqr = LqrSettings(
            _weight_matrix(lq["Q_x"], n, "lqr.Q_x"),
            _weight_matrix(lq["R"], p, "lqr.R"),
            int(lq["steps"]),
            _vector(lq["x0"], n, "lqr.x0"),
            float(lq.get("tol", 1e-10)),
            int(lq.get("max_iter", 10000)),
        )

        m = d["mpc"]
        spec = MpcSpec(
            horizon=int(m["horizon"]),
            Q_x=_weight_matrix(m["Q_x"], n, "mpc.Q_x"),
            R=_weight_matrix(m["R"], p, "mpc.R"),
            u_min=_vector(m["u_min"], p, "mpc.u_min"),
            u_max=_vector(m["u_max"], p, "mpc.u_max"),
            reference=make_reference(m["reference"], n),
            dt=system.dt,
            preview=bool(m.get("preview", False)),
        )
        if spec.horizon < 1:
            raise ConfigError("mpc.horizon", "must be >= 1")
        if not np.all(spec.u_min < spec.u_max):
            raise ConfigError("mpc.u_min", "must be below mpc.u_max")
        mpc = MpcSettings(spec, int(m["steps"]), _vector(m["x0"], n, "mpc.x0"))

        return cls(
            system=system,
            plan=plan,
            train=train,
            n_members=n_members,
            ridge=float(e.get("ridge", 0.0)),
            lqr=lqr,
            mpc=mpc,
            seed=seed,
            ic_range=float(d["data"]["ic_range"]),
            u_range=float(d["data"]["u_range"]),
            edmd_degree=int(d["baselines"]["edmd_degree"]),
            evaluate=dict(d["evaluate"]),
            raw=d,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = copy.deepcopy(self.raw)
        d["seed"] = int(seed)
        d.get("train", {}).pop("seed", None)
        return ExperimentConfig.from_dict(d)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.raw)


def make_reference(d, n):
    """Build ``t -> r`` from a reference table (only ``kind = "step"``)."""
    kind = d.get("kind", "step")
    if kind == "step":
        before, after, t_switch = float(d["before"]), float(d["after"]), float(d["t_switch"])
        return lambda t: step_reference(t, before, after, t_switch, n)
    if kind == "constant":
        value = _vector(d["value"], n, "mpc.reference.value")
        return lambda t: value.copy()
    raise ConfigError("mpc.reference.kind", f"unknown reference kind {kind!r}")


def load_config(path: Optional[Path] = None, system: Optional[str] = None) -> ExperimentConfig:
    """Read a TOML config; with no path, return the defaults for ``system``."""
    if path is None:
        return ExperimentConfig.from_dict(default_config_dict(system or "duffing"))
    with open(path, "rb") as fh:
        try:
            d = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"invalid TOML: {exc}") from exc
    if system is not None:
        d.setdefault("system", {})["name"] = system
    return ExperimentConfig.from_dict(d)
