"""Benchmark plants, time discretization and randomized data generation.

All right-hand sides accept batched arrays: ``x`` has shape ``(..., n)`` and
``u`` has shape ``(..., p)``. Batched and single-sample evaluation are
elementwise identical, which is what makes ``y == euler_step(x, u)`` hold
bitwise for every generated sample.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, DivergedError

log = logging.getLogger(__name__)

RhsFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

CARTPOLE_DEFAULTS = {"m": 1.0, "M": 5.0, "L": 2.0, "g": -10.0, "delta": 1.0}

# Label -> (number of trajectories, steps per trajectory).
DEFAULT_PLAN: Dict[str, Tuple[int, int]] = {
    "D1": (300, 50),
    "D2": (100, 50),
    "D3": (100, 50),
    "D4": (100, 50),
    "D5": (100, 50),
    "Da": (50, 20),
}
HELDOUT = "Da"


def duffing_rhs(x, u):
    """Forced Duffing oscillator, ``x = (position, velocity)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x1 = x[..., 0]
    x2 = x[..., 1]
    return np.stack([x2, -0.5 * x2 + x1 - 4.0 * x1**3 + u[..., 0]], axis=-1)


def cartpole_rhs(x, u, params: Optional[Mapping[str, float]] = None):
    """Cart-pole with viscous cart friction.

    State is ``(cart position, cart velocity, angle, angular velocity)``.
    With the default ``g = -10`` the origin is the hanging equilibrium.

    Raises
    ------
    ZeroDivisionError
        If the mass-matrix denominator vanishes (custom parameters only).
    """
    prm = dict(CARTPOLE_DEFAULTS)
    if params:
        prm.update(params)
    m, M, L, g, d = prm["m"], prm["M"], prm["L"], prm["g"], prm["delta"]
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)[..., 0]
    x2, x3, x4 = x[..., 1], x[..., 2], x[..., 3]
    s = np.sin(x3)
    c = np.cos(x3)
    den = m * L * L * (M + m * (1.0 - c**2))
    if np.any(den == 0.0):
        raise ZeroDivisionError("cartpole: degenerate denominator m L^2 (M + m sin^2)")
    a = m * L * x4**2 * s - d * x2
    dx2 = (-(m**2) * L**2 * g * c * s + m * L**2 * a + m * L**2 * u) / den
    dx4 = ((m + M) * m * g * L * s - m * L * c * a + m * L * c * u) / den
    return np.stack([x2, dx2, x4, dx4], axis=-1)


def euler_step(rhs: RhsFn, x, u, dt: float):
    """One explicit Euler step ``x + dt * rhs(x, u)``."""
    x = np.asarray(x, dtype=float)
    return x + dt * rhs(x, u)


def rk4_step(rhs: RhsFn, x, u, dt: float):
    """Classical fourth-order Runge-Kutta step with zero-order-hold input."""
    x = np.asarray(x, dtype=float)
    k1 = rhs(x, u)
    k2 = rhs(x + 0.5 * dt * k1, u)
    k3 = rhs(x + 0.5 * dt * k2, u)
    k4 = rhs(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass(frozen=True)
class SystemSpec:
    """A discrete-time plant obtained by sampling an ODE with period ``dt``.

    ``custom_rhs`` is only used when ``name == "custom"``; it is not
    serialized.
    """

    name: str
    n: int
    p: int
    dt: float = 0.01
    params: Mapping[str, float] = field(default_factory=dict)
    integrator: str = "euler"
    custom_rhs: Optional[RhsFn] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("system.dt", f"must be positive, got {self.dt}")
        if self.integrator not in ("euler", "rk4"):
            raise ConfigError("system.integrator", f"unknown integrator {self.integrator!r}")
        fixed = {"duffing": (2, 1), "cartpole": (4, 1)}
        if self.name in fixed:
            if (self.n, self.p) != fixed[self.name]:
                raise ConfigError("system.n", f"{self.name} has (n, p) = {fixed[self.name]}")
        elif self.name == "custom":
            if self.custom_rhs is None:
                raise ConfigError("system.name", "custom system requires custom_rhs")
        else:
            raise ConfigError("system.name", f"unknown system {self.name!r}")

    def rhs(self, x, u):
        if self.name == "duffing":
            return duffing_rhs(x, u)
        if self.name == "cartpole":
            return cartpole_rhs(x, u, self.params)
        return self.custom_rhs(x, u)

    def step(self, x, u):
        if self.integrator == "rk4":
            return rk4_step(self.rhs, x, u, self.dt)
        return euler_step(self.rhs, x, u, self.dt)

    def to_dict(self):
        return {
            "name": self.name,
            "n": self.n,
            "p": self.p,
            "dt": self.dt,
            "params": dict(self.params),
            "integrator": self.integrator,
        }

    @classmethod
    def from_dict(cls, d):
        return make_system(
            d["name"], dt=d.get("dt", 0.01), params=d.get("params"), integrator=d.get("integrator", "euler")
        )


def make_system(name: str, dt: float = 0.01, params=None, integrator: str = "euler") -> SystemSpec:
    """Build one of the named benchmark systems."""
    if name == "duffing":
        return SystemSpec("duffing", 2, 1, dt, {}, integrator)
    if name == "cartpole":
        prm = dict(CARTPOLE_DEFAULTS)
        prm.update(params or {})
        return SystemSpec("cartpole", 4, 1, dt, prm, integrator)
    raise ConfigError("system.name", f"unknown system {name!r} (expected duffing or cartpole)")


@dataclass
class Trajectory:
    states: np.ndarray  # (T + 1, n)
    inputs: np.ndarray  # (T, p)

    def __post_init__(self):
        if len(self.states) != len(self.inputs) + 1:
            raise ValueError("states must have exactly one more row than inputs")

    def __len__(self):
        return len(self.inputs)


def simulate(system: SystemSpec, x0, inputs) -> Trajectory:
    """Roll the plant forward under a zero-order-hold input sequence.

    Raises
    ------
    DivergedError
        If a non-finite state is produced; ``err.step`` is the offending index.
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1, system.p)
    if len(inputs) == 0:
        raise ValueError("inputs must be nonempty")
    states = np.empty((len(inputs) + 1, system.n))
    states[0] = np.asarray(x0, dtype=float)
    for k, u in enumerate(inputs):
        states[k + 1] = system.step(states[k], u)
        if not np.all(np.isfinite(states[k + 1])):
            raise DivergedError(f"{system.name} simulation diverged", step=k + 1)
    return Trajectory(states, inputs)


@dataclass
class Dataset:
    """Flat table of transition samples ``(x, u, y)`` with partition labels.

    Rows are grouped by trajectory and ordered by step, so consecutive rows
    of one trajectory satisfy ``Y[i] == X[i + 1]``.
    """

    system: SystemSpec
    X: np.ndarray
    U: np.ndarray
    Y: np.ndarray
    partition: np.ndarray  # str labels
    traj_id: np.ndarray
    step: np.ndarray
    seed: Optional[int] = None
    plan: Optional[Dict[str, Tuple[int, int]]] = None

    def __len__(self):
        return len(self.X)

    @property
    def labels(self):
        """Partition labels in order of first appearance."""
        _, idx = np.unique(self.partition, return_index=True)
        return [str(self.partition[i]) for i in sorted(idx)]

    def select(self, *labels) -> "Dataset":
        mask = np.isin(self.partition, list(labels))
        return self.take(mask)

    def take(self, index) -> "Dataset":
        return Dataset(
            self.system,
            self.X[index],
            self.U[index],
            self.Y[index],
            self.partition[index],
            self.traj_id[index],
            self.step[index],
            self.seed,
            self.plan,
        )

    def trajectory_ids(self):
        _, idx = np.unique(self.traj_id, return_index=True)
        return self.traj_id[np.sort(idx)]


def partition_seed(label: str) -> int:
    """Fixed stream offset for a partition label: ``Di -> i``, ``Da -> 0``."""
    if label == HELDOUT:
        return 0
    if label.startswith("D") and label[1:].isdigit() and int(label[1:]) >= 1:
        return int(label[1:])
    raise ConfigError("plan", f"partition labels must be D1..DN or Da, got {label!r}")


def sample_trajectories(system, n_traj, traj_len, rng, ic_range=3.0, u_range=2.5):
    """Draw random ICs and inputs and simulate ``n_traj`` trajectories at once.

    Returns states ``(n_traj, traj_len + 1, n)`` and inputs
    ``(n_traj, traj_len, p)``.
    """
    x0 = rng.uniform(-ic_range, ic_range, size=(n_traj, system.n))
    inputs = rng.uniform(-u_range, u_range, size=(n_traj, traj_len, system.p))
    states = np.empty((n_traj, traj_len + 1, system.n))
    states[:, 0] = x0
    for k in range(traj_len):
        states[:, k + 1] = system.step(states[:, k], inputs[:, k])
    bad = ~np.all(np.isfinite(states), axis=(1, 2))
    if np.any(bad):
        k = int(np.argmax(~np.all(np.isfinite(states[bad][0]), axis=1)))
        raise DivergedError(f"{system.name} data generation diverged", step=k)
    return states, inputs


def generate_dataset(
    system: SystemSpec,
    plan: Optional[Mapping[str, Tuple[int, int]]] = None,
    seed: int = 0,
    ic_range: float = 3.0,
    u_range: float = 2.5,
) -> Dataset:
    """Generate a partitioned dataset of random trajectories.

    Each partition draws from its own generator seeded by ``[seed, offset]``
    so partitions are independent streams and adding a partition does not
    perturb the others. Initial conditions are ``Uniform[-ic_range,
    ic_range]^n`` and every input sample is ``Uniform[-u_range, u_range]``,
    redrawn per step and per trajectory.
    """
    plan = dict(DEFAULT_PLAN if plan is None else plan)
    X, U, Y, part, tid, stp = [], [], [], [], [], []
    next_id = 0
    for label, (n_traj, traj_len) in plan.items():
        rng = np.random.default_rng([seed, partition_seed(label)])
        states, inputs = sample_trajectories(system, n_traj, traj_len, rng, ic_range, u_range)
        X.append(states[:, :-1].reshape(-1, system.n))
        Y.append(states[:, 1:].reshape(-1, system.n))
        U.append(inputs.reshape(-1, system.p))
        part.append(np.full(n_traj * traj_len, label))
        tid.append(np.repeat(np.arange(next_id, next_id + n_traj), traj_len))
        stp.append(np.tile(np.arange(traj_len), n_traj))
        next_id += n_traj
    log.info("generated %d samples over %d partitions", sum(len(a) for a in X), len(plan))
    return Dataset(
        system,
        np.concatenate(X),
        np.concatenate(U),
        np.concatenate(Y),
        np.concatenate(part).astype(str),
        np.concatenate(tid),
        np.concatenate(stp),
        seed,
        plan,
    )
