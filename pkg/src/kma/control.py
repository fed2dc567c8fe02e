"""LQR and reference-tracking MPC designed on a (weighted) lifted model.

Both controllers read the true plant state, lift it with ``g`` and act on
the lifted linear model ``z+ = A_bar z + B_bar u``. State costs are
specified on the decoded state and pulled back through the decoder.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .averaging import WeightedModel
from .dynamics import SystemSpec
from .errors import DivergedError, NotStabilizableError

log = logging.getLogger(__name__)


def lift_cost(Q_x, C):
    """Pull a state weight back to the lifted space: ``C^T Q_x C``, symmetrized."""
    Q_x = np.atleast_2d(np.asarray(Q_x, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Q_z = C.T @ Q_x @ C
    return 0.5 * (Q_z + Q_z.T)


def dare_residual(A, B, Q, R, P):
    """``||P - (Q + A'PA - A'PB (R + B'PB)^-1 B'PA)||_inf`` (max abs entry)."""
    BtPA = B.T @ P @ A
    rhs = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
    return float(np.max(np.abs(P - rhs)))


def solve_dare(A, B, Q, R, tol=1e-10, max_iter=10000):
    """Stabilizing DARE solution by Riccati fixed-point iteration from ``P = Q``.

    Iterates until the max-abs change drops below ``tol``, or below the
    roundoff level ``64 eps ||P||`` for very large ``P``.

    Raises
    ------
    NotStabilizableError
        If the iteration blows up, stalls for ``max_iter`` steps or leaves a
        residual above ``1e-8 * max(1, ||P||)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for it in range(max_iter):
        BtPA = B.T @ P @ A
        with np.errstate(over="ignore", invalid="ignore"):
            P_next = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise NotStabilizableError(f"Riccati iteration diverged at iteration {it}")
        delta = np.max(np.abs(P_next - P))
        P = P_next
        # absolute tolerance unless roundoff in P makes it unreachable
        if delta <= max(tol, 64 * np.finfo(float).eps * np.max(np.abs(P))):
            break
    else:
        raise NotStabilizableError(f"Riccati iteration did not converge in {max_iter} iterations")
    res = dare_residual(A, B, Q, R, P)
    if res > 1e-8 * max(1.0, np.max(np.abs(P))):
        raise NotStabilizableError(f"DARE residual {res:.3e} too large")
    return P


def spectral_radius(M):
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if M.size else 0.0


@dataclass
class LqrController:
    """State feedback ``u = -K (g(x) - z_eq)``.

    ``z_eq`` is the lifted equilibrium; it defaults to zero, and the learned
    lift of the origin is rarely exactly zero, so with large gains the offset matters.
    """

    K: np.ndarray
    P: np.ndarray
    lift: object = None
    z_eq: Optional[np.ndarray] = None

    def __call__(self, x, t=0.0):
        z = self.lift.lift(np.asarray(x, dtype=float))
        if self.z_eq is not None:
            z = z - self.z_eq
        return -self.K @ z


def lqr_gain(A, B, Q_z, R, lift=None, tol=1e-10, max_iter=10000) -> LqrController:
    """Infinite-horizon discrete LQR gain on the lifted model.

    Raises
    ------
    NotStabilizableError
        If the DARE fails or ``A - B K`` is not Schur stable.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = solve_dare(A, B, Q_z, R, tol, max_iter)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = spectral_radius(A - B @ K)
    if rho >= 1.0:
        raise NotStabilizableError(f"closed-loop spectral radius {rho:.6f} >= 1")
    return LqrController(K, P, lift)


def design_lqr(wm: WeightedModel, lift, Q_x, R, tol=1e-10, max_iter=10000) -> LqrController:
    """LQR on ``(A_bar, B_bar)`` with the state weight pulled back through ``C = [I 0]``.

    The controller regulates ``g(x)`` towards ``g(0)``.

    The weighted model carries no single decoder, so the state weight is
    lifted with the identity-prefix decoder that every supported lift shares.
    """
    C = np.eye(wm.n, wm.n_lift)
    ctrl = lqr_gain(wm.A_bar, wm.B_bar, lift_cost(Q_x, C), R, lift, tol, max_iter)
    ctrl.z_eq = lift.lift(np.zeros(wm.n))
    return ctrl


def step_reference(t, before=-1.0, after=1.0, t_switch=10.0, n=2):
    """Piecewise-constant reference on the first state component."""
    r = np.zeros(n)
    r[0] = before if t <= t_switch else after
    return r


@dataclass
class MpcSpec:
    horizon: int = 20
    Q_x: np.ndarray = None
    R: np.ndarray = None
    u_min: np.ndarray = None
    u_max: np.ndarray = None
    reference: Optional[Callable[[float], np.ndarray]] = None
    dt: float = 0.01
    qp_tol: float = 1e-8
    qp_max_iter: int = 20000
    preview: bool = False

    def resolved(self, n, p):
        """Fill defaults: track the first component with weight 10."""
        Q_x = self.Q_x if self.Q_x is not None else np.diag([10.0] + [0.0] * (n - 1))
        R = self.R if self.R is not None else 1e-3 * np.eye(p)
        u_min = self.u_min if self.u_min is not None else -10.0 * np.ones(p)
        u_max = self.u_max if self.u_max is not None else 10.0 * np.ones(p)
        ref = self.reference if self.reference is not None else (lambda t: np.zeros(n))
        spec = replace(
            self,
            Q_x=np.atleast_2d(np.asarray(Q_x, dtype=float)),
            R=np.atleast_2d(np.asarray(R, dtype=float)),
            u_min=np.asarray(u_min, dtype=float).reshape(p),
            u_max=np.asarray(u_max, dtype=float).reshape(p),
            reference=ref,
        )
        if spec.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not np.all(spec.u_min < spec.u_max):
            raise ValueError("u_min must be below u_max elementwise")
        return spec


def prediction_matrices(wm: WeightedModel, horizon):
    """Condensed output prediction ``Y = Phi z0 + Gamma U`` over the horizon.

    Row block ``k`` (``k = 1..H``) is the decoded state
    ``CA_bar z_{k-1} + CB_bar u_{k-1}`` with ``z_j`` propagated by
    ``A_bar, B_bar``.
    """
    n, p, nz = wm.n, wm.p, wm.n_lift
    H = horizon
    powers = [np.eye(nz)]
    for _ in range(H - 1):
        powers.append(wm.A_bar @ powers[-1])
    Phi = np.zeros((H * n, nz))
    Gamma = np.zeros((H * n, H * p))
    for k in range(1, H + 1):
        rows = slice((k - 1) * n, k * n)
        Phi[rows] = wm.CA_bar @ powers[k - 1]
        Gamma[rows, (k - 1) * p:k * p] = wm.CB_bar
        for j in range(k - 1):
            Gamma[rows, j * p:(j + 1) * p] = wm.CA_bar @ powers[k - 2 - j] @ wm.B_bar
    return Phi, Gamma


def build_mpc_qp(wm: WeightedModel, lift, spec: MpcSpec, z0, t):
    """Condensed QP ``min 1/2 U'HU + f'U`` subject to the input box.

    The cost is ``sum_k (y_k - r_k)' Q_x (y_k - r_k) + u_k' R u_k``. The
    reference is held at ``r(t)`` over the horizon unless ``spec.preview``
    is set, in which case ``r_k = reference(t + k dt)``.

    Returns
    -------
    H_qp, f, lb, ub
    """
    spec = spec.resolved(wm.n, wm.p)
    Phi, Gamma = prediction_matrices(wm, spec.horizon)
    return _qp_from_matrices(Phi, Gamma, spec, z0, t)


def _qp_from_matrices(Phi, Gamma, spec, z0, t, H_qp=None):
    Hn = spec.horizon
    Qb = np.kron(np.eye(Hn), spec.Q_x)
    if H_qp is None:
        Rb = np.kron(np.eye(Hn), spec.R)
        H_qp = 2.0 * (Gamma.T @ Qb @ Gamma + Rb)
        H_qp = 0.5 * (H_qp + H_qp.T)
    if spec.preview:
        r = np.concatenate([np.asarray(spec.reference(t + k * spec.dt), dtype=float) for k in range(1, Hn + 1)])
    else:
        r = np.tile(np.asarray(spec.reference(t), dtype=float), Hn)
    f = 2.0 * Gamma.T @ Qb @ (Phi @ np.asarray(z0, dtype=float) - r)
    return H_qp, f, np.tile(spec.u_min, Hn), np.tile(spec.u_max, Hn)


class QpSolution(NamedTuple):
    x: np.ndarray
    converged: bool
    n_iter: int
    residual: float


def _max_eigenvalue(H, iters=200, rtol=1e-10):
    v = np.ones(H.shape[0]) / np.sqrt(H.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = H @ v
        lam_new = float(np.linalg.norm(w))
        if lam_new == 0.0:
            return 0.0
        v = w / lam_new
        if abs(lam_new - lam) <= rtol * lam_new:
            return lam_new
        lam = lam_new
    return lam


def projected_gradient_residual(H, f, x, lb, ub):
    g = H @ x + f
    return float(np.max(np.abs(x - np.clip(x - g, lb, ub)))) if x.size else 0.0


def solve_box_qp(H_qp, f, u_min, u_max, tol=1e-8, max_iter=20000) -> QpSolution:
    """Minimize ``1/2 x'Hx + f'x`` over a box with accelerated projected gradient.

    The unconstrained minimizer is tried first and returned when it is
    feasible. Otherwise the clipped unconstrained point seeds a projected
    gradient method with step ``1/L`` (``L`` from power iteration), Nesterov
    momentum and gradient-based restarts. Stops when the projected-gradient
    residual drops below ``tol``; if ``max_iter`` is hit, the best iterate is
    returned with ``converged=False`` and a warning.
    """
    H = np.atleast_2d(np.asarray(H_qp, dtype=float))
    f = np.atleast_1d(np.asarray(f, dtype=float))
    lb = np.broadcast_to(np.asarray(u_min, dtype=float), f.shape)
    ub = np.broadcast_to(np.asarray(u_max, dtype=float), f.shape)
    try:
        x_unc = np.linalg.solve(H, -f)
    except np.linalg.LinAlgError:
        x_unc = np.zeros_like(f)
    if np.all(x_unc >= lb) and np.all(x_unc <= ub):
        res = projected_gradient_residual(H, f, x_unc, lb, ub)
        if res < tol:
            return QpSolution(x_unc, True, 0, res)
    L = 1.01 * _max_eigenvalue(H)
    x = np.clip(x_unc, lb, ub)
    if L == 0.0:
        x = np.where(f > 0, lb, np.where(f < 0, ub, np.clip(0.0, lb, ub)))
        return QpSolution(x, True, 0, projected_gradient_residual(H, f, x, lb, ub))
    y, theta = x.copy(), 1.0
    best, best_res = x.copy(), projected_gradient_residual(H, f, x, lb, ub)
    for it in range(1, max_iter + 1):
        g = H @ y + f
        x_new = np.clip(y - g / L, lb, ub)
        if np.dot(g, x_new - x) > 0:  # restart momentum when it points uphill
            theta = 1.0
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        y = x_new + ((theta - 1.0) / theta_new) * (x_new - x)
        x, theta = x_new, theta_new
        res = projected_gradient_residual(H, f, x, lb, ub)
        if res < best_res:
            best, best_res = x.copy(), res
        if res < tol:
            return QpSolution(x, True, it, res)
    warnings.warn(f"box QP stopped after {max_iter} iterations (residual {best_res:.2e})", RuntimeWarning)
    return QpSolution(best, False, max_iter, best_res)


class MpcController:
    """Receding-horizon tracking controller on a weighted lifted model."""

    def __init__(self, wm: WeightedModel, lift, spec: MpcSpec = None):
        self.wm = wm
        self.lift = lift
        self.spec = (spec or MpcSpec()).resolved(wm.n, wm.p)
        self.Phi, self.Gamma = prediction_matrices(wm, self.spec.horizon)
        self.H_qp, *_ = _qp_from_matrices(self.Phi, self.Gamma, self.spec, np.zeros(wm.n_lift), 0.0)
        self.last_solution: Optional[QpSolution] = None

    def qp(self, x, t):
        z0 = self.lift.lift(np.asarray(x, dtype=float))
        return _qp_from_matrices(self.Phi, self.Gamma, self.spec, z0, t, self.H_qp)

    def __call__(self, x, t=0.0):
        H, f, lb, ub = self.qp(x, t)
        sol = solve_box_qp(H, f, lb, ub, self.spec.qp_tol, self.spec.qp_max_iter)
        self.last_solution = sol
        return sol.x[: self.wm.p].copy()

    def reference(self, t):
        return np.asarray(self.spec.reference(t), dtype=float)


def mpc_step(wm: WeightedModel, lift, spec: MpcSpec, x, t):
    """First input of the MPC plan computed from state ``x`` at time ``t``."""
    return MpcController(wm, lift, spec)(x, t)


@dataclass
class ClosedLoopResult:
    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    reference: Optional[np.ndarray] = None
    metrics: dict = field(default_factory=dict)


def closed_loop(system: SystemSpec, controller, x0, n_steps, reference=None, tracked=None) -> ClosedLoopResult:
    """Run ``controller`` against the true plant for ``n_steps`` samples.

    ``reference`` is a callable ``t -> r`` used for tracking metrics (MPC
    controllers supply their own when omitted). ``tracked`` selects the
    state components compared to the reference (default: components with a
    nonzero MPC weight, else the first).

    Raises
    ------
    DivergedError
        If the plant state becomes non-finite.
    """
    if reference is None and isinstance(controller, MpcController):
        reference = controller.reference
        if tracked is None:
            tracked = np.flatnonzero(np.diag(controller.spec.Q_x) > 0)
    dt = system.dt
    states = np.empty((n_steps + 1, system.n))
    inputs = np.empty((n_steps, system.p))
    states[0] = np.asarray(x0, dtype=float)
    t = np.arange(n_steps + 1) * dt
    for k in range(n_steps):
        u = np.asarray(controller(states[k], t[k]), dtype=float).reshape(system.p)
        inputs[k] = u
        states[k + 1] = system.step(states[k], u)
        if not np.all(np.isfinite(states[k + 1])):
            raise DivergedError("closed-loop plant diverged", step=k + 1)
    metrics = {
        "final_norm": float(np.linalg.norm(states[-1])),
        "input_energy": float(np.sum(inputs**2) * dt),
    }
    r = None
    if reference is not None:
        r = np.array([reference(tk) for tk in t], dtype=float)
        idx = np.asarray([0] if tracked is None else tracked)
        err = np.abs(states[:, idx] - r[:, idx]).max(axis=1)
        metrics["tracking_error"] = err.tolist()
        metrics["max_tracking_error"] = float(err.max())
    else:
        metrics["state_norm"] = np.linalg.norm(states, axis=1).tolist()
    return ClosedLoopResult(t, states, inputs, r, metrics)
