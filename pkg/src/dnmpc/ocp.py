"""Finite-horizon optimal control problem: transcription, solver, warm starts.

The FHOCP is transcribed by direct single shooting: the decision variable is
the stack of N zero-order-hold inputs, the nominal error dynamics are rolled
out with the shared fixed-step RK4, and the tightened stage constraints are
enforced on the full substep grid (the same grid the verifier checks).

Gradients are central finite differences computed in one batched rollout per
decision point; scipy's SLSQP does the constrained minimization. Any method
meeting the HorizonSolution contract is conforming; SLSQP was chosen because
the decision dimension is tiny (N * input_dim).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from .constraints import TerminalSet, terminal_value
from .dynamics import ErrorDynamics, rollout_zoh, wrap_angle

__all__ = [
    "OcpConfig",
    "HorizonSolution",
    "stage_cost",
    "solve_fhocp",
    "restore_feasibility",
    "terminal_controller",
    "synthesize_terminal_gain",
    "unicycle_steering_law",
    "warm_start_shift",
    "terminal_decrease_margin",
]


@dataclass
class OcpConfig:
    """Weights and discretization of the per-agent FHOCP."""

    h: float
    T_p: float
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    eps_omega: float
    eps_psi: float
    u_bar: float
    substeps: int = 10
    constraint_tol: float = 1e-6
    max_iterations: int = 200
    fd_eps: float = 1e-6
    ftol: float = 1e-10

    def __post_init__(self):
        if not (0.0 < self.h < self.T_p):
            raise ValueError("need 0 < h < T_p")
        if abs(self.T_p / self.h - round(self.T_p / self.h)) > 1e-9:
            raise ValueError("sampling time must divide the horizon")
        for name in ("Q", "R", "P"):
            M = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, M)
            if not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(self.R).min() <= 0.0:
            raise ValueError("R must be positive definite")
        if np.linalg.eigvalsh(self.P).min() <= 0.0:
            raise ValueError("P must be positive definite")
        if not (0.0 < self.eps_omega < self.eps_psi):
            raise ValueError("need 0 < eps_omega < eps_psi")

    @property
    def n_stages(self):
        return int(round(self.T_p / self.h))

    @property
    def terminal_set(self):
        return TerminalSet(self.P, self.eps_omega, self.eps_psi)


@dataclass
class HorizonSolution:
    """Solver output: ZOH inputs, nominal prediction, cost and status."""

    inputs: np.ndarray            # (N, m)
    predicted_errors: np.ndarray  # (N + 1, n) on the stage grid
    dense_errors: np.ndarray      # (N * substeps + 1, n) on the substep grid
    cost: float
    status: str                   # optimal | feasible-suboptimal | infeasible
    solve_stats: dict = field(default_factory=dict)


def stage_cost(e, u, Q, R):
    """Quadratic running cost e'Qe + u'Ru."""
    e = np.asarray(e, dtype=float)
    u = np.asarray(u, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if e.shape[-1] != Q.shape[0] or u.shape[-1] != R.shape[0]:
        raise ValueError("dimension mismatch in stage cost")
    return np.einsum("...i,ij,...j->...", e, Q, e) + np.einsum("...i,ij,...j->...", u, R, u)


class _Transcription:
    """Single-shooting evaluation cache: one batched rollout per iterate."""

    def __init__(self, errordyn: ErrorDynamics, e0, margin_fn, config: OcpConfig,
                 use_terminal: bool):
        self.errordyn = errordyn
        self.e0 = np.asarray(e0, dtype=float)
        self.margin_fn = margin_fn
        self.cfg = config
        self.use_terminal = use_terminal
        self.n = errordyn.model.state_dim
        self.m = errordyn.model.input_dim
        self.N = config.n_stages
        self.nx = self.N * self.m
        S = config.substeps
        self.dense_taus = (config.h / S) * np.arange(1, self.N * S + 1)
        self.stage_idx = S * np.arange(self.N + 1)
        self._cache_key = None
        self._cache = None
        self.n_rollouts = 0

    def _evaluate_batch(self, U):
        """U: (B, N, m) -> costs (B,), margins (B, T, C) or None, V_term (B,)."""
        cfg = self.cfg
        B = U.shape[0]
        e0 = np.broadcast_to(self.e0, (B, self.n))
        traj = rollout_zoh(self.errordyn.field, e0, U, cfg.h, cfg.substeps)
        self.n_rollouts += B
        stage_e = traj[:, self.stage_idx[:-1], :]
        run = stage_cost(stage_e, U, cfg.Q, cfg.R).sum(axis=-1) * cfg.h
        v_term = np.einsum("bi,ij,bj->b", traj[:, -1, :], cfg.P, traj[:, -1, :])
        costs = run + v_term
        margins = None
        if self.margin_fn is not None:
            margins = self.margin_fn(traj[:, 1:, :], self.dense_taus)
        return traj, costs, margins, v_term

    def eval(self, x):
        key = x.tobytes()
        if key == self._cache_key:
            return self._cache
        eps = self.cfg.fd_eps
        U0 = x.reshape(self.N, self.m)
        batch = np.broadcast_to(x, (1 + 2 * self.nx, self.nx)).copy()
        batch[1:1 + self.nx] += eps * np.eye(self.nx)
        batch[1 + self.nx:] -= eps * np.eye(self.nx)
        traj, costs, margins, v_term = self._evaluate_batch(
            batch.reshape(-1, self.N, self.m))

        def central(values):
            plus = values[1:1 + self.nx]
            minus = values[1 + self.nx:]
            return (plus - minus) / (2.0 * eps)

        result = {
            "traj": traj[0],
            "cost": float(costs[0]),
            "cost_grad": central(costs),
            "v_term": float(v_term[0]),
            "v_term_grad": central(v_term),
        }
        if margins is not None:
            flat = margins.reshape(margins.shape[0], -1)
            result["margins"] = flat[0]
            result["margins_jac"] = central(flat).T  # (T*C, nx)
        self._cache_key = key
        self._cache = result
        return result


def _project_inputs(U, u_bar):
    """Exact projection of each stage input onto the norm ball."""
    norms = np.linalg.norm(U, axis=-1, keepdims=True)
    scale = np.minimum(1.0, u_bar / np.maximum(norms, 1e-300))
    return U * scale


def solve_fhocp(errordyn: ErrorDynamics, e0, margin_fn, config: OcpConfig,
                warm_start=None, use_terminal=True, diagnostics=None):
    """Solve the tightened finite-horizon problem for one agent.

    Args:
        errordyn: nominal error dynamics of the agent.
        margin_fn: callable (error_batch (B, T, n), taus (T,)) -> tightened
            margins (B, T, C); nonnegative means satisfied. None disables
            state constraints.
        warm_start: initial guess for the (N, m) input sequence.
        use_terminal: enforce V(e_N) <= eps_omega as a hard constraint.
        diagnostics: optional list collecting per-iteration (cost, residual).

    Returns:
        HorizonSolution; status is "infeasible" when the constraint residual
        exceeds the tolerance after the iteration budget.
    """
    t_start = time.perf_counter()
    e0 = np.asarray(e0, dtype=float)
    if not np.all(np.isfinite(e0)):
        raise ValueError("initial error must be finite")
    tr = _Transcription(errordyn, e0, margin_fn, config, use_terminal)
    N, m = tr.N, tr.m
    if warm_start is None:
        x0 = np.zeros(N * m)
    else:
        x0 = _project_inputs(np.asarray(warm_start, dtype=float), config.u_bar).ravel()

    cons = []
    if margin_fn is not None:
        cons.append({
            "type": "ineq",
            "fun": lambda x: tr.eval(x)["margins"],
            "jac": lambda x: tr.eval(x)["margins_jac"],
        })
    u_bar_sq = config.u_bar ** 2

    def input_fun(x):
        U = x.reshape(N, m)
        return u_bar_sq - np.sum(U * U, axis=1)

    def input_jac(x):
        U = x.reshape(N, m)
        jac = np.zeros((N, N * m))
        for k in range(N):
            jac[k, k * m:(k + 1) * m] = -2.0 * U[k]
        return jac

    cons.append({"type": "ineq", "fun": input_fun, "jac": input_jac})
    if use_terminal:
        cons.append({
            "type": "ineq",
            "fun": lambda x: np.array([config.eps_omega - tr.eval(x)["v_term"]]),
            "jac": lambda x: -tr.eval(x)["v_term_grad"][None, :],
        })

    def objective(x):
        res = tr.eval(x)
        if diagnostics is not None:
            diagnostics.append((res["cost"], _residual(res)))
        return res["cost"]

    def _residual(res):
        worst = 0.0
        if "margins" in res:
            worst = max(worst, float(-res["margins"].min(initial=0.0)))
        if use_terminal:
            worst = max(worst, res["v_term"] - config.eps_omega)
        return worst

    try:
        opt = minimize(
            objective, x0, jac=lambda x: tr.eval(x)["cost_grad"],
            constraints=cons, method="SLSQP",
            options={"maxiter": config.max_iterations, "ftol": config.ftol},
        )
        x_best = opt.x
        iterations = int(opt.nit)
        converged = bool(opt.success)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise RuntimeError(f"solver diverged: {exc}") from exc
    if not np.all(np.isfinite(x_best)):
        raise RuntimeError("solver produced non-finite iterate")

    U = _project_inputs(x_best.reshape(N, m), config.u_bar)
    x_best = U.ravel()
    res = tr.eval(x_best)
    residual = _residual(res)
    # Keep the warm start if SLSQP wandered to something worse and infeasible.
    if residual > config.constraint_tol:
        res0 = tr.eval(x0)
        if _residual(res0) <= config.constraint_tol:
            x_best, res, residual = x0, res0, _residual(res0)
            U = x_best.reshape(N, m)

    if residual > config.constraint_tol:
        status = "infeasible"
    elif converged:
        status = "optimal"
    else:
        status = "feasible-suboptimal"

    traj = res["traj"]
    return HorizonSolution(
        inputs=U.copy(),
        predicted_errors=traj[tr.stage_idx],
        dense_errors=traj,
        cost=res["cost"],
        status=status,
        solve_stats={
            "iterations": iterations,
            "wall_time": time.perf_counter() - t_start,
            "residual": float(residual),
            "rollouts": tr.n_rollouts,
            "terminal_enforced": bool(use_terminal),
        },
    )


def restore_feasibility(errordyn: ErrorDynamics, e0, margin_fn, config: OcpConfig,
                        start, use_terminal=False):
    """Phase-1 pass: maximize the worst constraint slack from a near-feasible
    input sequence.

    Solves max_s { s : margins(u) >= s, ||u_k|| <= u_bar } with SLSQP over the
    augmented variable (u, s). Used when the cost-driven solve stalls a hair
    outside the tolerance. Returns the restored (N, m) input sequence.
    """
    tr = _Transcription(errordyn, np.asarray(e0, dtype=float), margin_fn, config,
                        use_terminal)
    N, m = tr.N, tr.m
    nx = tr.nx
    u0 = _project_inputs(np.asarray(start, dtype=float), config.u_bar).ravel()

    def worst_slack(u_flat):
        res = tr.eval(u_flat)
        vals = [res["margins"].min()] if "margins" in res else [0.0]
        if use_terminal:
            vals.append(config.eps_omega - res["v_term"])
        return float(min(vals))

    x0 = np.append(u0, worst_slack(u0))

    cons = []
    if margin_fn is not None:
        cons.append({
            "type": "ineq",
            "fun": lambda x: tr.eval(x[:-1])["margins"] - x[-1],
            "jac": lambda x: np.hstack([
                tr.eval(x[:-1])["margins_jac"],
                -np.ones((tr.eval(x[:-1])["margins_jac"].shape[0], 1))]),
        })
    if use_terminal:
        cons.append({
            "type": "ineq",
            "fun": lambda x: np.array([config.eps_omega - tr.eval(x[:-1])["v_term"] - x[-1]]),
            "jac": lambda x: np.append(-tr.eval(x[:-1])["v_term_grad"], -1.0)[None, :],
        })
    u_bar_sq = config.u_bar ** 2

    def input_fun(x):
        U = x[:-1].reshape(N, m)
        return u_bar_sq - np.sum(U * U, axis=1)

    def input_jac(x):
        U = x[:-1].reshape(N, m)
        jac = np.zeros((N, nx + 1))
        for k in range(N):
            jac[k, k * m:(k + 1) * m] = -2.0 * U[k]
        return jac

    cons.append({"type": "ineq", "fun": input_fun, "jac": input_jac})
    grad = np.zeros(nx + 1)
    grad[-1] = -1.0
    try:
        opt = minimize(lambda x: -x[-1], x0, jac=lambda x: grad,
                       constraints=cons, method="SLSQP",
                       options={"maxiter": config.max_iterations, "ftol": 1e-12})
        candidate = opt.x[:-1]
    except (FloatingPointError, np.linalg.LinAlgError):
        return start
    if not np.all(np.isfinite(candidate)):
        return start
    U = _project_inputs(candidate.reshape(N, m), config.u_bar)
    if worst_slack(U.ravel()) > worst_slack(u0):
        return U
    return np.asarray(start, dtype=float)


# --- terminal ingredients ----------------------------------------------

def terminal_controller(e, K, u_bar=None):
    """Linear terminal feedback u = K e with an input-bound diagnostic flag.

    Returns (u, within_bound). A raised flag means the terminal region was
    chosen too large for the gain.
    """
    u = np.asarray(K, dtype=float) @ np.asarray(e, dtype=float)
    within = True if u_bar is None else bool(np.linalg.norm(u) <= u_bar)
    return u, within


def _linearize(errordyn: ErrorDynamics, u_eq=None, eps=1e-6):
    n, m = errordyn.model.state_dim, errordyn.model.input_dim
    u_eq = np.zeros(m) if u_eq is None else np.asarray(u_eq, dtype=float)
    e0 = np.zeros(n)
    A = np.empty((n, n))
    B = np.empty((n, m))
    for j in range(n):
        d = np.zeros(n)
        d[j] = eps
        A[:, j] = (errordyn.field(e0 + d, u_eq) - errordyn.field(e0 - d, u_eq)) / (2 * eps)
    for j in range(m):
        d = np.zeros(m)
        d[j] = eps
        B[:, j] = (errordyn.field(e0, u_eq + d) - errordyn.field(e0, u_eq - d)) / (2 * eps)
    return A, B


def synthesize_terminal_gain(errordyn: ErrorDynamics, Q, R, u_eq=None):
    """LQR gain and Riccati weight for the linearization at the reference.

    Returns (K, P_candidate) with u = K e. Raises ValueError naming the
    uncontrollable unstable mode when the linearization is not stabilizable
    (the unicycle at rest is the canonical case).
    """
    A, B = _linearize(errordyn, u_eq)
    n = A.shape[0]
    eigvals, eigvecs = np.linalg.eig(A.T)
    for lam, w in zip(eigvals, eigvecs.T):
        if lam.real >= -1e-9 and np.linalg.norm(w.conj() @ B) < 1e-8:
            raise ValueError(
                f"linearization not stabilizable: uncontrollable mode with eigenvalue {lam:.4g}"
            )
    P = scipy.linalg.solve_continuous_are(A, B, np.asarray(Q, float), np.asarray(R, float))
    K = -np.linalg.solve(np.asarray(R, float), B.T @ P)
    return K, P


def unicycle_steering_law(z_des, u_bar, k_v=2.0, k_alpha=4.0, k_theta=2.0, blend=0.05):
    """Distance/bearing feedback for the unicycle error state.

    Drives the position error to zero by steering toward the goal, then
    aligns the heading. Saturated to the input-norm ball; used as the
    terminal/warm-start controller since the rest linearization is not
    stabilizable.
    """
    theta_des = float(z_des[2])

    def kappa(e):
        e = np.asarray(e, dtype=float)
        dx, dy = -e[0], -e[1]
        dist = float(np.hypot(dx, dy))
        theta = theta_des + e[2]
        if dist > 1e-12:
            bearing = np.arctan2(dy, dx)
            alpha = float(wrap_angle(bearing - theta))
            v = k_v * dist * np.cos(alpha)
            w_goal = dist / (dist + blend)
            omega = k_alpha * alpha * w_goal - k_theta * float(wrap_angle(e[2])) * (1 - w_goal)
        else:
            v = 0.0
            omega = -k_theta * float(wrap_angle(e[2]))
        u = np.array([v, omega])
        norm = np.linalg.norm(u)
        if norm > u_bar:
            u *= u_bar / norm
        return u

    return kappa


def warm_start_shift(previous: HorizonSolution, controller, errordyn: ErrorDynamics,
                     config: OcpConfig):
    """Shifted warm start: drop the first stage, append one terminal stage.

    The appended input is the terminal controller applied to the tail state of
    the previous prediction, projected onto the input ball.
    """
    if previous.status == "infeasible":
        raise ValueError("cannot shift an infeasible solution")
    tail = previous.predicted_errors[-1]
    u_tail = np.asarray(controller(tail), dtype=float)
    norm = np.linalg.norm(u_tail)
    if norm > config.u_bar:
        u_tail = u_tail * (config.u_bar / norm)
    return np.vstack([previous.inputs[1:], u_tail[None, :]])


def terminal_decrease_margin(errordyn: ErrorDynamics, controller, term: TerminalSet,
                             Q, R, points):
    """Worst value of dV/de . g(e, kappa(e)) + F(e, kappa(e)) over sample points.

    Nonpositive everywhere means the terminal controller satisfies the local
    decrease condition on the sampled region.
    """
    worst = -np.inf
    for e in np.atleast_2d(points):
        u = np.asarray(controller(e), dtype=float)
        grad_v = 2.0 * term.P @ e
        val = float(grad_v @ errordyn.field(e, u) + stage_cost(e, u, Q, R))
        worst = max(worst, val)
    return worst
