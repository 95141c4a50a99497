"""Analytic certificates and post-hoc verification of logged runs.

Certificates are closed-form: the Lipschitz constant of the stage/terminal
cost, the largest admissible disturbance bound compatible with recursive
feasibility, and the ultimate bound on the tracking error. Verification
replays a trajectory log against the navigation specification (collision
avoidance, connectivity, obstacle clearance, workspace containment, pitch
bounds), the terminal-set trapping property, and the per-step ISS cost
inequality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ErrorDynamics

__all__ = [
    "Certificate",
    "CheckResult",
    "VerificationReport",
    "lipschitz_of_cost",
    "disturbance_bound",
    "ultimate_bound",
    "xi_bound",
    "build_certificate",
    "observed_sup_error",
    "verify",
    "write_report",
]


def lipschitz_of_cost(weight, sup_e):
    """Lipschitz constant 2 * sigma_max(weight) * sup_e of e -> e' W e on a ball."""
    if sup_e <= 0.0:
        raise ValueError(f"error envelope must be positive, got {sup_e}")
    sigma = float(np.linalg.norm(np.asarray(weight, dtype=float), ord=2))
    return 2.0 * sigma * sup_e


def disturbance_bound(eps_psi, eps_omega, L_V, L_g, h, T_p):
    """Largest disturbance bound keeping the perturbed terminal error inside
    the feasibility region: the one-step tube growth, propagated over the
    remaining horizon and scaled by the value-function Lipschitz constant,
    must not exceed the gap eps_psi - eps_omega.
    """
    if eps_psi <= eps_omega:
        raise ValueError("need eps_psi > eps_omega")
    if L_V <= 0.0 or L_g <= 0.0:
        raise ValueError("Lipschitz constants must be positive")
    if not 0.0 < h < T_p:
        raise ValueError("need 0 < h < T_p")
    growth = (L_V / L_g) * math.expm1(L_g * h) * math.exp(L_g * (T_p - h))
    return (eps_psi - eps_omega) / growth


def ultimate_bound(eps_omega, lam_P):
    """Radius sqrt(eps_omega / lam) of the ball associated with the terminal
    sublevel set {V <= eps_omega}. With lam = lambda_max(P) this is the
    inscribed radius; with lam = lambda_min(P) the circumscribed (outer)
    radius that actually bounds every error in the set.
    """
    if eps_omega <= 0.0 or lam_P <= 0.0:
        raise ValueError("both arguments must be positive")
    return math.sqrt(eps_omega / lam_P)


def xi_bound(L_V, L_F, L_g, h, T_p):
    """Coefficient of w_bar in the per-step ISS cost-increase bound."""
    if min(L_V, L_F, L_g) <= 0.0 or not 0.0 < h < T_p:
        raise ValueError("invalid certificate constants")
    return (math.expm1(L_g * h) / L_g) * (
        (L_V + L_F / L_g) * math.expm1(L_g * (T_p - h)) + L_V)


@dataclass(frozen=True)
class Certificate:
    """Closed-form robustness certificate for one scenario."""

    L_g: float
    L_F: float
    L_V: float
    w_max: float
    ultimate_radius: float          # inscribed, via lambda_max(P)
    ultimate_radius_outer: float    # circumscribed, via lambda_min(P)
    xi: float
    consistent: bool

    def as_dict(self):
        return {
            "L_g": self.L_g,
            "L_F": self.L_F,
            "L_V": self.L_V,
            "w_max": self.w_max,
            "ultimate_radius": self.ultimate_radius,
            "ultimate_radius_outer": self.ultimate_radius_outer,
            "xi": self.xi,
            "consistent": self.consistent,
        }


def build_certificate(Q, P, eps_omega, eps_psi, L_g, L_V, h, T_p, w_bar,
                      sup_error, lam_max_P=None):
    """Assemble the certificate; `consistent` iff w_bar is admissible.

    `lam_max_P` optionally pins the largest eigenvalue of P used for the
    inscribed ultimate radius (e.g. a published rounded value); the outer
    radius always uses the actual smallest eigenvalue.
    """
    P = np.asarray(P, dtype=float)
    eigs = np.linalg.eigvalsh(P)
    if lam_max_P is None:
        lam_max_P = float(eigs[-1])
    L_F = lipschitz_of_cost(Q, sup_error)
    w_max = disturbance_bound(eps_psi, eps_omega, L_V, L_g, h, T_p)
    return Certificate(
        L_g=L_g, L_F=L_F, L_V=L_V, w_max=w_max,
        ultimate_radius=ultimate_bound(eps_omega, lam_max_P),
        ultimate_radius_outer=ultimate_bound(eps_omega, float(eigs[0])),
        xi=xi_bound(L_V, L_F, L_g, h, T_p),
        consistent=w_bar <= w_max,
    )


def observed_sup_error(log, errordyns, P, eps_psi):
    """Largest logged error norm among samples inside the feasibility region
    {V <= eps_psi}; used to cross-check published cost Lipschitz constants.
    """
    P = np.asarray(P, dtype=float)
    sup = 0.0
    for ed, trace in zip(errordyns, log.traces):
        for z in trace.states:
            e = ed.error_of(np.asarray(z))
            if float(e @ P @ e) <= eps_psi:
                sup = max(sup, float(np.linalg.norm(e)))
    return sup


@dataclass
class CheckResult:
    passed: bool
    worst_margin: float
    worst_time: float
    detail: str = ""


@dataclass
class VerificationReport:
    checks: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks.values())

    def summary_lines(self):
        width = max(len(k) for k in self.checks) if self.checks else 0
        lines = []
        for name, c in self.checks.items():
            verdict = "PASS" if c.passed else "FAIL"
            lines.append(f"{name:<{width}}  {verdict}  worst_margin={c.worst_margin:+.6g}"
                         f"  at_t={c.worst_time:.3f}" + (f"  ({c.detail})" if c.detail else ""))
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return lines


def _track(current, margin, t):
    """Keep the (margin, time) pair with the smallest margin."""
    if margin < current[0]:
        return (margin, t)
    return current


def verify(log, world, scenario, tol=1e-9, iss_tol=1e-6):
    """Check a trajectory log against the navigation specification.

    All geometric checks run on every logged sample (the RK4 substep grid),
    aligning agents by timestamp. Thresholds include the scenario safety
    margin. Also checks terminal-set trapping of V and the per-step ISS cost
    inequality using the per-step solver metadata.
    """
    report = VerificationReport()
    models = scenario.build_models()
    errordyns = [ErrorDynamics(m, z) for m, z in zip(models, scenario.references)]
    n = len(log.traces)
    times = [np.asarray(tr.times) for tr in log.traces]
    states = [np.asarray(tr.states) for tr in log.traces]
    positions = [states[i][:, models[i].position_slice] for i in range(n)]
    eps = world.margin

    def aligned(j, t_grid):
        idx = np.clip(np.searchsorted(times[j], t_grid), 0, len(times[j]) - 1)
        return positions[j][idx]

    # (1) convergence to the ultimate-bound ball (outer radius)
    cert = scenario.build_certificate()
    worst = (np.inf, 0.0)
    for i in range(n):
        e_final = errordyns[i].error_of(states[i][-1])
        worst = _track(worst, cert.ultimate_radius_outer - float(np.linalg.norm(e_final)),
                       float(times[i][-1]))
    report.checks["error-ultimate-bound"] = CheckResult(worst[0] >= -tol, *worst)

    # (2) inter-agent separation and (3) neighbor connectivity
    sep, conn = (np.inf, 0.0), (np.inf, 0.0)
    for i in range(n):
        r_i = world.agent_radii[i]
        for j in range(n):
            if j == i:
                continue
            dists = np.linalg.norm(positions[i] - aligned(j, times[i]), axis=1)
            k = int(np.argmin(dists))
            sep = _track(sep, float(dists[k]) - (r_i + world.agent_radii[j] + eps),
                         float(times[i][k]))
            if j in world.neighbor_sets[i]:
                k = int(np.argmax(dists))
                conn = _track(conn, (world.sensing_ranges[i] - eps) - float(dists[k]),
                              float(times[i][k]))
    report.checks["inter-agent-separation"] = CheckResult(sep[0] >= -tol, *sep)
    report.checks["neighbor-connectivity"] = CheckResult(conn[0] >= -tol, *conn)

    # (4) obstacle clearance and (5) workspace containment
    obst, wksp = (np.inf, 0.0), (np.inf, 0.0)
    for i in range(n):
        r_i = world.agent_radii[i]
        for obstacle in world.obstacles:
            dists = np.linalg.norm(positions[i] - obstacle.center, axis=1)
            k = int(np.argmin(dists))
            obst = _track(obst, float(dists[k]) - (r_i + obstacle.radius + eps),
                          float(times[i][k]))
        dists = np.linalg.norm(positions[i] - world.workspace.center, axis=1)
        k = int(np.argmax(dists))
        wksp = _track(wksp, (world.workspace.radius - r_i - eps) - float(dists[k]),
                      float(times[i][k]))
    report.checks["obstacle-clearance"] = CheckResult(
        obst[0] >= -tol if world.obstacles else True, *obst)
    report.checks["workspace-containment"] = CheckResult(wksp[0] >= -tol, *wksp)

    # (6) pitch bounds (rigid bodies only)
    pitch = (np.inf, 0.0)
    any_pitch = False
    for i in range(n):
        if models[i].pitch_index is None:
            continue
        any_pitch = True
        vals = np.pi / 2 - np.abs(states[i][:, models[i].pitch_index])
        k = int(np.argmin(vals))
        pitch = _track(pitch, float(vals[k]), float(times[i][k]))
    report.checks["pitch-bounds"] = CheckResult(
        pitch[0] >= -tol if any_pitch else True, *pitch,
        detail="" if any_pitch else "no rigid-body agents")

    # terminal-set trapping: once V dips below the threshold it stays there
    trap = (np.inf, 0.0)
    trapped_all = True
    detail = ""
    for i in range(n):
        V = np.asarray(log.traces[i].V)
        below = np.nonzero(V <= scenario.eps_omega + tol)[0]
        if len(below) == 0:
            trapped_all = False
            detail = f"agent {i} never entered the terminal set"
            continue
        tail = V[below[0]:]
        k = int(np.argmax(tail))
        margin = scenario.eps_omega - float(tail[k])
        trap = _track(trap, margin, float(times[i][below[0] + k]))
        if margin < -tol:
            trapped_all = False
    report.checks["terminal-trapping"] = CheckResult(
        trapped_all and trap[0] >= -tol,
        trap[0] if np.isfinite(trap[0]) else -np.inf, trap[1], detail)

    # ISS cost inequality: optimal-cost increase bounded by xi*w_bar minus the
    # accrued nominal error energy weighted by the smallest cost eigenvalue
    m_const = min(float(np.linalg.eigvalsh(np.asarray(scenario.Q))[0]),
                  float(np.linalg.eigvalsh(np.asarray(scenario.R))[0]))
    iss = (np.inf, 0.0)
    for i in range(n):
        meta = log.traces[i].step_meta
        for prev, curr in zip(meta[:-1], meta[1:]):
            bound = cert.xi * scenario.w_bar - m_const * prev["errsq_int"]
            margin = bound - (curr["cost"] - prev["cost"])
            iss = _track(iss, margin, curr["t"])
    report.checks["iss-cost-decrease"] = CheckResult(iss[0] >= -iss_tol, *iss)

    # solver health: no infeasible statuses in the log
    bad = (np.inf, 0.0)
    ok = True
    for i in range(n):
        for meta in log.traces[i].step_meta:
            if meta["status"] == "infeasible":
                ok = False
                bad = _track(bad, -1.0, meta["t"])
    report.checks["solver-feasible"] = CheckResult(
        ok, bad[0] if not ok else np.inf, bad[1])
    return report


def write_report(report: VerificationReport, path, extra=None):
    """Write a flat `key = value` report file (machine-readable)."""
    lines = []
    for name, c in report.checks.items():
        key = name.replace("-", "_")
        lines.append(f"{key}_pass = {str(c.passed).lower()}")
        lines.append(f"{key}_worst_margin = {c.worst_margin!r}")
        lines.append(f"{key}_worst_time = {c.worst_time!r}")
    lines.append(f"overall_pass = {str(report.passed).lower()}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
