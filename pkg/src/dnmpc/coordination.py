"""Sequential (round-robin) decentralized simulation engine.

Each sampling step walks the schedule: the scheduled agent snapshots the
prediction board, builds its tightened stage constraints against the other
agents' latest predicted trajectories (sampled at matching absolute times),
solves its FHOCP warm-started from the shifted previous solution, posts the
new prediction, and applies the first input segment to the true disturbed
dynamics while all other agents hold still.

The strictly tightened problem can be structurally empty at the horizon tail
(the tube radius grows exponentially), and the terminal constraint can be
unreachable far from the goal. Both cases are handled by a fallback ladder
(drop terminal constraint, cap the tail tightening) whose relaxations are
flagged in the solution status and solve stats; the applied first segment
always satisfies the strictly tightened early-stage constraints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .constraints import StageGeometry, WorldModel, tube_profile_radii
from .dynamics import DisturbanceSignal, ErrorDynamics, integrate, zoh_input
from .ocp import (HorizonSolution, OcpConfig, restore_feasibility, solve_fhocp,
                  unicycle_steering_law, warm_start_shift)
from .setalg import TubeProfile

log = logging.getLogger(__name__)

__all__ = [
    "sensing_set",
    "neighbor_sets",
    "validate_initial",
    "PredictionEntry",
    "PredictionBoard",
    "TrajectoryLog",
    "AgentTrace",
    "SimulationError",
    "Simulation",
    "run",
]


def sensing_set(agent, positions, d_i):
    """Agents strictly within sensing range of `agent` (excluding itself)."""
    positions = np.asarray(positions, dtype=float)
    dists = np.linalg.norm(positions - positions[agent], axis=1)
    return {j for j in range(len(positions)) if j != agent and dists[j] < d_i}


def neighbor_sets(initial_positions, sensing_ranges):
    """Fixed neighbor sets N_i = R_i(0). Raises if any agent is isolated."""
    n = len(initial_positions)
    out = []
    for i in range(n):
        n_i = frozenset(sensing_set(i, initial_positions, sensing_ranges[i]))
        if not n_i:
            raise ValueError(f"agent {i} has no neighbor at t = 0")
        out.append(n_i)
    return out


@dataclass
class ValidationReport:
    passed: bool
    failures: list


def validate_initial(world: WorldModel, states, models, velocities=None):
    """Collision/singularity-free initial configuration check.

    Conditions: pairwise separation, obstacle clearance, workspace
    containment, pitch bounds (rigid bodies), and zero initial velocity when a
    velocity is part of the state.
    """
    failures = []
    positions = [np.asarray(z)[m.position_slice] for z, m in zip(states, models)]
    n = len(states)
    for i in range(n):
        for j in range(i + 1, n):
            dist = np.linalg.norm(positions[i] - positions[j])
            if dist <= world.agent_radii[i] + world.agent_radii[j]:
                failures.append(f"agents {i},{j} collide: distance {dist:.4g}")
    for i in range(n):
        for ell, obstacle in enumerate(world.obstacles):
            dist = np.linalg.norm(positions[i] - obstacle.center)
            if dist <= world.agent_radii[i] + obstacle.radius:
                failures.append(f"agent {i} inside obstacle {ell}")
        if (np.linalg.norm(positions[i] - world.workspace.center)
                >= world.workspace.radius - world.agent_radii[i]):
            failures.append(f"agent {i} outside workspace")
        m = models[i]
        if m.pitch_index is not None:
            pitch = float(np.asarray(states[i])[m.pitch_index])
            if abs(pitch) >= np.pi / 2:
                failures.append(f"agent {i} at singular pitch {pitch:.4g}")
        if velocities is not None and np.linalg.norm(velocities[i]) > 1e-12:
            failures.append(f"agent {i} has nonzero initial velocity")
    return ValidationReport(passed=not failures, failures=failures)


@dataclass
class PredictionEntry:
    """A posted open-loop prediction: absolute states on a uniform time grid.

    Predictions are posted on the integrator substep grid so that other
    agents' linear interpolation of the posted plan stays within integrator
    accuracy of the trajectory the poster actually certified; interpolating
    chords between stage points alone deviates from the curved path by up to
    a few centimetres at high speed, which shows up as phantom collision
    margins for the other agents.
    """

    t0: float
    h: float
    states: np.ndarray  # (n_grid + 1, n)
    position_slice: slice

    def positions_at(self, times):
        """Positions interpolated on the posted grid, held beyond both ends."""
        grid = self.t0 + self.h * np.arange(self.states.shape[0])
        pos = self.states[:, self.position_slice]
        times = np.asarray(times, dtype=float)
        out = np.empty((len(times), pos.shape[1]))
        for d in range(pos.shape[1]):
            out[:, d] = np.interp(times, grid, pos[:, d])
        return out


class PredictionBoard:
    """Latest prediction per agent; entries are immutable once posted."""

    def __init__(self):
        self._entries = {}

    def post(self, agent, entry: PredictionEntry):
        self._entries[agent] = entry

    def get(self, agent) -> PredictionEntry:
        return self._entries[agent]

    def snapshot(self):
        return dict(self._entries)


@dataclass
class AgentTrace:
    """Time-indexed true trajectory and per-step solver metadata."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    inputs: list = field(default_factory=list)      # applied ZOH input, NaN at t=0
    w_norms: list = field(default_factory=list)
    V: list = field(default_factory=list)
    margins: list = field(default_factory=list)     # dict kind -> margin, filled post-run
    step_meta: list = field(default_factory=list)   # one dict per sampling step

    def as_arrays(self):
        return (np.asarray(self.times), np.asarray(self.states),
                np.asarray(self.inputs), np.asarray(self.w_norms),
                np.asarray(self.V))


_MARGIN_KINDS = ("inter-agent", "neighbor", "obstacle", "workspace", "pitch")


@dataclass
class TrajectoryLog:
    traces: list
    meta: dict = field(default_factory=dict)

    @property
    def agent_count(self):
        return len(self.traces)

    def to_csv(self, path):
        """Write the log as one flat CSV, one row per agent per substep.

        Solver columns (step, status, cost, errsq_int, relaxation flags)
        repeat the values of the sampling step the row belongs to; the t = 0
        row carries step -1 and empty solver fields. Floats are written with
        `repr` so identical runs produce byte-identical files.
        """
        import csv

        n_x = max(np.asarray(tr.states).shape[1] for tr in self.traces)
        n_u = max(np.asarray(tr.inputs).shape[1] for tr in self.traces)
        substeps = int(self.meta.get("substeps", 10))
        header = (["t", "agent", "step"]
                  + [f"x{d}" for d in range(n_x)] + [f"u{d}" for d in range(n_u)]
                  + ["w_norm", "V"]
                  + ["m_" + kind.replace("-", "_") for kind in _MARGIN_KINDS]
                  + ["status", "cost", "errsq_int", "terminal_relaxed", "tube_capped"])

        def fmt(x):
            return repr(float(x))

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i, trace in enumerate(self.traces):
                states = np.asarray(trace.states)
                inputs = np.asarray(trace.inputs)
                for r in range(len(trace.times)):
                    step = -1 if r == 0 else (r - 1) // substeps
                    meta = trace.step_meta[step] if step >= 0 else None
                    row = [fmt(trace.times[r]), str(i), str(step)]
                    row += [fmt(v) for v in states[r]]
                    row += [""] * (n_x - states.shape[1])
                    row += [fmt(v) for v in inputs[r]]
                    row += [""] * (n_u - inputs.shape[1])
                    row += [fmt(trace.w_norms[r]), fmt(trace.V[r])]
                    margins = trace.margins[r] if trace.margins else {}
                    row += [fmt(margins.get(kind, np.inf)) for kind in _MARGIN_KINDS]
                    if meta is None:
                        row += ["", "", "", "", ""]
                    else:
                        row += [meta["status"], fmt(meta["cost"]), fmt(meta["errsq_int"]),
                                str(int(meta["terminal_relaxed"])),
                                str(int(meta["tube_capped"]))]
                    writer.writerow(row)

    @classmethod
    def from_csv(cls, path, h=0.1, substeps=10):
        """Rebuild a TrajectoryLog (states, inputs, V, margins, per-step solver
        metadata) from a file written by `to_csv`."""
        import csv

        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        n_x = sum(1 for c in header if c.startswith("x") and c[1:].isdigit())
        n_u = sum(1 for c in header if c.startswith("u") and c[1:].isdigit())
        col = {name: k for k, name in enumerate(header)}
        traces = {}
        for row in rows:
            i = int(row[col["agent"]])
            trace = traces.setdefault(i, AgentTrace())
            trace.times.append(float(row[col["t"]]))
            trace.states.append(np.asarray(
                [float(row[col[f"x{d}"]]) for d in range(n_x) if row[col[f"x{d}"]]]))
            trace.inputs.append(np.asarray(
                [float(row[col[f"u{d}"]]) for d in range(n_u) if row[col[f"u{d}"]]]))
            trace.w_norms.append(float(row[col["w_norm"]]))
            trace.V.append(float(row[col["V"]]))
            trace.margins.append({
                kind: float(row[col["m_" + kind.replace("-", "_")]])
                for kind in _MARGIN_KINDS})
            step = int(row[col["step"]])
            if step >= 0 and step == len(trace.step_meta):
                trace.step_meta.append({
                    "t": step * h,
                    "status": row[col["status"]],
                    "cost": float(row[col["cost"]]),
                    "errsq_int": float(row[col["errsq_int"]]),
                    "terminal_relaxed": bool(int(row[col["terminal_relaxed"]])),
                    "tube_capped": bool(int(row[col["tube_capped"]])),
                })
        ordered = [traces[i] for i in sorted(traces)]
        return cls(traces=ordered, meta={"h": h, "substeps": substeps})


class SimulationError(RuntimeError):
    """A step failed (solver infeasible); carries the partial log."""

    def __init__(self, message, partial_log=None, agent=None, t=None, min_margin=None):
        super().__init__(message)
        self.partial_log = partial_log
        self.agent = agent
        self.t = t
        self.min_margin = min_margin


class Simulation:
    """Round-robin closed-loop simulation for a fixed scenario.

    All randomness is seeded and the loop is single-threaded, so identical
    scenarios produce bit-identical logs.
    """

    def __init__(self, world: WorldModel, models, references, config: OcpConfig,
                 profile: TubeProfile, schedule, disturbances, initial_states,
                 total_time, tube_cap=None, verbose_solver=False):
        self.world = world
        self.models = models
        self.errordyns = [ErrorDynamics(m, z) for m, z in zip(models, references)]
        self.config = config
        self.profile = profile
        self.schedule = list(schedule)
        if sorted(self.schedule) != list(range(len(models))):
            raise ValueError("schedule must be a permutation of the agents")
        self.disturbances = disturbances
        self.states = [np.asarray(z, dtype=float).copy() for z in initial_states]
        self.total_time = float(total_time)
        self.tube_cap = tube_cap
        self.verbose_solver = verbose_solver
        self.board = PredictionBoard()
        self.known_obstacles = [set() for _ in models]
        self.prev_solution: list = [None] * len(models)
        self.traces = [AgentTrace() for _ in models]
        self.steering = [
            unicycle_steering_law(ed.z_des, config.u_bar) if m.state_dim == 3
            else (lambda e, m=m: np.zeros(m.input_dim))
            for m, ed in zip(models, self.errordyns)
        ]
        self._n_steps = int(round(self.total_time / config.h))
        if abs(self._n_steps * config.h - self.total_time) > 1e-9:
            raise ValueError("sampling time must divide the total time")

    # -- helpers --------------------------------------------------------

    def _positions(self):
        return np.asarray([z[m.position_slice] for z, m in zip(self.states, self.models)])

    def _update_known_obstacles(self, i):
        p = self.states[i][self.models[i].position_slice]
        b_i = self.world.detection_ranges[i]
        for ell, obstacle in enumerate(self.world.obstacles):
            if np.linalg.norm(p - obstacle.center) - obstacle.radius <= b_i:
                self.known_obstacles[i].add(ell)

    def _bootstrap_board(self):
        for i, model in enumerate(self.models):
            n_grid = self.config.n_stages * self.config.substeps + 1
            states = np.tile(self.states[i], (n_grid, 1))
            self.board.post(i, PredictionEntry(
                t0=0.0, h=self.config.h / self.config.substeps, states=states,
                position_slice=model.position_slice))

    def _geometry(self, i, t_k, dense_taus):
        """Constraint snapshot for agent i solving at t_k."""
        board = self.board.snapshot()
        positions = self._positions()
        in_range = sensing_set(i, positions, self.world.sensing_ranges[i])
        times = t_k + dense_taus
        geo = StageGeometry(taus=dense_taus)
        r_i = self.world.agent_radii[i]
        eps = self.world.margin
        for j in sorted(in_range):
            traj = board[j].positions_at(times)
            geo.interagent.append(
                (f"agent{j}", traj, r_i + self.world.agent_radii[j] + eps))
        for j in sorted(self.world.neighbor_sets[i]):
            traj = board[j].positions_at(times)
            geo.neighbor.append((f"agent{j}", traj, self.world.sensing_ranges[i] - eps))
        for ell in sorted(self.known_obstacles[i]):
            obstacle = self.world.obstacles[ell]
            geo.obstacles.append(
                (f"obst{ell}", obstacle.center, r_i + obstacle.radius + eps))
        geo.workspace = (self.world.workspace.center,
                         self.world.workspace.radius - r_i - eps)
        if self.models[i].pitch_index is not None:
            geo.pitch_bound = np.pi / 2 - eps
        return geo

    def _margin_fn(self, i, geometry, rho_mat):
        model = self.models[i]
        z_des = self.errordyns[i].z_des
        pos_slice = model.position_slice
        pitch_index = model.pitch_index

        def margin_fn(err_batch, taus):
            pos = err_batch[..., pos_slice] + z_des[pos_slice]
            pitch = None
            if pitch_index is not None:
                pitch = err_batch[..., pitch_index] + z_des[pitch_index]
            return geometry.margins(pos, pitch) - rho_mat

        return margin_fn

    def _capped_radii(self, geometry, dense_taus, cap, has_pitch):
        """Tube erosion per stage and constraint column, `(T, C)`-broadcastable.

        `cap` may be None (pure exponential profile), a scalar ceiling, or a
        mapping from constraint kind to ceiling (kinds without an entry stay
        uncapped).
        """
        rho = tube_profile_radii(self.profile, dense_taus)
        if cap is None:
            return rho[:, None]
        if np.isscalar(cap):
            return np.minimum(rho, float(cap))[:, None]
        kinds = geometry.column_kinds(has_pitch)
        ceilings = np.array([float(cap.get(k, np.inf)) for k in kinds])
        return np.minimum(rho[:, None], ceilings[None, :])

    def _starts(self, i):
        """Warm start candidates, best first."""
        cfg = self.config
        starts = []
        prev = self.prev_solution[i]
        if prev is not None and prev.status != "infeasible":
            starts.append(warm_start_shift(prev, self.steering[i], self.errordyns[i], cfg))
        starts.append(np.zeros((cfg.n_stages, self.models[i].input_dim)))
        # closed-loop steering-law rollout as a last resort
        from .dynamics import rollout_zoh
        e = self.errordyns[i].error_of(self.states[i])
        seq = []
        for _ in range(cfg.n_stages):
            u = self.steering[i](e)
            seq.append(u)
            e = rollout_zoh(self.errordyns[i].field, e, u[None, :], cfg.h, cfg.substeps)[-1]
        starts.append(np.asarray(seq))
        return starts

    def _probe_starts(self, i):
        """Lateral-detour guesses (turn, then drive) used to escape the
        stationary local optimum when an agent is blocked far from its goal."""
        model = self.models[i]
        if model.input_dim != 2:
            return []
        cfg = self.config
        mag = 0.7 * cfg.u_bar
        probes = []
        for turn_stages in (1, 2):
            for sign in (1.0, -1.0):
                seq = np.zeros((cfg.n_stages, 2))
                seq[:turn_stages, 1] = sign * mag
                seq[turn_stages:, 0] = mag
                probes.append(seq)
        return probes

    def _solve_agent(self, i, t_k):
        cfg = self.config
        S = cfg.substeps
        dense_taus = (cfg.h / S) * np.arange(1, cfg.n_stages * S + 1)
        geometry = self._geometry(i, t_k, dense_taus)
        rho_full = tube_profile_radii(self.profile, dense_taus)
        e0 = self.errordyns[i].error_of(self.states[i])

        caps = []
        if not geometry.window_empty(rho_full):
            caps.append(None)
        if self.tube_cap is not None:
            caps.append(self.tube_cap)
        if not caps:
            caps = [None]

        pos_err = np.linalg.norm(e0[self.models[i].position_slice])
        terminal_plausible = pos_err <= 0.5 * cfg.u_bar * cfg.T_p
        tiers = []
        if terminal_plausible:
            tiers += [(True, cap) for cap in caps]
        tiers += [(False, cap) for cap in caps]

        best = None
        tried = 0
        has_pitch = self.models[i].pitch_index is not None
        for use_terminal, cap in tiers:
            rho_mat = self._capped_radii(geometry, dense_taus, cap, has_pitch)
            margin_fn = self._margin_fn(i, geometry, rho_mat)

            def attempt(start):
                nonlocal tried
                tried += 1
                return solve_fhocp(
                    self.errordyns[i], e0, margin_fn, cfg,
                    warm_start=start, use_terminal=use_terminal)

            def accept(sol):
                relaxed = (not use_terminal) or (cap is not None)
                if relaxed and sol.status == "optimal":
                    sol.status = "feasible-suboptimal"
                sol.solve_stats.update({
                    "terminal_relaxed": not use_terminal,
                    "tube_capped": cap is not None,
                    "attempts": tried,
                })
                return sol, geometry

            tier_best = None
            incumbent = None
            starts = self._starts(i)
            remaining = []
            for idx, start in enumerate(starts):
                sol = attempt(start)
                if sol.status != "infeasible":
                    incumbent = sol
                    remaining = starts[idx + 1:]
                    break
                if (tier_best is None
                        or sol.solve_stats["residual"] < tier_best.solve_stats["residual"]):
                    tier_best = sol
            if incumbent is not None:
                # a plan that barely moves while far from the goal signals a
                # blocked local optimum: probe lateral detours for a cheaper one
                displacement = np.linalg.norm(
                    (incumbent.predicted_errors[-1] - incumbent.predicted_errors[0])
                    [self.models[i].position_slice])
                if pos_err > 1.0 and displacement < 0.1 * cfg.u_bar * cfg.T_p:
                    for start in remaining + self._probe_starts(i):
                        sol = attempt(start)
                        if sol.status != "infeasible" and sol.cost < incumbent.cost:
                            incumbent = sol
                return accept(incumbent)
            # polish: the iteration budget often ends a hair short of feasible
            sol = tier_best
            for _ in range(3):
                if sol.solve_stats["residual"] > 5e-2:
                    break
                polished = attempt(sol.inputs)
                if polished.status != "infeasible":
                    return accept(polished)
                if polished.solve_stats["residual"] >= sol.solve_stats["residual"]:
                    break
                sol = polished
            # phase-1 slack maximization from the best near-feasible iterate
            if sol.solve_stats["residual"] <= 5e-2:
                restored = restore_feasibility(
                    self.errordyns[i], e0, margin_fn, cfg, sol.inputs,
                    use_terminal=use_terminal)
                polished = attempt(restored)
                if polished.status != "infeasible":
                    return accept(polished)
                if polished.solve_stats["residual"] < sol.solve_stats["residual"]:
                    sol = polished
            if best is None or sol.solve_stats["residual"] < best.solve_stats["residual"]:
                best = sol
        best.solve_stats.update({"attempts": tried})
        return best, geometry

    # -- main loop ------------------------------------------------------

    def _log_initial(self):
        for i, trace in enumerate(self.traces):
            trace.times.append(0.0)
            trace.states.append(self.states[i].copy())
            trace.inputs.append(np.full(self.models[i].input_dim, np.nan))
            trace.w_norms.append(0.0)
            e = self.errordyns[i].error_of(self.states[i])
            trace.V.append(float(e @ self.config.P @ e))

    def step(self, k):
        """Run one sampling step (all agents in schedule order)."""
        t_k = k * self.config.h
        cfg = self.config
        for i in self.schedule:
            self._update_known_obstacles(i)
            sol, geometry = self._solve_agent(i, t_k)
            if sol.status == "infeasible":
                raise SimulationError(
                    f"agent {i} infeasible at t = {t_k:.3f} "
                    f"(residual {sol.solve_stats['residual']:.3g})",
                    partial_log=self.finalize_log(), agent=i, t=t_k,
                    min_margin=-sol.solve_stats["residual"])
            abs_pred = np.asarray(
                [self.errordyns[i].state_of(e) for e in sol.dense_errors])
            self.board.post(i, PredictionEntry(
                t0=t_k, h=cfg.h / cfg.substeps, states=abs_pred,
                position_slice=self.models[i].position_slice))
            self.prev_solution[i] = sol

            # apply the first input segment to the true disturbed dynamics
            u0 = sol.inputs[0]
            times, states = integrate(
                self.models[i], self.states[i], zoh_input(u0[None, :], cfg.h, t_k),
                self.disturbances[i], t_k, t_k + cfg.h, cfg.h / cfg.substeps)
            self.states[i] = states[-1].copy()

            # predicted nominal error energy over the applied interval (for ISS)
            dense = sol.dense_errors[: cfg.substeps + 1]
            errsq = np.sum(dense * dense, axis=1)
            errsq_int = float(np.trapezoid(errsq, dx=cfg.h / cfg.substeps))

            trace = self.traces[i]
            for idx in range(1, len(times)):
                trace.times.append(float(times[idx]))
                trace.states.append(states[idx].copy())
                trace.inputs.append(u0.copy())
                w = (self.disturbances[i].sample(states[idx], times[idx])
                     if self.disturbances[i] is not None else np.zeros(1))
                trace.w_norms.append(float(np.linalg.norm(w)))
                e = self.errordyns[i].error_of(states[idx])
                trace.V.append(float(e @ cfg.P @ e))
            trace.step_meta.append({
                "t": t_k,
                "status": sol.status,
                "cost": sol.cost,
                "errsq_int": errsq_int,
                "terminal_relaxed": sol.solve_stats.get("terminal_relaxed", False),
                "tube_capped": sol.solve_stats.get("tube_capped", False),
                "iterations": sol.solve_stats.get("iterations", 0),
                "wall_time": sol.solve_stats.get("wall_time", 0.0),
            })
            self._update_known_obstacles(i)
            if self.verbose_solver:
                log.info("t=%.2f agent %d: %s cost=%.4g iters=%d", t_k, i,
                         sol.status, sol.cost, sol.solve_stats.get("iterations", 0))

    def finalize_log(self):
        log_out = TrajectoryLog(
            traces=self.traces,
            meta={
                "h": self.config.h,
                "T_p": self.config.T_p,
                "substeps": self.config.substeps,
                "schedule": list(self.schedule),
                "interp_stale_predictions": "linear",
            },
        )
        self._fill_margins(log_out)
        return log_out

    def _fill_margins(self, log_out):
        """Post-hoc per-sample minimum margins by kind on the common grid."""
        world = self.world
        traces = log_out.traces
        n = len(traces)
        times = [np.asarray(tr.times) for tr in traces]
        positions = [
            np.asarray(tr.states)[:, self.models[i].position_slice]
            for i, tr in enumerate(traces)
        ]
        for i, trace in enumerate(traces):
            trace.margins = []
            r_i = world.agent_radii[i]
            for row, t in enumerate(times[i]):
                p = positions[i][row]
                margins = {}
                sep, conn = np.inf, np.inf
                for j in range(n):
                    if j == i:
                        continue
                    idx = np.searchsorted(times[j], t)
                    idx = min(idx, len(times[j]) - 1)
                    p_j = positions[j][idx]
                    dist = float(np.linalg.norm(p - p_j))
                    if dist < world.sensing_ranges[i]:
                        sep = min(sep, dist - (r_i + world.agent_radii[j]))
                    if j in world.neighbor_sets[i]:
                        conn = min(conn, world.sensing_ranges[i] - dist)
                margins["inter-agent"] = sep
                margins["neighbor"] = conn
                obst = np.inf
                for obstacle in world.obstacles:
                    obst = min(obst, float(np.linalg.norm(p - obstacle.center))
                               - (r_i + obstacle.radius))
                margins["obstacle"] = obst
                margins["workspace"] = float(
                    world.workspace.radius - r_i
                    - np.linalg.norm(p - world.workspace.center))
                if self.models[i].pitch_index is not None:
                    pitch = float(np.asarray(trace.states[row])[self.models[i].pitch_index])
                    margins["pitch"] = float(np.pi / 2 - abs(pitch))
                else:
                    margins["pitch"] = np.inf
                trace.margins.append(margins)

    def run(self):
        """Iterate steps over the full duration; returns the trajectory log."""
        report = validate_initial(self.world, self.states, self.models)
        if not report.passed:
            raise ValueError("infeasible initial configuration: " + "; ".join(report.failures))
        self._bootstrap_board()
        self._log_initial()
        for i in range(len(self.models)):
            self._update_known_obstacles(i)
        for k in range(self._n_steps):
            self.step(k)
        return self.finalize_log()


def run(scenario):
    """Build a simulation from a scenario object and run it to completion."""
    return scenario.build_simulation().run()
