"""Agent motion models, error-coordinate dynamics and fixed-step integration.

Two model families are provided: the planar unicycle and a 6-DOF Lagrangian
rigid body (position + Euler angles + generalized velocity). Both are wrapped
behind :class:`AgentModel`, whose vector field is vectorized over a leading
batch dimension so that finite-difference gradients of a rollout cost one
batched integration instead of one per perturbation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "SingularityError",
    "AgentModel",
    "ErrorDynamics",
    "DisturbanceSignal",
    "wrap_angle",
    "unicycle_field",
    "unicycle_model",
    "euler_rate_jacobian",
    "rigid_body_field",
    "rigid_body_model",
    "integrate",
    "rollout_zoh",
    "zoh_input",
    "estimate_lipschitz",
]


class SingularityError(ValueError):
    """Raised when the Euler-angle rate map is evaluated at cos(theta) = 0."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


def wrap_angle(a):
    """Wrap angles to (-pi, pi]. Works elementwise on arrays."""
    wrapped = np.mod(-np.asarray(a) + np.pi, 2.0 * np.pi)
    return -(wrapped - np.pi)


@dataclass(frozen=True)
class AgentModel:
    """Dynamics descriptor for one agent.

    Attributes:
        state_dim, input_dim: dimensions of state z and input u.
        vector_field: f(z, u) -> dz/dt, vectorized over leading batch dims.
        input_bound: norm bound on admissible inputs (positive).
        disturbance_bound: norm bound on the additive disturbance.
        lipschitz: Lipschitz constant of f in z, uniform over admissible u.
        position_slice: slice of the state holding the workspace position.
        angle_indices: state indices that live on the circle.
        pitch_index: index of the pitch angle for rigid bodies, else None.
    """

    state_dim: int
    input_dim: int
    vector_field: Callable[[np.ndarray, np.ndarray], np.ndarray]
    input_bound: float
    disturbance_bound: float
    lipschitz: float
    position_slice: slice = field(default=slice(0, 2))
    angle_indices: tuple = ()
    pitch_index: Optional[int] = None
    name: str = "agent"

    def __post_init__(self):
        if self.input_bound <= 0.0:
            raise ValueError("input bound must be positive")
        if self.disturbance_bound < 0.0:
            raise ValueError("disturbance bound must be nonnegative")
        if self.lipschitz <= 0.0:
            raise ValueError("Lipschitz constant must be positive")

    def wrap_state(self, z):
        """Wrap the circular components of a state (out of place)."""
        if not self.angle_indices:
            return z
        z = np.array(z, dtype=float, copy=True)
        z[..., list(self.angle_indices)] = wrap_angle(z[..., list(self.angle_indices)])
        return z


# --- unicycle -----------------------------------------------------------

def unicycle_field(state, control):
    """Planar unicycle: (dx, dy, dtheta) = (v cos(theta), v sin(theta), omega)."""
    state = np.asarray(state, dtype=float)
    control = np.asarray(control, dtype=float)
    theta = state[..., 2]
    v = control[..., 0]
    omega = control[..., 1]
    return np.stack([v * np.cos(theta), v * np.sin(theta), omega], axis=-1)


def unicycle_model(input_bound, disturbance_bound, lipschitz, name="unicycle"):
    return AgentModel(
        state_dim=3,
        input_dim=2,
        vector_field=unicycle_field,
        input_bound=input_bound,
        disturbance_bound=disturbance_bound,
        lipschitz=lipschitz,
        position_slice=slice(0, 2),
        angle_indices=(2,),
        pitch_index=None,
        name=name,
    )


# --- rigid body ---------------------------------------------------------

_SINGULARITY_TOL = 1e-9


def euler_rate_jacobian(q):
    """Block-diagonal 6x6 map from generalized velocity to pose rate.

    The lower-right block maps body angular velocity to Euler angle rates and
    is singular at cos(theta) = 0, which raises :class:`SingularityError`.
    """
    phi, theta, _ = (float(q[0]), float(q[1]), float(q[2]))
    if abs(math.cos(theta)) < _SINGULARITY_TOL or abs(theta) >= math.pi / 2 - _SINGULARITY_TOL:
        raise SingularityError(f"Euler-rate map singular at pitch {theta}")
    s_phi, c_phi = math.sin(phi), math.cos(phi)
    t_th, c_th = math.tan(theta), math.cos(theta)
    J = np.eye(6)
    J[3:, 3:] = np.array(
        [
            [1.0, s_phi * t_th, c_phi * t_th],
            [0.0, c_phi, -s_phi],
            [0.0, s_phi / c_th, c_phi / c_th],
        ]
    )
    return J


def rigid_body_field(state, control, inertia, coriolis, gravity):
    """Second-order Lagrangian dynamics in (pose, generalized velocity) form.

    state = [p (3), q (3 Euler), v (6)]; control is the 6D generalized force.
    Pose rate is J(q) v; the velocity rate solves the Lagrangian equation.
    The disturbance is injected by the integrator, not here.
    """
    state = np.asarray(state, dtype=float)
    control = np.asarray(control, dtype=float)
    if state.ndim > 1:
        flat_z = state.reshape(-1, 12)
        flat_u = np.broadcast_to(control, state.shape[:-1] + (6,)).reshape(-1, 6)
        out = np.stack(
            [rigid_body_field(z, u, inertia, coriolis, gravity) for z, u in zip(flat_z, flat_u)]
        )
        return out.reshape(state.shape)
    x, v = state[:6], state[6:]
    J = euler_rate_jacobian(x[3:])
    x_dot = J @ v
    M = np.asarray(inertia(x), dtype=float)
    eigvals = np.linalg.eigvalsh((M + M.T) / 2.0)
    if eigvals.min() <= 0.0:
        raise ValueError("inertia matrix must be positive definite")
    rhs = -np.asarray(coriolis(x, x_dot), dtype=float) @ v - np.asarray(gravity(x), dtype=float) + control
    v_dot = np.linalg.solve(M, rhs)
    return np.concatenate([x_dot, v_dot])


def rigid_body_model(inertia, coriolis, gravity, input_bound, disturbance_bound, lipschitz,
                     name="rigid-body"):
    def field(state, control):
        return rigid_body_field(state, control, inertia, coriolis, gravity)

    return AgentModel(
        state_dim=12,
        input_dim=6,
        vector_field=field,
        input_bound=input_bound,
        disturbance_bound=disturbance_bound,
        lipschitz=lipschitz,
        position_slice=slice(0, 3),
        angle_indices=(3, 5),
        pitch_index=4,
        name=name,
    )


# --- error dynamics -----------------------------------------------------

@dataclass(frozen=True)
class ErrorDynamics:
    """Error-coordinate dynamics g(e, u) = f(e + z_des, u) for a fixed reference.

    The reference carries zero desired velocity; circular state components of
    the error are computed with the shortest signed difference.
    """

    model: AgentModel
    z_des: np.ndarray

    def __post_init__(self):
        z_des = np.asarray(self.z_des, dtype=float)
        if z_des.shape != (self.model.state_dim,):
            raise ValueError(f"reference shape {z_des.shape} does not match state dim")
        object.__setattr__(self, "z_des", z_des)

    def field(self, e, u):
        return self.model.vector_field(np.asarray(e) + self.z_des, u)

    def error_of(self, z):
        e = np.asarray(z, dtype=float) - self.z_des
        if self.model.angle_indices:
            idx = list(self.model.angle_indices)
            e[..., idx] = wrap_angle(e[..., idx])
        return e

    def state_of(self, e):
        return self.model.wrap_state(np.asarray(e, dtype=float) + self.z_des)


@dataclass
class DisturbanceSignal:
    """Bounded additive disturbance. Output is clipped to the stated bound."""

    generator: Callable[[np.ndarray, float], np.ndarray]
    bound: float
    _clip_warned: bool = field(default=False, repr=False)

    def sample(self, z, t):
        w = np.asarray(self.generator(z, t), dtype=float)
        norm = np.linalg.norm(w)
        if norm > self.bound:
            if not self._clip_warned:
                log.warning(
                    "disturbance generator exceeded bound (%.4g > %.4g); clipping",
                    norm, self.bound,
                )
                self._clip_warned = True
            if norm > 0.0:
                w = w * (self.bound / norm)
        return w


# --- integration --------------------------------------------------------

def _rk4_step(deriv, t, z, dt):
    k1 = deriv(t, z)
    k2 = deriv(t + 0.5 * dt, z + 0.5 * dt * k1)
    k3 = deriv(t + 0.5 * dt, z + 0.5 * dt * k2)
    k4 = deriv(t + dt, z + dt * k3)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(model, z0, input_signal, disturbance, t0, t1, step):
    """Fixed-step RK4 integration of dz/dt = f(z, u(t)) [+ w(z, t)].

    `input_signal` is a callable t -> u (zero-order-hold signals are plain
    piecewise-constant callables). With `disturbance=None` the nominal system
    is integrated. Returns (times, states) including both endpoints; circular
    state components are wrapped after each full step.

    Raises:
        ValueError: if t1 < t0 or step does not divide the interval.
        SingularityError: tagged with the failure time if the field becomes
            singular mid-trajectory.
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    span = t1 - t0
    n_steps = int(round(span / step))
    if abs(n_steps * step - span) > 1e-9:
        raise ValueError(f"step {step} does not divide interval {span}")

    def deriv(t, z):
        dz = model.vector_field(z, input_signal(t))
        if disturbance is not None:
            dz = dz + disturbance.sample(z, t)
        return dz

    z = model.wrap_state(np.asarray(z0, dtype=float))
    times = t0 + step * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, model.state_dim))
    states[0] = z
    for k in range(n_steps):
        try:
            z = _rk4_step(deriv, times[k], z, step)
        except SingularityError as exc:
            raise SingularityError(str(exc), time=times[k]) from exc
        z = model.wrap_state(z)
        states[k + 1] = z
    return times, states


def rollout_zoh(field, e0, u_seq, stage_time, substeps):
    """Batched nominal rollout under zero-order-hold inputs.

    Args:
        field: batched vector field g(e, u).
        e0: initial states, shape (..., n).
        u_seq: stage inputs, shape (..., N, m).
        stage_time: duration of each stage.
        substeps: RK4 substeps per stage.

    Returns:
        states at all substep boundaries, shape (..., N * substeps + 1, n).
    """
    e0 = np.asarray(e0, dtype=float)
    u_seq = np.asarray(u_seq, dtype=float)
    n_stage = u_seq.shape[-2]
    dt = stage_time / substeps
    out = np.empty(e0.shape[:-1] + (n_stage * substeps + 1, e0.shape[-1]))
    e = e0
    out[..., 0, :] = e
    idx = 1
    for k in range(n_stage):
        u = u_seq[..., k, :]
        for _ in range(substeps):
            k1 = field(e, u)
            k2 = field(e + 0.5 * dt * k1, u)
            k3 = field(e + 0.5 * dt * k2, u)
            k4 = field(e + dt * k3, u)
            e = e + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            out[..., idx, :] = e
            idx += 1
    return out


def zoh_input(u_seq, stage_time, t0=0.0):
    """Piecewise-constant input signal over stages of length `stage_time`."""
    u_seq = np.asarray(u_seq, dtype=float)
    n_stage = u_seq.shape[0]

    def signal(t):
        k = int(math.floor((t - t0) / stage_time + 1e-12))
        return u_seq[min(max(k, 0), n_stage - 1)]

    return signal


def estimate_lipschitz(model, state_low, state_high, sample_count=10_000, rng_seed=0,
                       safety_factor=1.1):
    """Empirical Lipschitz constant of the vector field over a state box.

    Samples state pairs and admissible inputs and returns the largest observed
    difference quotient, inflated by `safety_factor`. Deterministic per seed.
    """
    low = np.asarray(state_low, dtype=float)
    high = np.asarray(state_high, dtype=float)
    if low.shape != (model.state_dim,) or high.shape != (model.state_dim,):
        raise ValueError("region bounds must match the state dimension")
    if np.any(high <= low):
        raise ValueError("degenerate sampling region")
    if sample_count < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(rng_seed)
    z_a = rng.uniform(low, high, size=(sample_count, model.state_dim))
    z_b = rng.uniform(low, high, size=(sample_count, model.state_dim))
    u_dir = rng.normal(size=(sample_count, model.input_dim))
    u_dir /= np.linalg.norm(u_dir, axis=1, keepdims=True)
    u_mag = rng.uniform(size=(sample_count, 1)) * model.input_bound
    u = u_dir * u_mag
    df = model.vector_field(z_a, u) - model.vector_field(z_b, u)
    dz = np.linalg.norm(z_a - z_b, axis=1)
    good = dz > 1e-12
    ratios = np.linalg.norm(df[good], axis=1) / dz[good]
    if ratios.size == 0:
        return 0.0
    return safety_factor * float(ratios.max())
