"""Trajectory optimization over coupled minimal coordinates.

The discrete search hands over an action sequence whose replayed rollout
only delta-matches the goal and may graze obstacles.  This module repairs
it with a single-shooting least-squares solve: the decision variables are
squashing-reparameterized actions plus one shared time step, and the
constraints are handled by an augmented-Lagrangian outer loop around a
Levenberg-damped Gauss-Newton inner loop.  States live in minimal
coordinates, so rod and cable lengths hold to machine precision at every
iterate and only the goal equality and obstacle clearance need
multipliers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .coupled import (
    CouplingSpec,
    minimal_to_stacked,
    mp_accel_batch,
    mp_minimal_dim,
    mp_step_batch,
    ur_minimal_dim,
    ur_rate_batch,
    ur_step_batch,
)
from .dynamics import MultirotorModel, RobotModel, UnicycleModel, wrap_angle
from .geometry import Environment
from .primitives import state_metric

__all__ = [
    "OptProblem",
    "OptResult",
    "optimize",
    "obstacle_penalty",
    "acceleration_term",
    "minimal_points",
    "minimal_metric",
    "element_clearances",
    "coupling_residual_max",
]

FLOW_FD_STEP = 1e-6  # flow-direction step for rod-chain accelerations
_JAC_H = 1e-6        # central-difference step for optimizer Jacobians

GOAL_TOL = 1e-4      # metric units at the final state
DEFECT_TOL = 1e-6    # per-step metric units
PENETRATION_TOL = 1e-6

# squashed time step: dt = dt0 * (1.25 + 0.75 * tanh(tau)) in (0.5, 2) * dt0
_TAU0 = math.atanh(-1.0 / 3.0)  # maps to exactly dt0


def _models_list(spec: CouplingSpec, models) -> list[RobotModel]:
    if isinstance(models, (UnicycleModel, MultirotorModel)):
        models = [models] * spec.n_robots
    models = list(models)
    if len(models) != spec.n_robots:
        raise ValueError("need one robot model per coupled robot")
    return models


# ---------------------------------------------------------------------------
# geometry of a minimal state: bodies, coupling capsules, clearances


def minimal_points(X: np.ndarray, spec: CouplingSpec):
    """Body centers and coupling-capsule endpoints for minimal states X (B, dim).

    Returns (bodies (B, N, 3), cap_a (B, E, 3), cap_b (B, E, 3)) where the
    capsules are the rods between consecutive robots or the cables from
    each robot down to the payload.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    b = len(X)
    n = spec.n_robots
    if spec.kind == "rods":
        alpha = X[:, 2 + n:]
        pos = np.zeros((b, n, 3))
        pos[:, 0, :2] = X[:, :2]
        for i in range(n - 1):
            pos[:, i + 1, 0] = pos[:, i, 0] + spec.lengths[i] * np.cos(alpha[:, i])
            pos[:, i + 1, 1] = pos[:, i, 1] + spec.lengths[i] * np.sin(alpha[:, i])
        return pos, pos[:, :-1].copy(), pos[:, 1:].copy()
    p0 = X[:, 0:3]
    s = X[:, 6:].reshape(b, n, 18)[..., 0:3]
    bodies = p0[:, None, :] - spec.lengths[None, :, None] * s
    return bodies, bodies.copy(), np.repeat(p0[:, None, :], n, axis=1)


def _bounds_clearance(env: Environment, pts: np.ndarray, radius: float) -> np.ndarray:
    d = env.dim
    lo = (pts[:, :d] - env.lo[:d]).min(axis=1)
    hi = (env.hi[:d] - pts[:, :d]).min(axis=1)
    return np.minimum(lo, hi) - radius


def element_clearances(env: Environment, spec: CouplingSpec, X: np.ndarray,
                       body_radius: float) -> np.ndarray:
    """Signed clearance of every contact element at every state.

    Returns (B, N + E): robot bodies first, then coupling capsules; each
    entry is the min of obstacle distance and workspace-boundary distance.
    """
    bodies, cap_a, cap_b = minimal_points(X, spec)
    b, n = bodies.shape[:2]
    e = cap_a.shape[1]
    out = np.empty((b, n + e))
    flat = bodies.reshape(-1, 3)
    d = np.minimum(env.sphere_clearances(flat, body_radius),
                   _bounds_clearance(env, flat, body_radius))
    out[:, :n] = d.reshape(b, n)
    fa = cap_a.reshape(-1, 3)
    fb = cap_b.reshape(-1, 3)
    d = env.capsule_clearances(fa, fb, spec.element_radius)
    d = np.minimum(d, _bounds_clearance(env, fa, spec.element_radius))
    d = np.minimum(d, _bounds_clearance(env, fb, spec.element_radius))
    out[:, n:] = d.reshape(b, e)
    return out


def _clearance_jacobians(env: Environment, spec: CouplingSpec, X: np.ndarray,
                         body_radius: float, h: float = _JAC_H) -> np.ndarray:
    """Central-difference d(element clearances)/d(state): (B, N+E, dim)."""
    X = np.atleast_2d(X)
    b, dim = X.shape
    pert = np.repeat(X[:, None, :], 2 * dim, axis=1)
    idx = np.arange(dim)
    pert[:, 2 * idx, idx] += h
    pert[:, 2 * idx + 1, idx] -= h
    d = element_clearances(env, spec, pert.reshape(-1, dim), body_radius)
    d = d.reshape(b, dim, 2, -1)
    return (d[:, :, 0] - d[:, :, 1]).transpose(0, 2, 1) / (2.0 * h)


def coupling_residual_max(X: np.ndarray, spec: CouplingSpec) -> float:
    """Worst deviation of reconstructed link lengths from their nominals."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(spec.lengths) == 0:
        return 0.0
    if spec.kind == "rods":
        bodies, _, _ = minimal_points(X, spec)
        seps = np.linalg.norm(np.diff(bodies, axis=1), axis=2)
        return float(np.max(np.abs(seps - spec.lengths)))
    n = spec.n_robots
    s = X[:, 6:].reshape(len(X), n, 18)[..., 0:3]
    return float(np.max(np.abs(spec.lengths * (np.linalg.norm(s, axis=2) - 1.0))))


def minimal_metric(a: np.ndarray, b: np.ndarray, spec: CouplingSpec, models) -> float:
    """Max over robots of the per-robot state metric between minimal states."""
    models = _models_list(spec, models)
    sa = minimal_to_stacked(np.asarray(a, dtype=float), spec)
    sb = minimal_to_stacked(np.asarray(b, dtype=float), spec)
    width = sa.size // spec.n_robots
    worst = 0.0
    for i, mod in enumerate(models):
        seg = slice(i * width, (i + 1) * width)
        worst = max(worst, state_metric(sa[seg], sb[seg], mod.kind))
    return worst


# ---------------------------------------------------------------------------
# cost terms exposed on their own


def _accel_stack(spec: CouplingSpec, models, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Acceleration of the coupled motion per row: (B, na).

    rods: time derivative of the projected-kinematics rates, differenced
    along the flow.  cables: payload linear acceleration stacked with the
    cable angular accelerations (the payload-side dynamic content).
    """
    if spec.kind == "rods":
        rate = ur_rate_batch(X, U, spec)
        rate2 = ur_rate_batch(X + FLOW_FD_STEP * rate, U, spec)
        return (rate2 - rate) / FLOW_FD_STEP
    p0dd, wdot = mp_accel_batch(X, U, spec, models)
    return np.concatenate([p0dd, wdot.reshape(len(X), -1)], axis=1)


def acceleration_term(x_m: np.ndarray, u: np.ndarray, spec: CouplingSpec, models):
    """Squared acceleration magnitude of the coupled motion: (value, d/dx, d/du)."""
    models = _models_list(spec, models)
    x = np.asarray(x_m, dtype=float)
    uf = np.asarray(u, dtype=float).ravel()
    a = _accel_stack(spec, models, x[None], uf[None])[0]
    value = float(a @ a)
    h = _JAC_H

    def _fd(base_x, base_u, width, perturb_x):
        pert = np.repeat((base_x if perturb_x else base_u)[None], 2 * width, axis=0)
        idx = np.arange(width)
        pert[2 * idx, idx] += h
        pert[2 * idx + 1, idx] -= h
        if perturb_x:
            acc = _accel_stack(spec, models, pert, np.repeat(base_u[None], 2 * width, axis=0))
        else:
            acc = _accel_stack(spec, models, np.repeat(base_x[None], 2 * width, axis=0), pert)
        v = np.sum(acc ** 2, axis=1)
        return (v[0::2] - v[1::2]) / (2.0 * h)

    return value, _fd(x, uf, x.size, True), _fd(x, uf, uf.size, False)


def obstacle_penalty(x_m: np.ndarray, env: Environment, spec: CouplingSpec,
                     margin: float = 0.01, body_radius: float | None = None):
    """Hinge-squared clearance penalty of one minimal state: (value, gradient).

    Sums max(0, margin - clearance)^2 over robot bodies and coupling
    capsules; the gradient chains the hinge derivative through a
    central-difference Jacobian of the clearances.
    """
    if body_radius is None:
        key = "unicycle" if spec.kind == "rods" else "multirotor"
        body_radius = env.body_radius.get(key, 0.1)
    x = np.asarray(x_m, dtype=float)
    d = element_clearances(env, spec, x[None], body_radius)[0]
    active = np.maximum(0.0, margin - d)
    value = float(active @ active)
    D = _clearance_jacobians(env, spec, x[None], body_radius)[0]
    return value, -2.0 * (active @ D)


# ---------------------------------------------------------------------------
# problem / result


@dataclass
class OptProblem:
    """Fixed-endpoint trajectory repair over coupled minimal coordinates."""

    cspec: CouplingSpec
    models: list
    start: np.ndarray
    goal: np.ndarray
    horizon: int
    dt0: float
    env: Environment
    beta1: float = 1e-2
    beta2: float = 1e-4
    margin: float = 0.01
    body_radius: float = 0.1

    def __post_init__(self):
        self.models = _models_list(self.cspec, self.models)
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2 steps")
        if self.dt0 <= 0:
            raise ValueError("nominal time step must be positive")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("cost weights must be nonnegative")
        if self.start.shape != (self.dim,) or self.goal.shape != (self.dim,):
            raise ValueError("start/goal do not match the minimal state dimension")
        lo = np.concatenate([m.u_lo for m in self.models])
        hi = np.concatenate([m.u_hi for m in self.models])
        self._u_mid = 0.5 * (hi + lo)
        self._u_span = 0.5 * (hi - lo)

    @property
    def dim(self) -> int:
        n = self.cspec.n_robots
        return ur_minimal_dim(n) if self.cspec.kind == "rods" else mp_minimal_dim(n)

    @property
    def action_dim(self) -> int:
        return int(sum(len(m.u_lo) for m in self.models))

    @property
    def accel_dim(self) -> int:
        n = self.cspec.n_robots
        return self.dim if self.cspec.kind == "rods" else 3 + 3 * n

    @property
    def n_elements(self) -> int:
        n = self.cspec.n_robots
        return n + (n - 1 if self.cspec.kind == "rods" else n)


@dataclass
class OptResult:
    """Optimizer output with residuals recomputed from the returned arrays."""

    states: np.ndarray
    actions: np.ndarray
    dt: float
    converged: bool
    defect: float
    goal_error: float
    penetration: float
    iterations: int
    merit: float
    status: str
    merit_histories: list = field(default_factory=list)
    iterate_coupling_residuals: list = field(default_factory=list)
    outer_log: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("state/action lengths are inconsistent")

    @property
    def duration(self) -> float:
        return float(len(self.actions) * self.dt)


# ---------------------------------------------------------------------------
# shooting machinery


def _squash(problem: OptProblem, w: np.ndarray) -> np.ndarray:
    return problem._u_mid + problem._u_span * np.tanh(w)


def _unsquash(problem: OptProblem, u: np.ndarray) -> np.ndarray:
    r = (u - problem._u_mid) / problem._u_span
    return np.arctanh(np.clip(r, -1.0 + 1e-12, 1.0 - 1e-12))


def _dt_of(problem: OptProblem, tau: float) -> float:
    return problem.dt0 * (1.25 + 0.75 * math.tanh(tau))


def _step_batch(problem: OptProblem, xb: np.ndarray, ub: np.ndarray, dt: float) -> np.ndarray:
    if problem.cspec.kind == "rods":
        return ur_step_batch(xb, ub, problem.cspec, dt)
    return mp_step_batch(xb, ub, problem.cspec, problem.models, dt)


def _rollout(problem: OptProblem, U: np.ndarray, dt: float) -> np.ndarray:
    X = np.empty((problem.horizon + 1, problem.dim))
    X[0] = problem.start
    for k in range(problem.horizon):
        X[k + 1] = _step_batch(problem, X[k][None], U[k][None], dt)[0]
    return X


def _goal_constraint(problem: OptProblem, x_T: np.ndarray) -> np.ndarray:
    c = x_T - problem.goal
    if problem.cspec.kind == "rods":
        c[2:] = wrap_angle(c[2:])
    return c


class _Shooter:
    """Residual stack and Jacobian of the squashed single-shooting problem.

    Residual layout: [time, actions, accelerations, goal equality,
    obstacle hinges] with the augmented-Lagrangian shifts baked in, so the
    merit is exactly 0.5 * ||r||^2 for fixed multipliers.
    """

    def __init__(self, problem: OptProblem, lam: np.ndarray, mu: np.ndarray,
                 rho_goal: float, rho_obs: float):
        self.p = problem
        self.lam = lam
        self.mu = mu
        self.rho_goal = rho_goal
        self.rho_obs = rho_obs
        self.nz = problem.horizon * problem.action_dim + 1
        T, m, na, nel = problem.horizon, problem.action_dim, problem.accel_dim, problem.n_elements
        self.o_act = 1
        self.o_acc = self.o_act + T * m
        self.o_goal = self.o_acc + T * na
        self.o_obs = self.o_goal + problem.dim
        self.n_rows = self.o_obs + T * nel

    def unpack(self, z: np.ndarray):
        T, m = self.p.horizon, self.p.action_dim
        return z[:T * m].reshape(T, m), float(z[T * m])

    def rollout(self, z: np.ndarray):
        w, tau = self.unpack(z)
        U = _squash(self.p, w)
        dt = _dt_of(self.p, tau)
        return _rollout(self.p, U, dt), U, dt

    def residuals(self, z: np.ndarray):
        """(r, X, U, dt), or None if the rollout left the finite floats."""
        p = self.p
        X, U, dt = self.rollout(z)
        if not np.all(np.isfinite(X)):
            return None
        T = p.horizon
        r = np.zeros(self.n_rows)
        r[0] = math.sqrt(T) * (dt - p.dt0)
        r[self.o_act:self.o_acc] = math.sqrt(p.beta1) * U.ravel()
        accel = _accel_stack(p.cspec, p.models, X[:T], U)
        r[self.o_acc:self.o_goal] = math.sqrt(p.beta2) * accel.ravel()
        c = _goal_constraint(p, X[T])
        r[self.o_goal:self.o_obs] = math.sqrt(self.rho_goal) * (c + self.lam / self.rho_goal)
        d = element_clearances(p.env, p.cspec, X[1:], p.body_radius)
        hinge = np.maximum(0.0, p.margin - d + self.mu / self.rho_obs)
        r[self.o_obs:] = math.sqrt(self.rho_obs) * hinge.ravel()
        return r, X, U, dt

    def _step_jacobians(self, X: np.ndarray, U: np.ndarray, dt: float):
        """Central-difference step Jacobians A (T,dim,dim), B (T,dim,m), C (T,dim)."""
        p = self.p
        T, dim, m = p.horizon, p.dim, p.action_dim
        h = _JAC_H
        x0, u0 = X[:T], U
        idx = np.arange(dim)
        xs = np.repeat(x0[:, None, :], 2 * dim, axis=1)
        xs[:, 2 * idx, idx] += h
        xs[:, 2 * idx + 1, idx] -= h
        us = np.repeat(u0[:, None, :], 2 * dim, axis=1)
        fx = _step_batch(p, xs.reshape(-1, dim), us.reshape(-1, m), dt).reshape(T, dim, 2, dim)
        A = (fx[:, :, 0] - fx[:, :, 1]).transpose(0, 2, 1) / (2.0 * h)
        idx = np.arange(m)
        us = np.repeat(u0[:, None, :], 2 * m, axis=1)
        us[:, 2 * idx, idx] += h
        us[:, 2 * idx + 1, idx] -= h
        xs = np.repeat(x0[:, None, :], 2 * m, axis=1)
        fu = _step_batch(p, xs.reshape(-1, dim), us.reshape(-1, m), dt).reshape(T, m, 2, dim)
        B = (fu[:, :, 0] - fu[:, :, 1]).transpose(0, 2, 1) / (2.0 * h)
        C = (_step_batch(p, x0, u0, dt + h) - _step_batch(p, x0, u0, dt - h)) / (2.0 * h)
        return A, B, C

    def _accel_jacobians(self, X: np.ndarray, U: np.ndarray):
        """Central-difference acceleration Jacobians (T,na,dim), (T,na,m)."""
        p = self.p
        T, dim, m, na = p.horizon, p.dim, p.action_dim, p.accel_dim
        h = _JAC_H
        x0, u0 = X[:T], U
        idx = np.arange(dim)
        xs = np.repeat(x0[:, None, :], 2 * dim, axis=1)
        xs[:, 2 * idx, idx] += h
        xs[:, 2 * idx + 1, idx] -= h
        us = np.repeat(u0[:, None, :], 2 * dim, axis=1)
        ax = _accel_stack(p.cspec, p.models, xs.reshape(-1, dim), us.reshape(-1, m))
        ax = ax.reshape(T, dim, 2, na)
        Da = (ax[:, :, 0] - ax[:, :, 1]).transpose(0, 2, 1) / (2.0 * h)
        idx = np.arange(m)
        us = np.repeat(u0[:, None, :], 2 * m, axis=1)
        us[:, 2 * idx, idx] += h
        us[:, 2 * idx + 1, idx] -= h
        xs = np.repeat(x0[:, None, :], 2 * m, axis=1)
        au = _accel_stack(p.cspec, p.models, xs.reshape(-1, dim), us.reshape(-1, m))
        au = au.reshape(T, m, 2, na)
        Db = (au[:, :, 0] - au[:, :, 1]).transpose(0, 2, 1) / (2.0 * h)
        return Da, Db

    def linearize(self, z: np.ndarray):
        """Residuals plus dense Jacobian via forward sensitivity propagation."""
        p = self.p
        T, dim, m, na, nel = p.horizon, p.dim, p.action_dim, p.accel_dim, p.n_elements
        w, tau = self.unpack(z)
        U = _squash(p, w)
        dt = _dt_of(p, tau)
        X = _rollout(p, U, dt)
        if not np.all(np.isfinite(X)):
            raise FloatingPointError("non-finite rollout at linearization point")
        du_dw = p._u_span * (1.0 - np.tanh(w) ** 2)
        ddt_dtau = 0.75 * p.dt0 * (1.0 - math.tanh(tau) ** 2)

        A, B, C = self._step_jacobians(X, U, dt)
        Da, Db = self._accel_jacobians(X, U)
        Dd = _clearance_jacobians(p.env, p.cspec, X[1:], p.body_radius)
        accel = _accel_stack(p.cspec, p.models, X[:T], U)
        dvals = element_clearances(p.env, p.cspec, X[1:], p.body_radius)

        sb1, sb2 = math.sqrt(p.beta1), math.sqrt(p.beta2)
        rg, ro = math.sqrt(self.rho_goal), math.sqrt(self.rho_obs)
        r = np.zeros(self.n_rows)
        J = np.zeros((self.n_rows, self.nz))

        r[0] = math.sqrt(T) * (dt - p.dt0)
        J[0, -1] = math.sqrt(T) * ddt_dtau
        flat = np.arange(T * m)
        r[self.o_act + flat] = sb1 * U.ravel()
        J[self.o_act + flat, flat] = sb1 * du_dw.ravel()

        S = np.zeros((dim, self.nz))
        for k in range(T):
            ra = self.o_acc + k * na
            r[ra:ra + na] = sb2 * accel[k]
            if p.beta2 > 0.0:
                blk = Da[k] @ S
                blk[:, k * m:(k + 1) * m] += Db[k] * du_dw[k][None, :]
                J[ra:ra + na] = sb2 * blk
            S = A[k] @ S
            S[:, k * m:(k + 1) * m] += B[k] * du_dw[k][None, :]
            S[:, -1] += C[k] * ddt_dtau
            g = p.margin - dvals[k] + self.mu[k] / self.rho_obs
            rr = self.o_obs + k * nel
            r[rr:rr + nel] = ro * np.maximum(0.0, g)
            act = np.flatnonzero(g > 0.0)
            if act.size:
                J[rr + act] = -ro * (Dd[k][act] @ S)
        c = _goal_constraint(p, X[T])
        r[self.o_goal:self.o_obs] = rg * (c + self.lam / self.rho_goal)
        J[self.o_goal:self.o_obs] = rg * S
        return r, J, X, U, dt


# ---------------------------------------------------------------------------
# solver


def _residual_report(problem: OptProblem, X: np.ndarray, U: np.ndarray, dt: float):
    """Recompute (defect, goal error, penetration) from the arrays alone."""
    defect = 0.0
    for k in range(problem.horizon):
        pred = _step_batch(problem, X[k][None], U[k][None], dt)[0]
        defect = max(defect, minimal_metric(pred, X[k + 1], problem.cspec, problem.models))
    goal_err = minimal_metric(X[-1], problem.goal, problem.cspec, problem.models)
    clear = element_clearances(problem.env, problem.cspec, X, problem.body_radius)
    pen = max(0.0, float(-np.min(clear)))
    return defect, goal_err, pen


def optimize(problem: OptProblem, X_warm, U_warm, max_iterations: int = 200,
             time_cap: float | None = None, max_outer: int = 12,
             inner_cap: int = 25) -> OptResult:
    """Repair a warm start into a feasible minimum-effort trajectory.

    X_warm is accepted for interface symmetry (and shape checking); the
    shooting parameterization reconstructs states from actions, which is
    what makes every iterate satisfy the coupling exactly.
    """
    t0 = time.perf_counter()
    p = problem
    T, m = p.horizon, p.action_dim
    U0 = np.asarray(U_warm, dtype=float)
    if U0.shape != (T, m):
        raise ValueError(f"warm-start actions must have shape {(T, m)}, got {U0.shape}")
    if X_warm is not None:
        X_warm = np.asarray(X_warm, dtype=float)
        if X_warm.shape != (T + 1, p.dim):
            raise ValueError(f"warm-start states must have shape {(T + 1, p.dim)}")
    z = np.concatenate([_unsquash(p, U0).ravel(), [_TAU0]])

    X = _rollout(p, _squash(p, _unsquash(p, U0)), p.dt0)
    bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
    if bad.size:
        # state k+1 is produced by stepping with action k
        raise ValueError(f"non-finite dynamics in the warm start at step {max(int(bad[0]) - 1, 0)}")

    lam = np.zeros(p.dim)
    mu = np.zeros((T, p.n_elements))
    rho_goal, rho_obs = 10.0, 10.0
    merit_histories: list[list[float]] = []
    outer_log: list[dict] = []
    coupling_log = [coupling_residual_max(X, p.cspec)]
    iterations = 0
    status = "stalled"
    prev_goal_viol = math.inf
    prev_obs_viol = math.inf
    best = None  # (score, merit, z)

    def out_of_time() -> bool:
        return time_cap is not None and time.perf_counter() - t0 > time_cap

    for _outer in range(max_outer):
        shooter = _Shooter(p, lam, mu, rho_goal, rho_obs)
        r, J, X, U, dt = shooter.linearize(z)
        merit = 0.5 * float(r @ r)
        hist = [merit]
        nu = 1e-3
        for _inner in range(inner_cap):
            if iterations >= max_iterations or out_of_time():
                break
            g = J.T @ r
            if np.linalg.norm(g, np.inf) < 1e-10:
                break
            JTJ = J.T @ J
            D = np.clip(np.diag(JTJ), 1e-12, None)
            accepted = False
            while iterations < max_iterations and not out_of_time():
                try:
                    dz = np.linalg.solve(JTJ + nu * np.diag(D), -g)
                except np.linalg.LinAlgError:
                    nu = min(nu * 10.0, 1e12)
                    continue
                cand = z + dz
                got = shooter.residuals(cand)
                iterations += 1
                merit_new = math.inf if got is None else 0.5 * float(got[0] @ got[0])
                if merit_new < merit:
                    z, merit = cand, merit_new
                    r, X, U, dt = got
                    hist.append(merit)
                    coupling_log.append(coupling_residual_max(X, p.cspec))
                    nu = max(nu / 3.0, 1e-10)
                    accepted = True
                    break
                nu = min(nu * 4.0, 1e12)
                if nu >= 1e12:
                    break
            if not accepted:
                break
            # plateaued subproblem: hand control back to the multiplier update
            if hist[-2] - hist[-1] <= 1e-8 * max(1.0, abs(hist[-2])):
                break
            _, J, X, U, dt = shooter.linearize(z)
        merit_histories.append(hist)

        c = _goal_constraint(p, X[T])
        dvals = element_clearances(p.env, p.cspec, X[1:], p.body_radius)
        g_obs = p.margin - dvals
        goal_viol = float(np.max(np.abs(c)))
        obs_viol = max(0.0, float(np.max(g_obs)))
        lam = lam + rho_goal * c
        mu = np.maximum(0.0, mu + rho_obs * g_obs)

        goal_err = minimal_metric(X[T], p.goal, p.cspec, p.models)
        clear_all = element_clearances(p.env, p.cspec, X, p.body_radius)
        pen = max(0.0, float(-np.min(clear_all)))
        outer_log.append({"goal_error": goal_err, "penetration": pen,
                          "goal_violation": goal_viol, "obstacle_violation": obs_viol,
                          "rho_goal": rho_goal, "rho_obs": rho_obs,
                          "merit": merit, "nu": nu, "dt": dt,
                          "inner_accepts": len(hist) - 1})
        score = max(goal_err / GOAL_TOL, pen / PENETRATION_TOL)
        if best is None or (score, merit) < best[:2]:
            best = (score, merit, z.copy())
        if goal_err <= GOAL_TOL and pen <= PENETRATION_TOL:
            status = "converged"
            break
        if iterations >= max_iterations:
            status = "iteration-cap"
            break
        if out_of_time():
            status = "time-cap"
            break
        if goal_viol > 0.25 * prev_goal_viol:
            rho_goal = min(rho_goal * 5.0, 1e8)
        if obs_viol > 0.25 * prev_obs_viol:
            rho_obs = min(rho_obs * 5.0, 1e8)
        prev_goal_viol, prev_obs_viol = goal_viol, obs_viol

    if status != "converged" and best is not None:
        z = best[2]
    shooter = _Shooter(p, lam, mu, rho_goal, rho_obs)
    got = shooter.residuals(z)
    r, X, U, dt = got
    defect, goal_err, pen = _residual_report(p, X, U, dt)
    converged = status == "converged"
    return OptResult(
        states=X, actions=U, dt=dt, converged=converged, defect=defect,
        goal_error=goal_err, penetration=pen, iterations=iterations,
        merit=0.5 * float(r @ r), status=status, merit_histories=merit_histories,
        iterate_coupling_residuals=coupling_log, outer_log=outer_log)
