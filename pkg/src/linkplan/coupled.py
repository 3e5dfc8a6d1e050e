"""Coupled-team models in minimal coordinates.

Two couplings are supported:

* ``rods``  — N unicycles in a line, consecutive robots joined by rigid
  rods.  Minimal state ``(px1, py1, theta_1..theta_N, alpha_1..alpha_{N-1})``
  where ``alpha_i`` is the orientation of rod i; follower positions are
  reconstructed along the chain, so rod lengths are exact by construction.
* ``cables`` — N multirotors carrying a point-mass payload on taut cables
  (modeled as rigid, massless rods).  Minimal state
  ``(p0, v0, s_i, w_i, R_i, Omega_i ...)`` with unit cable directions
  ``s_i`` pointing from each UAV to the payload and cable angular
  velocities ``w_i`` orthogonal to ``s_i``.

The module also provides the stacked <-> minimal conversions used between
the discrete search (independent robots) and the optimizer (coupled
system), and the payload-position estimator that recovers ``p0`` from
robot positions alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (
    GRAVITY,
    E3,
    MultirotorModel,
    exp_so3_batch,
    mr_state,
    mr_unpack,
    wrap_angle,
)
from .geometry import Capsule

__all__ = [
    "CouplingSpec",
    "ur_minimal_dim",
    "ur_positions",
    "ur_stacked_state",
    "ur_constraint_jacobian",
    "ur_input_matrix",
    "ur_projected_kinematics",
    "ur_rate_batch",
    "ur_step",
    "ur_step_batch",
    "rod_angle_and_rate",
    "mp_minimal_dim",
    "mp_pack",
    "mp_unpack",
    "mp_dynamics",
    "mp_accelerations",
    "mp_accel_batch",
    "mp_hover_state",
    "mp_track_reference",
    "mp_step",
    "mp_step_batch",
    "minimal_to_stacked",
    "stacked_to_minimal",
    "estimate_payload",
    "coupling_lengths",
    "element_capsules",
]


@dataclass(frozen=True)
class CouplingSpec:
    """Physical link layout: rod chain ("rods") or cable star ("cables")."""

    kind: str
    lengths: np.ndarray
    payload_mass: float = 0.0
    element_radius: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "lengths", np.asarray(self.lengths, dtype=float))
        if self.kind not in ("rods", "cables"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if np.any(self.lengths <= 0):
            raise ValueError("coupling lengths must be > 0")
        if self.kind == "cables" and self.payload_mass <= 0:
            raise ValueError("cable coupling needs a positive payload mass")

    @property
    def n_robots(self) -> int:
        return len(self.lengths) + 1 if self.kind == "rods" else len(self.lengths)


# ===========================================================================
# rod-linked unicycle chain
# ===========================================================================

def ur_minimal_dim(n: int) -> int:
    return 2 + n + (n - 1)


def ur_positions(x_m: np.ndarray, spec: CouplingSpec) -> np.ndarray:
    """Robot positions (N, 2) reconstructed along the rod chain."""
    n = spec.n_robots
    alpha = x_m[2 + n:]
    pos = np.empty((n, 2))
    pos[0] = x_m[:2]
    for i in range(n - 1):
        pos[i + 1] = pos[i] + spec.lengths[i] * np.array([np.cos(alpha[i]), np.sin(alpha[i])])
    return pos


def ur_stacked_state(x_m: np.ndarray, spec: CouplingSpec) -> np.ndarray:
    """Stacked (x, y, theta) per robot, shape (3N,)."""
    n = spec.n_robots
    pos = ur_positions(x_m, spec)
    out = np.empty(3 * n)
    out[0::3] = pos[:, 0]
    out[1::3] = pos[:, 1]
    out[2::3] = x_m[2:2 + n]
    return out


def ur_constraint_jacobian(x_stacked: np.ndarray, spec: CouplingSpec) -> np.ndarray:
    """Rate form of the rod-length constraints: rows of d(dx^2+dy^2)/dq."""
    n = spec.n_robots
    A = np.zeros((n - 1, 3 * n))
    for i in range(n - 1):
        dx = x_stacked[3 * (i + 1)] - x_stacked[3 * i]
        dy = x_stacked[3 * (i + 1) + 1] - x_stacked[3 * i + 1]
        if dx * dx + dy * dy < 1e-18:
            raise ValueError("coincident robots: constraint Jacobian is rank deficient")
        A[i, 3 * i] = -2.0 * dx
        A[i, 3 * i + 1] = -2.0 * dy
        A[i, 3 * (i + 1)] = 2.0 * dx
        A[i, 3 * (i + 1) + 1] = 2.0 * dy
    return A


def ur_input_matrix(x_stacked: np.ndarray, n: int) -> np.ndarray:
    """Block-diagonal map from (v, w) per robot to unconstrained rates."""
    B = np.zeros((3 * n, 2 * n))
    th = x_stacked[2::3]
    B[0::3, 0::2] = np.diag(np.cos(th))
    B[1::3, 0::2] = np.diag(np.sin(th))
    B[2::3, 1::2] = np.eye(n)
    return B


def rod_angle_and_rate(p_i, p_j, pdot_i, pdot_j, length: float):
    """Orientation of the rod from robot i to robot j and its angular rate."""
    dx = p_j[0] - p_i[0]
    dy = p_j[1] - p_i[1]
    if dx * dx + dy * dy < 1e-18:
        raise ValueError("coincident rod endpoints")
    alpha = np.arctan2(dy, dx)
    ddx = pdot_j[0] - pdot_i[0]
    ddy = pdot_j[1] - pdot_i[1]
    alpha_dot = (dx * ddy - dy * ddx) / length**2
    return alpha, alpha_dot


def ur_projected_kinematics(x_m: np.ndarray, u: np.ndarray, spec: CouplingSpec) -> np.ndarray:
    """Minimal-coordinate rates under actions u (N, 2) or flat (2N,).

    Unconstrained per-robot rates are projected onto the null space of the
    rod-length constraint rates, so the returned flow preserves lengths.
    """
    n = spec.n_robots
    u = np.asarray(u, dtype=float).reshape(2 * n)
    q = ur_stacked_state(x_m, spec)
    A = ur_constraint_jacobian(q, spec)
    B = ur_input_matrix(q, n)
    AB = A @ B
    qdot = B @ u - A.T @ np.linalg.solve(A @ A.T, AB @ u)
    out = np.empty_like(x_m)
    out[0:2] = qdot[0:2]
    out[2:2 + n] = qdot[2::3]
    for i in range(n - 1):
        dx = q[3 * (i + 1)] - q[3 * i]
        dy = q[3 * (i + 1) + 1] - q[3 * i + 1]
        ddx = qdot[3 * (i + 1)] - qdot[3 * i]
        ddy = qdot[3 * (i + 1) + 1] - qdot[3 * i + 1]
        out[2 + n + i] = (dx * ddy - dy * ddx) / spec.lengths[i] ** 2
    return out


def ur_step(x_m: np.ndarray, u: np.ndarray, spec: CouplingSpec, dt: float) -> np.ndarray:
    """Euler step in minimal coordinates; angles wrapped, lengths exact."""
    rate = ur_projected_kinematics(x_m, u, spec)
    out = x_m + dt * rate
    out[2:] = wrap_angle(out[2:])
    return out


def ur_rate_batch(x: np.ndarray, u: np.ndarray, spec: CouplingSpec) -> np.ndarray:
    """Vectorized minimal-coordinate rates: x (B, dim), u (B, 2N) -> (B, dim)."""
    b = len(x)
    n = spec.n_robots
    th = x[:, 2:2 + n]
    alpha = x[:, 2 + n:]
    # chain positions (B, N, 2)
    pos = np.empty((b, n, 2))
    pos[:, 0] = x[:, :2]
    for i in range(n - 1):
        pos[:, i + 1, 0] = pos[:, i, 0] + spec.lengths[i] * np.cos(alpha[:, i])
        pos[:, i + 1, 1] = pos[:, i, 1] + spec.lengths[i] * np.sin(alpha[:, i])
    # input blocks (B, 3N, 2N); constraint rows (B, N-1, 3N)
    B = np.zeros((b, 3 * n, 2 * n))
    for i in range(n):
        B[:, 3 * i, 2 * i] = np.cos(th[:, i])
        B[:, 3 * i + 1, 2 * i] = np.sin(th[:, i])
        B[:, 3 * i + 2, 2 * i + 1] = 1.0
    Bu = np.einsum("bij,bj->bi", B, u)
    if n > 1:
        A = np.zeros((b, n - 1, 3 * n))
        for i in range(n - 1):
            dx = pos[:, i + 1, 0] - pos[:, i, 0]
            dy = pos[:, i + 1, 1] - pos[:, i, 1]
            A[:, i, 3 * i] = -2.0 * dx
            A[:, i, 3 * i + 1] = -2.0 * dy
            A[:, i, 3 * (i + 1)] = 2.0 * dx
            A[:, i, 3 * (i + 1) + 1] = 2.0 * dy
        ABu = np.einsum("bij,bj->bi", A, Bu)
        lam = np.linalg.solve(A @ np.swapaxes(A, 1, 2), ABu[..., None])[..., 0]
        qdot = Bu - np.einsum("bji,bj->bi", A, lam)
    else:
        qdot = Bu
    rate = np.empty_like(x)
    rate[:, 0:2] = qdot[:, 0:2]
    rate[:, 2:2 + n] = qdot[:, 2::3]
    for i in range(n - 1):
        dx = pos[:, i + 1, 0] - pos[:, i, 0]
        dy = pos[:, i + 1, 1] - pos[:, i, 1]
        ddx = qdot[:, 3 * (i + 1)] - qdot[:, 3 * i]
        ddy = qdot[:, 3 * (i + 1) + 1] - qdot[:, 3 * i + 1]
        rate[:, 2 + n + i] = (dx * ddy - dy * ddx) / spec.lengths[i] ** 2
    return rate


def ur_step_batch(x: np.ndarray, u: np.ndarray, spec: CouplingSpec, dt: float) -> np.ndarray:
    """Vectorized ur_step over a batch: x (B, dim), u (B, 2N)."""
    rate = ur_rate_batch(x, np.asarray(u, dtype=float), spec)
    out = x + dt * rate
    out[:, 2:] = wrap_angle(out[:, 2:])
    return out


# ===========================================================================
# cable-slung payload team
# ===========================================================================

def mp_minimal_dim(n: int) -> int:
    return 6 + 18 * n


def mp_pack(p0, v0, s, w, R, Om) -> np.ndarray:
    """Assemble the flat minimal state from components (s, w, Om: (N,3); R: (N,3,3))."""
    n = len(s)
    x = np.empty(mp_minimal_dim(n))
    x[0:3] = p0
    x[3:6] = v0
    for i in range(n):
        o = 6 + 18 * i
        x[o:o + 3] = s[i]
        x[o + 3:o + 6] = w[i]
        x[o + 6:o + 15] = np.asarray(R[i]).reshape(9)
        x[o + 15:o + 18] = Om[i]
    return x


def mp_unpack(x: np.ndarray, n: int):
    p0 = x[0:3]
    v0 = x[3:6]
    rob = x[6:].reshape(n, 18)
    s = rob[:, 0:3]
    w = rob[:, 3:6]
    R = rob[:, 6:15].reshape(n, 3, 3)
    Om = rob[:, 15:18]
    return p0, v0, s, w, R, Om


def _mp_params(spec: CouplingSpec, models) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-robot (mass, inertia (N,3), actuation (N,4,4)) arrays."""
    n = spec.n_robots
    if isinstance(models, MultirotorModel):
        models = [models] * n
    if len(models) != n:
        raise ValueError("need one multirotor model per cable")
    m = np.array([mod.mass for mod in models])
    J = np.stack([mod.inertia for mod in models])
    act = np.stack([mod.actuation_matrix for mod in models])
    return m, J, act


def _mp_accels(p0, v0, s, w, R, Om, u, spec, m, J, act):
    """Batched accelerations: returns (p0ddot, wdot, Omdot), each (B, ..., 3).

    The payload equation balances the cable-parallel components of the
    thrusts against gravity and the centrifugal cable terms:
        M_t (p0ddot + g e3) = sum_i (f_i (s_i s_i^T) R_i e3 - m_i l_i |w_i|^2 s_i)
    with M_t = m_payload I + sum_i m_i s_i s_i^T.  Cable swing follows from
        l_i wdot_i = s_i x (p0ddot + g e3) - (f_i / m_i) s_i x R_i e3.
    Eliminating the (axial) rod forces from per-body Newton equations
    yields exactly these projections; total linear momentum is conserved.
    """
    lengths = spec.lengths
    f_T = np.einsum("nj,bnj->bn", act[:, 0], u)
    torque = np.einsum("nij,bnj->bni", act[:, 1:], u)
    thrust_w = f_T[..., None] * R[..., 2]  # world-frame thrust vectors (B,N,3)
    Mt = spec.payload_mass * np.eye(3) + np.einsum("n,bni,bnj->bij", m, s, s)
    axial = np.einsum("bni,bni->bn", s, thrust_w)
    rhs = np.einsum("bn,bni->bi", axial, s)
    w2 = np.einsum("bni,bni->bn", w, w)
    rhs -= np.einsum("n,bn,bni->bi", m * lengths, w2, s)
    y = np.linalg.solve(Mt, rhs[..., None])[..., 0]  # p0ddot + g*e3
    p0ddot = y - GRAVITY * E3
    wdot = (np.cross(s, y[:, None, :]) - np.cross(s, thrust_w) / m[:, None]) / lengths[:, None]
    JOm = J * Om
    Omdot = (np.cross(JOm, Om) + torque) / J
    return p0ddot, wdot, Omdot


def mp_accelerations(x_m: np.ndarray, u: np.ndarray, spec: CouplingSpec, models):
    """Payload, cable, and body angular accelerations for one state."""
    n = spec.n_robots
    m, J, act = _mp_params(spec, models)
    p0, v0, s, w, R, Om = mp_unpack(x_m, n)
    p0dd, wdot, Omdot = _mp_accels(
        p0[None], v0[None], s[None], w[None], R[None], Om[None],
        np.asarray(u, dtype=float).reshape(1, n, 4), spec, m, J, act)
    return p0dd[0], wdot[0], Omdot[0]


def mp_accel_batch(x: np.ndarray, u: np.ndarray, spec: CouplingSpec, models):
    """Batched payload/cable accelerations: x (B, dim), u (B, 4N) or (B, N, 4).

    Returns (p0ddot (B, 3), wdot (B, N, 3)).
    """
    b = len(x)
    n = spec.n_robots
    m, J, act = _mp_params(spec, models)
    u = np.asarray(u, dtype=float).reshape(b, n, 4)
    rob = x[:, 6:].reshape(b, n, 18)
    p0dd, wdot, _ = _mp_accels(
        x[:, 0:3], x[:, 3:6], rob[..., 0:3], rob[..., 3:6],
        rob[..., 6:15].reshape(b, n, 3, 3), rob[..., 15:18], u, spec, m, J, act)
    return p0dd, wdot


def _rotation_to(d: np.ndarray) -> np.ndarray:
    """Minimal rotation taking e3 onto direction d."""
    from .dynamics import exp_so3

    d = np.asarray(d, dtype=float)
    d = d / np.linalg.norm(d)
    axis = np.cross(E3, d)
    na = np.linalg.norm(axis)
    if na < 1e-12:
        return np.eye(3) if d[2] > 0 else np.diag([1.0, -1.0, -1.0])
    return exp_so3(axis / na * np.arctan2(na, d[2]))


def mp_hover_state(spec: CouplingSpec, models, payload, directions):
    """Static-equilibrium minimal state and hover actions for a cable team.

    directions (N, 3) are cable directions robot -> payload (normalized
    here).  Tensions come from the payload force balance, per-robot
    attitudes tilt the thrust against cable pull and gravity.  Returns
    (x_m, u (N, 4)); raises if the formation cannot balance the payload
    with taut cables.
    """
    n = spec.n_robots
    m, _, act = _mp_params(spec, models)
    s = np.asarray(directions, dtype=float)
    if s.shape != (n, 3):
        raise ValueError(f"need {n} cable directions")
    s = s / np.linalg.norm(s, axis=1, keepdims=True)
    rhs = -spec.payload_mass * GRAVITY * E3
    tension = np.linalg.lstsq(s.T, rhs, rcond=None)[0]
    if np.linalg.norm(s.T @ tension - rhs) > 1e-9:
        raise ValueError("cable formation cannot balance the payload")
    if np.any(tension <= 0):
        raise ValueError("formation needs slack or pushing cables")
    thrusts = m[:, None] * GRAVITY * E3 - tension[:, None] * s
    R = np.stack([_rotation_to(t) for t in thrusts])
    u = np.stack([
        np.linalg.solve(act[i], [np.linalg.norm(thrusts[i]), 0.0, 0.0, 0.0])
        for i in range(n)
    ])
    p0 = np.asarray(payload, dtype=float)
    x = mp_pack(p0, np.zeros(3), s, np.zeros((n, 3)), R, np.zeros((n, 3)))
    return x, u


def _vee(M: np.ndarray) -> np.ndarray:
    return 0.5 * np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])


def mp_track_reference(X_ref: np.ndarray, spec: CouplingSpec, models, dt: float,
                       kp: float = 8.0, kv: float = 4.0, kr: float = 8e-3,
                       kw: float = 6e-4):
    """Closed-loop re-roll of a (possibly inconsistent) coupled reference.

    A geometric position/attitude tracker follows the per-robot positions
    and velocities implied by `X_ref` under the true coupled dynamics,
    using the instantaneous static tension split as feedforward.  Returns
    (X, U) where X is the exact rollout of U, so the pair is a bounded
    warm start even when the reference stitches discontinuous pieces.
    """
    n = spec.n_robots
    m, _, act = _mp_params(spec, models)
    models_l = list(models) if isinstance(models, (list, tuple)) else [models] * n
    X_ref = np.asarray(X_ref, dtype=float)
    steps = len(X_ref) - 1
    x = X_ref[0].copy()
    X = np.empty_like(X_ref)
    X[0] = x
    U = np.empty((steps, 4 * n))
    for k in range(steps):
        p0, v0, s, w, R, Om = mp_unpack(x, n)
        rp0, rv0, rs, rw, _, _ = mp_unpack(X_ref[k + 1], n)
        tension = np.linalg.lstsq(s.T, -spec.payload_mass * GRAVITY * E3,
                                  rcond=None)[0]
        u = np.empty((n, 4))
        for i in range(n):
            li = spec.lengths[i]
            p_i = p0 - li * s[i]
            v_i = v0 - li * np.cross(w[i], s[i])
            pr_i = rp0 - li * rs[i]
            vr_i = rv0 - li * np.cross(rw[i], rs[i])
            F = (m[i] * (kp * (pr_i - p_i) + kv * (vr_i - v_i) + GRAVITY * E3)
                 - tension[i] * s[i])
            if np.linalg.norm(F) < 1e-9:
                F = m[i] * GRAVITY * E3
            f = float(F @ R[i, :, 2])
            Rd = _rotation_to(F)
            tau = -kr * _vee(Rd.T @ R[i] - R[i].T @ Rd) - kw * Om[i]
            u[i] = np.clip(np.linalg.solve(act[i], np.concatenate([[f], tau])),
                           models_l[i].u_lo, models_l[i].u_hi)
        x = mp_step(x, u.ravel(), spec, models_l, dt)
        U[k] = u.ravel()
        X[k + 1] = x
    return X, U


def mp_dynamics(x_m: np.ndarray, u: np.ndarray, spec: CouplingSpec, models) -> np.ndarray:
    """Continuous-time rates of the full minimal state (flat, state-aligned)."""
    n = spec.n_robots
    p0, v0, s, w, R, Om = mp_unpack(x_m, n)
    p0dd, wdot, Omdot = mp_accelerations(x_m, u, spec, models)
    sdot = np.cross(w, s)
    Rdot = R @ _hat_batch(Om)
    return mp_pack(v0, p0dd, sdot, wdot, Rdot, Omdot)


def _hat_batch(w: np.ndarray) -> np.ndarray:
    n = len(w)
    W = np.zeros((n, 3, 3))
    W[:, 0, 1] = -w[:, 2]
    W[:, 0, 2] = w[:, 1]
    W[:, 1, 0] = w[:, 2]
    W[:, 1, 2] = -w[:, 0]
    W[:, 2, 0] = -w[:, 1]
    W[:, 2, 1] = w[:, 0]
    return W


def mp_step_batch(x: np.ndarray, u: np.ndarray, spec: CouplingSpec, models, dt: float) -> np.ndarray:
    """Structure-preserving semi-implicit step over a batch.

    x: (B, 6+18N); u: (B, N, 4) or (B, 4N).  Cable directions are rotated
    on the sphere and angular velocities re-orthogonalized, so the unit
    norm and orthogonality invariants hold to machine precision.
    """
    b = len(x)
    n = spec.n_robots
    m, J, act = _mp_params(spec, models)
    u = np.asarray(u, dtype=float).reshape(b, n, 4)
    p0 = x[:, 0:3]
    v0 = x[:, 3:6]
    rob = x[:, 6:].reshape(b, n, 18)
    s = rob[..., 0:3]
    w = rob[..., 3:6]
    R = rob[..., 6:15].reshape(b, n, 3, 3)
    Om = rob[..., 15:18]

    p0dd, wdot, Omdot = _mp_accels(p0, v0, s, w, R, Om, u, spec, m, J, act)
    v0n = v0 + dt * p0dd
    p0n = p0 + dt * v0n
    wn = w + dt * wdot
    sn = np.einsum("bnij,bnj->bni", exp_so3_batch((dt * wn).reshape(-1, 3)).reshape(b, n, 3, 3), s)
    wn = wn - np.einsum("bni,bni->bn", wn, sn)[..., None] * sn
    Omn = Om + dt * Omdot
    Rn = R @ exp_so3_batch((dt * Omn).reshape(-1, 3)).reshape(b, n, 3, 3)

    out = np.empty_like(x)
    out[:, 0:3] = p0n
    out[:, 3:6] = v0n
    orob = out[:, 6:].reshape(b, n, 18)
    orob[..., 0:3] = sn
    orob[..., 3:6] = wn
    orob[..., 6:15] = Rn.reshape(b, n, 9)
    orob[..., 15:18] = Omn
    return out


def mp_step(x_m: np.ndarray, u: np.ndarray, spec: CouplingSpec, models, dt: float) -> np.ndarray:
    n = spec.n_robots
    return mp_step_batch(x_m[None], np.asarray(u, dtype=float).reshape(1, n, 4), spec, models, dt)[0]


# ===========================================================================
# stacked <-> minimal conversion
# ===========================================================================

def minimal_to_stacked(x_m: np.ndarray, spec: CouplingSpec) -> np.ndarray:
    """Per-robot states from the minimal representation.

    rods: (3N,) unicycle states.  cables: (18N,) multirotor states with
    p_i = p0 - l_i s_i and v_i = v0 - l_i (w_i x s_i).
    """
    if spec.kind == "rods":
        return ur_stacked_state(x_m, spec)
    n = spec.n_robots
    p0, v0, s, w, R, Om = mp_unpack(x_m, n)
    out = np.empty(18 * n)
    sdot = np.cross(w, s)
    for i in range(n):
        p_i = p0 - spec.lengths[i] * s[i]
        v_i = v0 - spec.lengths[i] * sdot[i]
        out[18 * i:18 * (i + 1)] = mr_state(p_i, R[i], v_i, Om[i])
    return out


def coupling_lengths(x_m: np.ndarray, spec: CouplingSpec) -> np.ndarray:
    """Actual link lengths measured on the reconstructed robot positions."""
    if spec.kind == "rods":
        pos = ur_positions(x_m, spec)
        return np.linalg.norm(np.diff(pos, axis=0), axis=1)
    n = spec.n_robots
    p0, _, s, _, _, _ = mp_unpack(x_m, n)
    p_rob = p0 - spec.lengths[:, None] * s
    return np.linalg.norm(p0 - p_rob, axis=1)


def element_capsules(spec: CouplingSpec, positions: np.ndarray, payload=None) -> list[Capsule]:
    """Collision shapes of the physical links (rods or cables)."""
    shapes = []
    if spec.kind == "rods":
        for i in range(spec.n_robots - 1):
            a = np.array([positions[i][0], positions[i][1], 0.0])
            b = np.array([positions[i + 1][0], positions[i + 1][1], 0.0])
            shapes.append(Capsule(a, b, spec.element_radius))
    else:
        if payload is None:
            raise ValueError("cable shapes need the payload position")
        p0 = np.asarray(payload, dtype=float)
        for i in range(spec.n_robots):
            shapes.append(Capsule(np.asarray(positions[i], dtype=float), p0, spec.element_radius))
    return shapes


def stacked_to_minimal(states: np.ndarray, spec: CouplingSpec, dt: float,
                       mu: float = 0.0, lam: float = 0.0, prev_payload=None):
    """Convert a stacked trajectory (T, per-robot states) to minimal form.

    Inputs only need to satisfy the coupling constraints approximately
    (discrete-search output).  Returns (minimal trajectory, ok) where ok
    is False if the payload estimator failed to converge at some step.

    rods: robot 1 is kept fixed and followers are re-chained along the
    measured rod directions at the exact nominal lengths.
    cables: payload positions are estimated per step (warm-started), cable
    directions renormalized, and rates recovered by central differences.
    The default weights are a pure length fit: unlike conflict checking,
    conversion must land exactly on the constraint manifold so that
    mapping back reproduces the robot states.
    """
    states = np.atleast_2d(states)
    T = len(states)
    n = spec.n_robots
    if spec.kind == "rods":
        out = np.empty((T, ur_minimal_dim(n)))
        prev_alpha = np.zeros(n - 1)
        for k in range(T):
            q = states[k]
            out[k, 0:2] = q[0:2]
            out[k, 2:2 + n] = wrap_angle(q[2::3])
            for i in range(n - 1):
                dx = q[3 * (i + 1)] - q[3 * i]
                dy = q[3 * (i + 1) + 1] - q[3 * i + 1]
                if dx * dx + dy * dy < 1e-18:
                    out[k, 2 + n + i] = prev_alpha[i]
                else:
                    out[k, 2 + n + i] = np.arctan2(dy, dx)
            prev_alpha = out[k, 2 + n:]
        return out, True

    # cables: recover payload and cable kinematics from robot states
    p_rob = np.stack([states[:, 18 * i:18 * i + 3] for i in range(n)], axis=1)  # (T,N,3)
    v_rob = np.stack([states[:, 18 * i + 12:18 * i + 15] for i in range(n)], axis=1)
    p0 = np.empty((T, 3))
    ok = True
    prev = None if prev_payload is None else np.asarray(prev_payload, dtype=float)
    for k in range(T):
        p0[k], conv = estimate_payload(p_rob[k], spec.lengths, prev, mu=mu, lam=lam)
        ok = ok and conv
        prev = p0[k]
    s = p0[:, None, :] - p_rob
    s = s / np.linalg.norm(s, axis=2, keepdims=True)
    v0 = _central_diff(p0, dt)
    sdot = _central_diff(s.reshape(T, -1), dt).reshape(T, n, 3)
    sdot -= np.einsum("tni,tni->tn", sdot, s)[..., None] * s
    w = np.cross(s, sdot)
    out = np.empty((T, mp_minimal_dim(n)))
    out[:, 0:3] = p0
    out[:, 3:6] = v0
    rob = out[:, 6:].reshape(T, n, 18)
    rob[..., 0:3] = s
    rob[..., 3:6] = w
    for i in range(n):
        rob[:, i, 6:15] = states[:, 18 * i + 3:18 * i + 12]
        rob[:, i, 15:18] = states[:, 18 * i + 15:18 * i + 18]
    return out, ok


def _central_diff(x: np.ndarray, dt: float) -> np.ndarray:
    d = np.empty_like(x)
    if len(x) == 1:
        d[:] = 0.0
        return d
    d[1:-1] = (x[2:] - x[:-2]) / (2 * dt)
    d[0] = (x[1] - x[0]) / dt
    d[-1] = (x[-1] - x[-2]) / dt
    return d


# ===========================================================================
# payload-position estimator
# ===========================================================================

def estimate_payload(p_robots: np.ndarray, lengths: np.ndarray, p_prev=None,
                     mu: float = 0.1, lam: float = 10.0, l_min: float | None = None,
                     max_iters: int = 500, grad_tol: float = 1e-8):
    """Estimate the payload position from robot positions alone.

    Minimizes
        sum_i (|p - p_i| - l_i)^2 + mu |p - p_prev| + lam (z_low - p_z - l_min)^2
    where z_low is the lowest robot height and l_min that robot's cable
    length; the last term keeps the estimate below the team.  Solved by
    gradient descent with backtracking, warm-started at ``p_prev`` (first
    call: robot centroid shifted down by l_min).  The middle term is not
    differentiable at p_prev; there the estimate stays put whenever the
    smooth gradient is dominated by mu.

    Returns (p0, converged).
    """
    p_robots = np.asarray(p_robots, dtype=float).reshape(-1, 3)
    lengths = np.asarray(lengths, dtype=float)
    low = int(np.argmin(p_robots[:, 2]))
    z_low = p_robots[low, 2]
    if l_min is None:
        l_min = float(lengths[low])
    use_prev = p_prev is not None
    prev = np.asarray(p_prev, dtype=float) if use_prev else None

    def smooth_value_grad(p):
        d = p - p_robots
        dist = np.linalg.norm(d, axis=1)
        dist = np.maximum(dist, 1e-12)
        res = dist - lengths
        val = float(res @ res)
        g = 2.0 * (res / dist) @ d
        zres = z_low - p[2] - l_min
        val += lam * zres * zres
        g[2] += -2.0 * lam * zres
        return val, g

    def value(p):
        v, _ = smooth_value_grad(p)
        if use_prev:
            v += mu * float(np.linalg.norm(p - prev))
        return v

    def total_grad(p):
        _, g = smooth_value_grad(p)
        if use_prev and mu > 0:
            dp = p - prev
            nd = np.linalg.norm(dp)
            if nd > 1e-12:
                return g + mu * dp / nd, False
            gn = np.linalg.norm(g)
            if gn <= mu + grad_tol:
                return np.zeros(3), True
            return g * (1.0 - mu / gn), False
        return g, False

    p = prev.copy() if use_prev else p_robots.mean(axis=0) - np.array([0.0, 0.0, l_min])
    step = 0.1
    p_old = g_old = None
    history = [value(p)]
    for _ in range(max_iters):
        g, at_kink = total_grad(p)
        if at_kink or np.linalg.norm(g) <= grad_tol:
            return p, True
        # spectral (Barzilai-Borwein) step guess with nonmonotone backtracking
        if g_old is not None:
            dp = p - p_old
            dg = g - g_old
            denom = float(dp @ dg)
            if denom > 1e-18:
                step = min(max(float(dp @ dp) / denom, 1e-10), 1e3)
        p_old, g_old = p, g
        f_ref = max(history[-10:])
        t = step
        for _ in range(60):
            cand = p - t * g
            f_cand = value(cand)
            if f_cand <= f_ref - 1e-4 * t * float(g @ g):
                break
            t *= 0.5
        else:
            return p, False
        p = cand
        history.append(f_cand)
    g, at_kink = total_grad(p)
    return p, bool(at_kink or np.linalg.norm(g) <= grad_tol)
