"""Single-robot dynamics: planar unicycle and 3D multirotor.

States are flat numpy vectors.  Unicycle: (px, py, theta).  Multirotor:
(p[3], R[9 row-major], v[3], Omega[3]) with R kept in SO(3) by an
exponential-map update.  Analytic Jacobians of the discrete step are
provided in local tangent coordinates (3 parameters for the rotation
block) for use by the search heuristics and the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81
E3 = np.array([0.0, 0.0, 1.0])

__all__ = [
    "GRAVITY",
    "UnicycleModel",
    "MultirotorModel",
    "RobotModel",
    "wrap_angle",
    "unicycle_step",
    "unicycle_jacobians",
    "multirotor_step",
    "multirotor_jacobians",
    "step",
    "step_jacobians",
    "hat",
    "exp_so3",
    "log_so3",
    "mr_state",
    "mr_unpack",
    "model_for_kind",
]


def wrap_angle(x):
    """Normalize angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=float), 2.0 * np.pi)


def hat(w: np.ndarray) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, series expansion near zero."""
    th2 = float(w @ w)
    W = hat(w)
    if th2 < 1e-16:
        return np.eye(3) + W + 0.5 * (W @ W)
    th = np.sqrt(th2)
    return np.eye(3) + (np.sin(th) / th) * W + ((1.0 - np.cos(th)) / th2) * (W @ W)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R (inverse of exp_so3), angle in [0, pi]."""
    c = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    th = np.arccos(c)
    if th < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - th < 1e-6:
        # near pi: extract axis from the symmetric part
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # fix signs from off-diagonals using the largest component
        k = int(np.argmax(axis))
        if axis[k] > 0:
            for i in range(3):
                if i != k:
                    axis[i] = A[i, k] / axis[k] * np.sign(1.0)
        axis = axis / (np.linalg.norm(axis) + 1e-300)
        return th * axis
    return th / (2.0 * np.sin(th)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def so3_right_jacobian(w: np.ndarray) -> np.ndarray:
    th2 = float(w @ w)
    W = hat(w)
    if th2 < 1e-12:
        return np.eye(3) - 0.5 * W + (W @ W) / 6.0
    th = np.sqrt(th2)
    return (np.eye(3) - ((1.0 - np.cos(th)) / th2) * W
            + ((th - np.sin(th)) / (th2 * th)) * (W @ W))


# ---------------------------------------------------------------------------
# models

@dataclass(frozen=True)
class UnicycleModel:
    kind: str = "unicycle"
    u_lo: np.ndarray = field(default_factory=lambda: np.array([-0.5, -0.5]))
    u_hi: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    dt: float = 0.1

    state_dim = 3
    action_dim = 2

    def __post_init__(self):
        object.__setattr__(self, "u_lo", np.asarray(self.u_lo, dtype=float))
        object.__setattr__(self, "u_hi", np.asarray(self.u_hi, dtype=float))

    @property
    def max_speed(self) -> float:
        return float(max(abs(self.u_lo[0]), abs(self.u_hi[0])))

    def position(self, x: np.ndarray) -> np.ndarray:
        return np.array([x[0], x[1], 0.0])


@dataclass(frozen=True)
class MultirotorModel:
    """Crazyflie-class quadrotor, X configuration, per-motor forces as actions."""

    kind: str = "multirotor"
    mass: float = 0.034
    inertia: np.ndarray = field(default_factory=lambda: np.array([16.6e-6, 16.6e-6, 29.3e-6]))
    arm_length: float = 0.046
    torque_coef: float = 0.006
    f_min: float = 0.0
    f_max: float = 0.12
    dt: float = 0.01
    # rollout validity bounds used by primitive generation
    v_max: float = 2.0
    body_rate_max: float = 10.0
    tilt_max: float = 1.2

    state_dim = 18
    action_dim = 4

    def __post_init__(self):
        object.__setattr__(self, "inertia", np.asarray(self.inertia, dtype=float))
        if np.any(self.inertia <= 0) or self.mass <= 0:
            raise ValueError("mass and inertia must be positive")
        if abs(np.linalg.det(self.actuation_matrix)) < 1e-12:
            raise ValueError("actuation matrix is singular")

    @property
    def actuation_matrix(self) -> np.ndarray:
        """Maps motor forces (f1..f4) to collective thrust and body torques."""
        arm = self.arm_length / np.sqrt(2.0)
        k = self.torque_coef
        return np.array([
            [1.0, 1.0, 1.0, 1.0],
            [-arm, -arm, arm, arm],
            [-arm, arm, arm, -arm],
            [-k, k, -k, k],
        ])

    @property
    def u_lo(self) -> np.ndarray:
        return np.full(4, self.f_min)

    @property
    def u_hi(self) -> np.ndarray:
        return np.full(4, self.f_max)

    @property
    def hover_force(self) -> float:
        return self.mass * GRAVITY / 4.0

    @property
    def max_speed(self) -> float:
        return self.v_max

    def position(self, x: np.ndarray) -> np.ndarray:
        return x[:3]


RobotModel = UnicycleModel | MultirotorModel


def model_for_kind(kind: str, **params) -> RobotModel:
    if kind == "unicycle":
        return UnicycleModel(**params)
    if kind == "multirotor":
        return MultirotorModel(**params)
    raise ValueError(f"unknown robot kind {kind!r}")


# ---------------------------------------------------------------------------
# unicycle

def unicycle_step(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Explicit Euler step of the unicycle kinematics."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    px, py, th = x
    v, w = u
    return np.array([px + v * np.cos(th) * dt,
                     py + v * np.sin(th) * dt,
                     wrap_angle(th + w * dt)])


def unicycle_step_batch(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    out = np.empty_like(x)
    out[:, 0] = x[:, 0] + u[:, 0] * np.cos(x[:, 2]) * dt
    out[:, 1] = x[:, 1] + u[:, 0] * np.sin(x[:, 2]) * dt
    out[:, 2] = wrap_angle(x[:, 2] + u[:, 1] * dt)
    return out


def unicycle_jacobians(x: np.ndarray, u: np.ndarray, dt: float):
    th = x[2]
    v = u[0]
    A = np.array([[1.0, 0.0, -v * np.sin(th) * dt],
                  [0.0, 1.0, v * np.cos(th) * dt],
                  [0.0, 0.0, 1.0]])
    B = np.array([[np.cos(th) * dt, 0.0],
                  [np.sin(th) * dt, 0.0],
                  [0.0, dt]])
    return A, B


# ---------------------------------------------------------------------------
# multirotor

def mr_state(p, R, v, Om) -> np.ndarray:
    x = np.empty(18)
    x[:3] = p
    x[3:12] = np.asarray(R, dtype=float).reshape(9)
    x[12:15] = v
    x[15:18] = Om
    return x


def mr_unpack(x: np.ndarray):
    return x[:3], x[3:12].reshape(3, 3), x[12:15], x[15:18]


def check_rotation(R: np.ndarray, tol: float = 1e-6):
    if np.linalg.norm(R.T @ R - np.eye(3)) > tol:
        raise ValueError("rotation matrix is not orthonormal")


def multirotor_step(x: np.ndarray, u: np.ndarray, model: MultirotorModel, dt: float) -> np.ndarray:
    """Semi-implicit Euler on (v, p, Omega); rotation via exponential map."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    p, R, v, Om = mr_unpack(x)
    check_rotation(R)
    eta = model.actuation_matrix @ u
    f_T, M = eta[0], eta[1:]
    J = model.inertia
    Om_dot = (np.cross(J * Om, Om) + M) / J
    Om_new = Om + Om_dot * dt
    R_new = R @ exp_so3(Om_new * dt)
    a = (f_T / model.mass) * R[:, 2] - GRAVITY * E3
    v_new = v + a * dt
    p_new = p + v_new * dt
    return mr_state(p_new, R_new, v_new, Om_new)


def multirotor_step_batch(x: np.ndarray, u: np.ndarray, model: MultirotorModel, dt: float) -> np.ndarray:
    """Batched step, no orthonormality check (hot path)."""
    n = len(x)
    p = x[:, :3]
    R = x[:, 3:12].reshape(n, 3, 3)
    v = x[:, 12:15]
    Om = x[:, 15:18]
    eta = u @ model.actuation_matrix.T
    f_T = eta[:, 0]
    M = eta[:, 1:]
    J = model.inertia
    Om_dot = (np.cross(J * Om, Om) + M) / J
    Om_new = Om + Om_dot * dt
    R_new = R @ exp_so3_batch(Om_new * dt)
    a = (f_T / model.mass)[:, None] * R[:, :, 2] - GRAVITY * E3
    v_new = v + a * dt
    p_new = p + v_new * dt
    out = np.empty_like(x)
    out[:, :3] = p_new
    out[:, 3:12] = R_new.reshape(n, 9)
    out[:, 12:15] = v_new
    out[:, 15:18] = Om_new
    return out


def exp_so3_batch(w: np.ndarray) -> np.ndarray:
    n = len(w)
    th2 = np.einsum("ij,ij->i", w, w)
    th = np.sqrt(th2)
    W = np.zeros((n, 3, 3))
    W[:, 0, 1] = -w[:, 2]
    W[:, 0, 2] = w[:, 1]
    W[:, 1, 0] = w[:, 2]
    W[:, 1, 2] = -w[:, 0]
    W[:, 2, 0] = -w[:, 1]
    W[:, 2, 1] = w[:, 0]
    W2 = W @ W
    small = th < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 1.0 - th2 / 6.0, np.sin(th) / np.where(small, 1.0, th))
        c2 = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(th)) / np.where(small, 1.0, th2))
    return np.eye(3) + c1[:, None, None] * W + c2[:, None, None] * W2


def multirotor_jacobians(x: np.ndarray, u: np.ndarray, model: MultirotorModel, dt: float):
    """Analytic Jacobians of the discrete step in tangent coordinates.

    Tangent layout (12): [dp, dR (right perturbation), dv, dOmega].
    Returns (A 12x12, B 12x4).
    """
    _, R, _, Om = mr_unpack(x)
    eta = model.actuation_matrix @ u
    f_T, M = eta[0], eta[1:]
    J = model.inertia
    Jinv = 1.0 / J
    Om_dot = (np.cross(J * Om, Om) + M) / J
    Om_new = Om + Om_dot * dt

    # d(J*Om x Om)/dOm = -hat(Om) @ diag(J) + hat(J*Om)
    dcross = -hat(Om) @ np.diag(J) + hat(J * Om)
    dOmnew_dOm = np.eye(3) + dt * (Jinv[:, None] * dcross)
    dOmnew_du = dt * (Jinv[:, None] * model.actuation_matrix[1:])

    Jr = so3_right_jacobian(Om_new * dt)
    ExpT = exp_so3(Om_new * dt).T

    dv_dR = -(f_T / model.mass) * (R @ hat(E3)) * dt
    dv_du = (dt / model.mass) * np.outer(R[:, 2], model.actuation_matrix[0])

    A = np.zeros((12, 12))
    B = np.zeros((12, 4))
    # position block
    A[0:3, 0:3] = np.eye(3)
    A[0:3, 6:9] = dt * np.eye(3)
    A[0:3, 3:6] = dt * dv_dR
    B[0:3] = dt * dv_du
    # rotation block
    A[3:6, 3:6] = ExpT
    A[3:6, 9:12] = Jr @ (dt * dOmnew_dOm)
    B[3:6] = Jr @ (dt * dOmnew_du)
    # velocity block
    A[6:9, 3:6] = dv_dR
    A[6:9, 6:9] = np.eye(3)
    B[6:9] = dv_du
    # body-rate block
    A[9:12, 9:12] = dOmnew_dOm
    B[9:12] = dOmnew_du
    return A, B


# ---------------------------------------------------------------------------
# dispatch

def step(model: RobotModel, x: np.ndarray, u: np.ndarray, dt: float | None = None) -> np.ndarray:
    dt = model.dt if dt is None else dt
    if isinstance(model, UnicycleModel):
        return unicycle_step(x, u, dt)
    return multirotor_step(x, u, model, dt)


def step_batch(model: RobotModel, x: np.ndarray, u: np.ndarray, dt: float | None = None) -> np.ndarray:
    dt = model.dt if dt is None else dt
    if isinstance(model, UnicycleModel):
        return unicycle_step_batch(x, u, dt)
    return multirotor_step_batch(x, u, model, dt)


def step_jacobians(model: RobotModel, x: np.ndarray, u: np.ndarray, dt: float | None = None):
    dt = model.dt if dt is None else dt
    if isinstance(model, UnicycleModel):
        return unicycle_jacobians(x, u, dt)
    return multirotor_jacobians(x, u, model, dt)
