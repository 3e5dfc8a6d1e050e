import numpy as np
import pytest

from linkplan.dynamics import (
    GRAVITY,
    MultirotorModel,
    UnicycleModel,
    exp_so3,
    hat,
    log_so3,
    model_for_kind,
    mr_state,
    mr_unpack,
    multirotor_jacobians,
    multirotor_step,
    multirotor_step_batch,
    step,
    step_batch,
    unicycle_jacobians,
    unicycle_step,
    unicycle_step_batch,
    wrap_angle,
)


# ---------------------------------------------------------------------------
# angle wrapping and SO(3) helpers

def test_wrap_angle_values():
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(2 * np.pi) == pytest.approx(0.0, abs=1e-12)
    assert wrap_angle(3.2) == pytest.approx(3.2 - 2 * np.pi, abs=1e-12)


def test_wrap_angle_range():
    rng = np.random.default_rng(0)
    x = rng.uniform(-50, 50, 10000)
    w = wrap_angle(x)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    # wrapping preserves the angle modulo 2*pi
    assert np.allclose(np.mod(w - x, 2 * np.pi), 0.0, atol=1e-9) or np.allclose(
        np.abs(np.mod(w - x, 2 * np.pi) - 2 * np.pi) * (np.mod(w - x, 2 * np.pi) > np.pi), 0.0, atol=1e-9
    )


def test_exp_log_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(200):
        w = rng.normal(size=3)
        w *= rng.uniform(1e-10, np.pi - 1e-3) / np.linalg.norm(w)
        assert np.allclose(log_so3(exp_so3(w)), w, atol=1e-8)


def test_exp_so3_orthonormal():
    rng = np.random.default_rng(2)
    for _ in range(100):
        R = exp_so3(rng.normal(size=3))
        assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-12
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_hat_antisymmetric_cross():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert np.allclose(hat(a) @ b, np.cross(a, b))
    assert np.allclose(hat(a).T, -hat(a))


# ---------------------------------------------------------------------------
# unicycle

def test_unicycle_step_examples():
    x = np.zeros(3)
    assert np.allclose(unicycle_step(x, np.array([1.0, 0.0]), 0.1), [0.1, 0.0, 0.0])
    assert np.allclose(unicycle_step(x, np.array([0.0, 1.0]), 0.1), [0.0, 0.0, 0.1])
    # heading wraps past pi
    out = unicycle_step(np.array([0.0, 0.0, 3.1]), np.array([0.0, 1.0]), 0.1)
    assert out[2] == pytest.approx(3.2 - 2 * np.pi, abs=1e-12)


def test_unicycle_jacobians_match_fd():
    rng = np.random.default_rng(4)
    eps = 1e-6
    for _ in range(100):
        x = np.array([*rng.uniform(-2, 2, 2), rng.uniform(-2.5, 2.5)])
        u = rng.uniform(-0.5, 0.5, 2)
        A, B = unicycle_jacobians(x, u, 0.1)
        A_fd = np.zeros((3, 3))
        for j in range(3):
            dx = np.zeros(3)
            dx[j] = eps
            diff = unicycle_step(x + dx, u, 0.1) - unicycle_step(x - dx, u, 0.1)
            diff[2] = wrap_angle(diff[2])
            A_fd[:, j] = diff / (2 * eps)
        B_fd = np.zeros((3, 2))
        for j in range(2):
            du = np.zeros(2)
            du[j] = eps
            diff = unicycle_step(x, u + du, 0.1) - unicycle_step(x, u - du, 0.1)
            diff[2] = wrap_angle(diff[2])
            B_fd[:, j] = diff / (2 * eps)
        assert np.linalg.norm(A - A_fd) / max(1.0, np.linalg.norm(A_fd)) < 1e-4
        assert np.linalg.norm(B - B_fd) / max(1.0, np.linalg.norm(B_fd)) < 1e-4


def test_unicycle_batch_matches_scalar():
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 2, (50, 3))
    u = rng.uniform(-0.5, 0.5, (50, 2))
    batch = unicycle_step_batch(x, u, 0.1)
    for i in range(50):
        assert np.array_equal(batch[i], unicycle_step(x[i], u[i], 0.1))


def test_unicycle_rejects_bad_dt():
    with pytest.raises(ValueError):
        unicycle_step(np.zeros(3), np.zeros(2), 0.0)


# ---------------------------------------------------------------------------
# multirotor

def _model():
    return MultirotorModel()


def _random_mr_state(rng):
    p = rng.uniform(-2, 2, 3)
    w = rng.normal(size=3)
    w *= rng.uniform(0, 0.9 * np.pi) / np.linalg.norm(w)
    v = rng.uniform(-2, 2, 3)
    Om = rng.uniform(-5, 5, 3)
    return mr_state(p, exp_so3(w), v, Om)


def test_hover_is_fixed_point():
    m = _model()
    x = mr_state(np.zeros(3), np.eye(3), np.zeros(3), np.zeros(3))
    u = np.full(4, m.hover_force)
    x1 = multirotor_step(x, u, m, m.dt)
    assert np.allclose(x1, x, atol=1e-12)


def test_free_fall():
    m = _model()
    x = mr_state(np.zeros(3), np.eye(3), np.zeros(3), np.zeros(3))
    x1 = multirotor_step(x, np.zeros(4), m, 0.01)
    p, R, v, Om = mr_unpack(x1)
    assert v[2] == pytest.approx(-GRAVITY * 0.01, abs=1e-12)
    assert p[2] == pytest.approx(-GRAVITY * 0.01 ** 2, abs=1e-12)
    assert np.allclose(R, np.eye(3)) and np.allclose(Om, 0.0)


def test_pure_yaw_torque_spins_z():
    m = _model()
    x = mr_state(np.zeros(3), np.eye(3), np.zeros(3), np.zeros(3))
    # motors 2 and 4 higher: yaw torque, zero roll/pitch
    u = np.array([0.0, 0.01, 0.0, 0.01])
    x1 = multirotor_step(x, u, m, 0.01)
    _, _, _, Om = mr_unpack(x1)
    eta = m.actuation_matrix @ u
    assert Om[0] == pytest.approx(0.0, abs=1e-15)
    assert Om[1] == pytest.approx(0.0, abs=1e-15)
    assert Om[2] == pytest.approx(eta[3] / m.inertia[2] * 0.01)


def test_actuation_matrix_signs():
    m = _model()
    act = m.actuation_matrix
    assert np.allclose(act[0], 1.0)
    # per-row sums vanish for the torque rows
    assert np.allclose(act[1:].sum(axis=1), 0.0)
    assert abs(np.linalg.det(act)) > 1e-9


def test_so3_drift_bounded_over_long_rollout():
    m = _model()
    rng = np.random.default_rng(6)
    x = mr_state(np.zeros(3), np.eye(3), np.zeros(3), np.zeros(3))
    for _ in range(10000):
        u = rng.uniform(0.0, m.f_max, 4)
        x = multirotor_step(x, u, m, m.dt)
        # keep translation/body rate from diverging; rotation update is the test
        x[:3] = 0.0
        x[12:15] = 0.0
        x[15:18] = np.clip(x[15:18], -10.0, 10.0)
    R = x[3:12].reshape(3, 3)
    assert np.linalg.norm(R.T @ R - np.eye(3)) <= 1e-9


def _tangent_apply(x, xi):
    p, R, v, Om = mr_unpack(x)
    return mr_state(p + xi[0:3], R @ exp_so3(xi[3:6]), v + xi[6:9], Om + xi[9:12])


def _tangent_diff(x2, x1):
    p2, R2, v2, O2 = mr_unpack(x2)
    p1, R1, v1, O1 = mr_unpack(x1)
    return np.concatenate([p2 - p1, log_so3(R1.T @ R2), v2 - v1, O2 - O1])


def test_multirotor_jacobians_match_fd():
    m = _model()
    rng = np.random.default_rng(7)
    eps = 1e-6
    for _ in range(100):
        x = _random_mr_state(rng)
        u = rng.uniform(0.0, m.f_max, 4)
        A, B = multirotor_jacobians(x, u, m, m.dt)
        x_next = multirotor_step(x, u, m, m.dt)
        A_fd = np.zeros((12, 12))
        for j in range(12):
            xi = np.zeros(12)
            xi[j] = eps
            xp = multirotor_step(_tangent_apply(x, xi), u, m, m.dt)
            xm = multirotor_step(_tangent_apply(x, -xi), u, m, m.dt)
            A_fd[:, j] = (_tangent_diff(xp, x_next) - _tangent_diff(xm, x_next)) / (2 * eps)
        B_fd = np.zeros((12, 4))
        for j in range(4):
            du = np.zeros(4)
            du[j] = eps
            xp = multirotor_step(x, u + du, m, m.dt)
            xm = multirotor_step(x, u - du, m, m.dt)
            B_fd[:, j] = (_tangent_diff(xp, x_next) - _tangent_diff(xm, x_next)) / (2 * eps)
        assert np.linalg.norm(A - A_fd) / max(1.0, np.linalg.norm(A_fd)) < 1e-4
        assert np.linalg.norm(B - B_fd) / max(1.0, np.linalg.norm(B_fd)) < 1e-4


def test_multirotor_batch_matches_scalar():
    m = _model()
    rng = np.random.default_rng(8)
    xs = np.stack([_random_mr_state(rng) for _ in range(40)])
    us = rng.uniform(0.0, m.f_max, (40, 4))
    batch = multirotor_step_batch(xs, us, m, m.dt)
    for i in range(40):
        assert np.allclose(batch[i], multirotor_step(xs[i], us[i], m, m.dt), atol=1e-14)


def test_multirotor_rejects_bad_rotation():
    m = _model()
    x = mr_state(np.zeros(3), np.eye(3) * 1.1, np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        multirotor_step(x, np.zeros(4), m, m.dt)


def test_step_determinism():
    m = _model()
    rng = np.random.default_rng(9)
    x = _random_mr_state(rng)
    u = rng.uniform(0, m.f_max, 4)
    a = multirotor_step(x, u, m, m.dt)
    b = multirotor_step(x.copy(), u.copy(), m, m.dt)
    assert a.tobytes() == b.tobytes()


def test_dispatch():
    uni = model_for_kind("unicycle")
    mr = model_for_kind("multirotor")
    assert isinstance(uni, UnicycleModel) and isinstance(mr, MultirotorModel)
    x = np.zeros(3)
    assert np.allclose(step(uni, x, np.array([1.0, 0.0])), [0.1, 0.0, 0.0])
    xs = np.zeros((2, 3))
    us = np.tile([1.0, 0.0], (2, 1))
    assert step_batch(uni, xs, us).shape == (2, 3)
    with pytest.raises(ValueError):
        model_for_kind("hovercraft")
