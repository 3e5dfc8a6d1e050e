import numpy as np
import pytest
from scipy.optimize import least_squares

from linkplan.coupled import (
    CouplingSpec,
    coupling_lengths,
    element_capsules,
    estimate_payload,
    minimal_to_stacked,
    mp_accelerations,
    mp_dynamics,
    mp_minimal_dim,
    mp_pack,
    mp_step,
    mp_step_batch,
    mp_track_reference,
    mp_unpack,
    rod_angle_and_rate,
    stacked_to_minimal,
    ur_constraint_jacobian,
    ur_minimal_dim,
    ur_positions,
    ur_projected_kinematics,
    ur_stacked_state,
    ur_step,
    ur_step_batch,
)
from linkplan.dynamics import GRAVITY, MultirotorModel, exp_so3, wrap_angle


def rods2(lengths=(1.0,)):
    return CouplingSpec(kind="rods", lengths=np.array(lengths))


def cables(n, length=0.5, m0=0.01):
    return CouplingSpec(kind="cables", lengths=np.full(n, length), payload_mass=m0)


# ---------------------------------------------------------------------------
# rod chain: constraint Jacobian and projection

def test_constraint_jacobian_rows():
    spec = rods2()
    q = np.array([0.0, 0.0, 0.3, 1.0, 0.0, -0.2])
    assert np.allclose(ur_constraint_jacobian(q, spec)[0], [-2, 0, 0, 2, 0, 0])
    q = np.array([0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    assert np.allclose(ur_constraint_jacobian(q, spec)[0], [0, -2, 0, 0, 2, 0])


def test_constraint_jacobian_rejects_coincident():
    spec = rods2()
    q = np.zeros(6)
    with pytest.raises(ValueError):
        ur_constraint_jacobian(q, spec)


def _random_ur_state(rng, spec):
    n = spec.n_robots
    x = np.empty(ur_minimal_dim(n))
    x[0:2] = rng.uniform(-2, 2, 2)
    x[2:] = rng.uniform(-np.pi, np.pi, 2 * n - 1)
    return x


def test_projection_annihilates_constraint_rate():
    # the projected flow must satisfy the rod-length rate constraints
    rng = np.random.default_rng(0)
    for spec in (rods2(), CouplingSpec("rods", [0.5, 0.7])):
        n = spec.n_robots
        for _ in range(500):
            x = _random_ur_state(rng, spec)
            u = rng.uniform(-0.5, 0.5, 2 * n)
            rate = ur_projected_kinematics(x, u, spec)
            # rebuild the stacked rate from minimal rates
            q = ur_stacked_state(x, spec)
            A = ur_constraint_jacobian(q, spec)
            qdot = np.zeros(3 * n)
            qdot[0:2] = rate[0:2]
            qdot[2::3] = rate[2:2 + n]
            alpha = x[2 + n:]
            adot = rate[2 + n:]
            for i in range(n - 1):
                li = spec.lengths[i]
                qdot[3 * (i + 1)] = qdot[3 * i] - li * np.sin(alpha[i]) * adot[i]
                qdot[3 * (i + 1) + 1] = qdot[3 * i + 1] + li * np.cos(alpha[i]) * adot[i]
            assert np.max(np.abs(A @ qdot)) <= 1e-10


def test_projection_examples():
    spec = rods2()
    # horizontal rod, both robots heading along it: plain translation
    x = np.array([0.0, 0.0, 0.0, 0.0, 0.0])
    rate = ur_projected_kinematics(x, np.array([1.0, 0.0, 1.0, 0.0]), spec)
    assert np.allclose(rate, [1.0, 0.0, 0.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(ur_projected_kinematics(x, np.zeros(4), spec), 0.0)


def test_rod_angle_and_rate():
    a, adot = rod_angle_and_rate([0, 0], [1, 0], [0, 0], [0, 0], 1.0)
    assert a == 0.0 and adot == 0.0
    a, _ = rod_angle_and_rate([0, 0], [0, 1], [0, 0], [0, 0], 1.0)
    assert a == pytest.approx(np.pi / 2)
    # rigid rotation at 1 rad/s about the first endpoint
    phi = 0.7
    p_j = np.array([np.cos(phi), np.sin(phi)])
    v_j = np.array([-np.sin(phi), np.cos(phi)])
    _, adot = rod_angle_and_rate([0, 0], p_j, [0, 0], v_j, 1.0)
    assert adot == pytest.approx(1.0, abs=1e-9)


def test_rod_rate_matches_finite_difference():
    spec = CouplingSpec("rods", [0.5, 0.7])
    rng = np.random.default_rng(1)
    dt = 1e-6
    for _ in range(50):
        x = _random_ur_state(rng, spec)
        u = rng.uniform(-0.5, 0.5, 6)
        rate = ur_projected_kinematics(x, u, spec)
        fd = (ur_step(x, u, spec, dt) - x) / dt
        fd[2:] = wrap_angle(fd[2:] * dt) / dt
        assert np.allclose(fd, rate, atol=1e-5)


def test_rod_lengths_exact_along_rollout():
    spec = CouplingSpec("rods", [0.5, 0.7])
    rng = np.random.default_rng(2)
    x = _random_ur_state(rng, spec)
    for _ in range(1000):
        u = rng.uniform(-0.5, 0.5, 6)
        x = ur_step(x, u, spec, 0.1)
    assert np.max(np.abs(coupling_lengths(x, spec) - spec.lengths)) <= 1e-6


def test_ur_step_batch_matches_scalar():
    spec = CouplingSpec("rods", [0.5, 0.7])
    rng = np.random.default_rng(3)
    xs = np.stack([_random_ur_state(rng, spec) for _ in range(30)])
    us = rng.uniform(-0.5, 0.5, (30, 6))
    batch = ur_step_batch(xs, us, spec, 0.1)
    for i in range(30):
        assert np.allclose(batch[i], ur_step(xs[i], us[i], spec, 0.1), atol=1e-13)


# ---------------------------------------------------------------------------
# cable team: dynamics oracles

def _rotation_to(direction):
    d = direction / np.linalg.norm(direction)
    axis = np.cross([0.0, 0.0, 1.0], d)
    na = np.linalg.norm(axis)
    if na < 1e-12:
        return np.eye(3)
    angle = np.arctan2(na, d[2])
    return exp_so3(axis / na * angle)


def _static_balance(spec, s, masses):
    """Independent root-finder: cable tensions and hover thrust vectors."""
    m0 = spec.payload_mass

    def resid(T):
        return (T[:, None] * s).sum(axis=0) + m0 * GRAVITY * np.array([0, 0, 1.0])

    sol = least_squares(resid, x0=np.full(len(s), m0 * GRAVITY), method="lm")
    T = sol.x
    thrusts = [masses[i] * GRAVITY * np.array([0, 0, 1.0]) - T[i] * s[i] for i in range(len(s))]
    return T, thrusts


def test_hover_equilibrium_matches_static_balance():
    model = MultirotorModel()
    spec = cables(2, length=0.5, m0=0.01)
    c = np.sqrt(2) / 2
    s = np.array([[c, 0, -c], [-c, 0, -c]])  # 45-degree symmetric cables
    T, thrusts = _static_balance(spec, s, [model.mass] * 2)
    # the solved thrusts carry the whole team weight
    total = np.sum(thrusts, axis=0)
    expect = (spec.payload_mass + 2 * model.mass) * GRAVITY * np.array([0, 0, 1.0])
    assert np.allclose(total, expect, atol=1e-10)

    R = [_rotation_to(f) for f in thrusts]
    u = np.stack([
        np.linalg.solve(model.actuation_matrix, [np.linalg.norm(f), 0, 0, 0])
        for f in thrusts
    ])
    x = mp_pack(np.zeros(3), np.zeros(3), s, np.zeros((2, 3)), R, np.zeros((2, 3)))
    p0dd, wdot, Omdot = mp_accelerations(x, u, spec, model)
    assert np.linalg.norm(p0dd) <= 1e-8
    assert np.linalg.norm(wdot) <= 1e-8
    assert np.linalg.norm(Omdot) <= 1e-12
    # the equilibrium is a fixed point of the step as well
    x1 = mp_step(x, u, spec, model, 0.01)
    assert np.allclose(x1, x, atol=1e-10)


def test_tracking_controller_holds_and_follows():
    from linkplan.coupled import mp_hover_state

    model = MultirotorModel(dt=0.02)
    spec = cables(2, length=0.5, m0=0.01)
    c = np.sqrt(2) / 2
    x0, _ = mp_hover_state(spec, model, np.zeros(3), [[c, 0, -c], [-c, 0, -c]])

    # constant reference: closed loop stays at the equilibrium
    X_ref = np.tile(x0, (51, 1))
    X, U = mp_track_reference(X_ref, spec, model, 0.02)
    assert np.max(np.abs(X - x0)) <= 1e-6

    # linearly sliding reference: bounded lag, and X is an exact rollout of U
    shift = np.array([0.3, 0.0, 0.0])
    X_ref = np.tile(x0, (51, 1))
    for k in range(51):
        X_ref[k, 0:3] += shift * k / 50
        X_ref[k, 3:6] = shift / (50 * 0.02)
    X, U = mp_track_reference(X_ref, spec, model, 0.02)
    assert np.linalg.norm(X[-1, 0:3] - X_ref[-1, 0:3]) <= 0.1
    x = X[0]
    for k in range(50):
        x = mp_step(x, U[k], spec, model, 0.02)
    assert np.max(np.abs(x - X[-1])) <= 1e-12


def test_free_fall_pendulum():
    model = MultirotorModel()
    spec = cables(1, length=0.5, m0=0.01)
    s = np.array([[0.0, 0.0, 1.0]])
    x = mp_pack(np.zeros(3), np.zeros(3), s, np.zeros((1, 3)), [np.eye(3)], np.zeros((1, 3)))
    p0dd, wdot, _ = mp_accelerations(x, np.zeros((1, 4)), spec, model)
    assert np.allclose(p0dd, [0, 0, -GRAVITY], atol=1e-12)
    assert np.allclose(wdot, 0.0, atol=1e-12)


def _random_mp_state(rng, n):
    s = rng.normal(size=(n, 3))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    w = rng.normal(size=(n, 3))
    w -= np.einsum("ni,ni->n", w, s)[:, None] * s
    R = [exp_so3(rng.normal(size=3) * 0.5) for _ in range(n)]
    return mp_pack(rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3), s, w, R,
                   rng.uniform(-2, 2, (n, 3)))


def test_momentum_free_fall():
    # with zero thrust, the center of mass accelerates at exactly -g e3
    model = MultirotorModel()
    rng = np.random.default_rng(4)
    for n in (1, 2, 3):
        spec = cables(n, length=0.5, m0=0.01)
        for _ in range(20):
            x = _random_mp_state(rng, n)
            p0dd, wdot, _ = mp_accelerations(x, np.zeros((n, 4)), spec, model)
            _, _, s, w, _, _ = mp_unpack(x, n)
            m = model.mass
            total = spec.payload_mass + n * m
            acc = spec.payload_mass * p0dd
            for i in range(n):
                li = spec.lengths[i]
                a_i = p0dd - li * np.cross(wdot[i], s[i]) + li * (w[i] @ w[i]) * s[i]
                acc += m * a_i
            assert np.allclose(acc / total, [0, 0, -GRAVITY], atol=1e-8)


def test_cable_rate_orthogonal():
    model = MultirotorModel()
    rng = np.random.default_rng(5)
    spec = cables(2)
    for _ in range(50):
        x = _random_mp_state(rng, 2)
        u = rng.uniform(0, model.f_max, (2, 4))
        rates = mp_dynamics(x, u, spec, model)
        _, _, s, _, _, _ = mp_unpack(x, 2)
        _, _, sdot, _, _, _ = mp_unpack(rates, 2)
        assert np.max(np.abs(np.einsum("ni,ni->n", s, sdot))) <= 1e-15


def test_step_preserves_invariants():
    model = MultirotorModel()
    spec = cables(2)
    rng = np.random.default_rng(6)
    x = _random_mp_state(rng, 2)
    for _ in range(1000):
        u = rng.uniform(0.3, 0.7, (2, 4)) * model.mass * GRAVITY / 2
        x = mp_step(x, u, spec, model, 0.01)
        # keep the undamped swing/tumble energy bounded; the structural
        # invariants are what is under test
        x[3:6] = np.clip(x[3:6], -5, 5)
        rob = x[6:].reshape(2, 18)
        wn = np.linalg.norm(rob[:, 3:6], axis=1)
        rob[:, 3:6] *= np.minimum(1.0, 10.0 / np.maximum(wn, 1e-12))[:, None]
        rob[:, 15:18] = np.clip(rob[:, 15:18], -10, 10)
    _, _, s, w, R, _ = mp_unpack(x, 2)
    assert np.max(np.abs(np.linalg.norm(s, axis=1) - 1.0)) <= 1e-9
    assert np.max(np.abs(np.einsum("ni,ni->n", s, w))) <= 1e-9
    for i in range(2):
        assert np.linalg.norm(R[i].T @ R[i] - np.eye(3)) <= 1e-9


def test_mp_step_batch_matches_scalar():
    model = MultirotorModel()
    spec = cables(2)
    rng = np.random.default_rng(7)
    xs = np.stack([_random_mp_state(rng, 2) for _ in range(20)])
    us = rng.uniform(0, model.f_max, (20, 2, 4))
    batch = mp_step_batch(xs, us, spec, model, 0.01)
    for i in range(20):
        assert np.allclose(batch[i], mp_step(xs[i], us[i], spec, model, 0.01), atol=1e-14)


# ---------------------------------------------------------------------------
# conversions

def test_minimal_to_stacked_examples():
    spec = rods2()
    x = np.array([0.0, 0.0, 0.0, 0.0, 0.0])
    q = minimal_to_stacked(x, spec)
    assert np.allclose(q, [0, 0, 0, 1, 0, 0])

    spec_c = cables(1, length=0.5, m0=0.01)
    x = mp_pack(np.zeros(3), np.zeros(3), [[0, 0, -1.0]], np.zeros((1, 3)),
                [np.eye(3)], np.zeros((1, 3)))
    q = minimal_to_stacked(x, spec_c)
    assert np.allclose(q[0:3], [0, 0, 0.5])


def test_ur_round_trip():
    spec = CouplingSpec("rods", [0.5, 0.7])
    rng = np.random.default_rng(8)
    xs = np.stack([_random_ur_state(rng, spec) for _ in range(20)])
    stacked = np.stack([ur_stacked_state(x, spec) for x in xs])
    back, ok = stacked_to_minimal(stacked, spec, dt=0.1)
    assert ok
    diff = back - xs
    diff[:, 2:] = wrap_angle(diff[:, 2:])
    assert np.max(np.abs(diff)) <= 1e-9


def test_ur_projection_anchors_first_robot():
    spec = rods2((1.0,))
    # second robot too far out by 0.1: re-chained to exact length
    stacked = np.array([[0.0, 0.0, 0.0, 1.1, 0.0, 0.0]])
    x, ok = stacked_to_minimal(stacked, spec, dt=0.1)
    assert ok
    pos = ur_positions(x[0], spec)
    assert np.allclose(pos[0], [0, 0], atol=1e-12)
    assert np.allclose(pos[1], [1.0, 0.0], atol=1e-12)


def test_mp_round_trip_positions():
    # exact coupled rollout -> stacked -> minimal reproduces robot positions
    model = MultirotorModel()
    spec = cables(2, length=0.5, m0=0.01)
    rng = np.random.default_rng(9)
    c = np.sqrt(2) / 2
    s = np.array([[c, 0, -c], [-c, 0, -c]])
    x = mp_pack(np.zeros(3), np.zeros(3), s, np.zeros((2, 3)),
                [np.eye(3), np.eye(3)], np.zeros((2, 3)))
    traj = [x]
    hover = model.mass * GRAVITY / 4
    for _ in range(30):
        u = np.full((2, 4), hover) + rng.uniform(-0.1, 0.1, (2, 4)) * hover
        x = mp_step(x, u, spec, model, 0.01)
        traj.append(x)
    traj = np.stack(traj)
    stacked = np.stack([minimal_to_stacked(x, spec) for x in traj])
    back, ok = stacked_to_minimal(stacked, spec, dt=0.01)
    assert ok
    stacked2 = np.stack([minimal_to_stacked(x, spec) for x in back])
    for i in range(2):
        p_err = np.abs(stacked2[:, 18 * i:18 * i + 3] - stacked[:, 18 * i:18 * i + 3])
        assert np.max(p_err) <= 1e-7
        # velocities come from central differences; across steps the actions
        # (and so the accelerations) jump, leaving an O(dt * accel-jump) error
        v_err = np.abs(stacked2[:, 18 * i + 12:18 * i + 15] - stacked[:, 18 * i + 12:18 * i + 15])
        assert np.max(v_err[1:-1]) <= 5e-2


# ---------------------------------------------------------------------------
# payload estimator

def _grid_oracle(fun, center, half, levels=6, pts=21):
    """Multi-scale grid refinement of a 3D objective."""
    best = np.asarray(center, dtype=float)
    for _ in range(levels):
        axes = [np.linspace(best[d] - half, best[d] + half, pts) for d in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        P = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        vals = fun(P)
        best = P[int(np.argmin(vals))]
        half *= 2.2 / (pts - 1)
    return best


def _objective(P, p_robots, lengths, p_prev, mu, lam):
    d = np.linalg.norm(P[:, None, :] - p_robots[None], axis=2)
    val = ((d - lengths) ** 2).sum(axis=1)
    if p_prev is not None:
        val = val + mu * np.linalg.norm(P - p_prev, axis=1)
    low = int(np.argmin(p_robots[:, 2]))
    val = val + lam * (p_robots[low, 2] - P[:, 2] - lengths[low]) ** 2
    return val


def test_estimator_two_robot_example():
    p = np.array([[0.5, 0, 1.0], [-0.5, 0, 1.0]])
    p0, ok = estimate_payload(p, [1.0, 1.0], mu=0.0, lam=0.0)
    assert ok
    assert np.allclose(p0, [0, 0, 1 - np.sqrt(0.75)], atol=1e-6)


def test_estimator_single_robot_below():
    p0, ok = estimate_payload(np.array([[0, 0, 1.0]]), [1.0], mu=0.0, lam=1000.0)
    assert ok
    assert np.allclose(p0, [0, 0, 0], atol=1e-6)


def test_estimator_sticks_at_consistent_prev():
    p = np.array([[0.5, 0, 1.0], [-0.5, 0, 1.0]])
    # minimizer of the smooth objective, found with mu=0
    star, ok = estimate_payload(p, [1.0, 1.0], mu=0.0, lam=10.0)
    assert ok
    p0, ok = estimate_payload(p, [1.0, 1.0], p_prev=star, mu=0.1, lam=10.0)
    assert ok
    assert np.linalg.norm(p0 - star) <= 1e-8


def test_estimator_matches_grid_oracle():
    rng = np.random.default_rng(10)
    for trial in range(50):
        n = 2 + trial % 2
        ang = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(0.15, 0.45)
        centers = np.stack([
            r * np.array([np.cos(ang + 2 * np.pi * i / n), np.sin(ang + 2 * np.pi * i / n)])
            for i in range(n)
        ])
        z = rng.uniform(0.8, 1.2, n)
        p_robots = np.column_stack([centers + rng.uniform(-0.05, 0.05, (n, 2)), z])
        lengths = rng.uniform(0.5, 0.8, n)
        true_ish = p_robots.mean(axis=0) - [0, 0, lengths.mean() * 0.8]
        p_prev = true_ish + rng.uniform(-0.05, 0.05, 3)
        got, ok = estimate_payload(p_robots, lengths, p_prev=p_prev, mu=0.1, lam=10.0)
        assert ok
        ref = _grid_oracle(
            lambda P: _objective(P, p_robots, lengths, p_prev, 0.1, 10.0),
            center=got, half=0.4)
        assert np.linalg.norm(got - ref) <= 1e-3


def test_estimator_stays_below_team():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = rng.integers(2, 4)
        p_robots = np.column_stack([rng.uniform(-0.3, 0.3, (n, 2)), rng.uniform(0.9, 1.1, n)])
        lengths = rng.uniform(0.5, 0.8, n)
        # lam=1e3 makes the objective stiff: the certifiable gradient floor of a
        # value-based line search is ~sqrt(ulp(f)*curvature) ~ 1e-7 here
        p0, ok = estimate_payload(p_robots, lengths, mu=0.0, lam=1000.0,
                                  max_iters=5000, grad_tol=1e-6)
        assert ok
        low = int(np.argmin(p_robots[:, 2]))
        assert p0[2] <= p_robots[low, 2] - lengths[low] + 1e-3


# ---------------------------------------------------------------------------
# misc

def test_element_capsules():
    spec = CouplingSpec("rods", [1.0], element_radius=0.02)
    caps = element_capsules(spec, np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert len(caps) == 1 and caps[0].radius == 0.02
    spec_c = cables(2)
    caps = element_capsules(spec_c, np.array([[0.5, 0, 1.0], [-0.5, 0, 1.0]]),
                            payload=np.array([0, 0, 0.5]))
    assert len(caps) == 2
    with pytest.raises(ValueError):
        element_capsules(spec_c, np.zeros((2, 3)))


def test_spec_validation():
    with pytest.raises(ValueError):
        CouplingSpec("chain", [1.0])
    with pytest.raises(ValueError):
        CouplingSpec("rods", [0.0])
    with pytest.raises(ValueError):
        CouplingSpec("cables", [1.0], payload_mass=0.0)
    assert CouplingSpec("rods", [1.0, 1.0]).n_robots == 3
    assert cables(2).n_robots == 2
