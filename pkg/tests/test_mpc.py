import math

import numpy as np
import pytest

from mobileprint.core import ControlInput, Pose2, TimedPath
from mobileprint.errors import DimensionError, SolverFailureError
from mobileprint.mpc import (
    MpcConfig,
    MpcController,
    QpProblem,
    build_qp,
    build_stacked_dynamics,
    desired_segment,
    mpc_step,
    solve_qp,
)


def projected_gradient_oracle(problem, iterations=200_000, tol=1e-13):
    """Brute-force reference: projected gradient on the box-constrained QP."""
    h_mat, q = problem.h_mat, problem.q
    n = h_mat.shape[0]
    bound = problem.h_vec[:n]
    lipschitz = np.linalg.eigvalsh(h_mat).max() * 2.0
    alpha = 1.0 / lipschitz
    u = np.zeros(n)
    for _ in range(iterations):
        grad = 2.0 * (h_mat @ u + q)
        u_next = np.clip(u - alpha * grad, -bound, bound)
        if np.abs(u_next - u).max() < tol:
            u = u_next
            break
        u = u_next
    return u


def random_problem(rng, n_steps):
    cfg = MpcConfig(
        horizon=n_steps,
        dt=0.1,
        qc=rng.uniform(1, 50, size=3),
        rc=rng.uniform(0.05, 2, size=3),
        v_max=rng.uniform(0.05, 0.5),
        omega_max=rng.uniform(0.05, 0.5),
    )
    dyn = build_stacked_dynamics(cfg)
    x = Pose2(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-1, 1))
    seg = rng.uniform(-0.5, 0.5, size=(n_steps, 3))
    return build_qp(dyn, cfg, x, seg)


class TestStackedDynamics:
    def test_single_step(self):
        cfg = MpcConfig(horizon=1, dt=0.25)
        dyn = build_stacked_dynamics(cfg)
        assert np.allclose(dyn.sx, np.eye(3))
        assert np.allclose(dyn.su, 0.25 * np.eye(3))

    def test_block_pattern_n3(self):
        cfg = MpcConfig(horizon=3, dt=0.1)
        dyn = build_stacked_dynamics(cfg)
        b = 0.1 * np.eye(3)
        zero = np.zeros((3, 3))
        expected = np.block([[b, zero, zero], [b, b, zero], [b, b, b]])
        assert np.array_equal(dyn.su, expected)
        assert np.array_equal(dyn.sx, np.tile(np.eye(3), (3, 1)))

    def test_rollout_oracle(self):
        rng = np.random.default_rng(21)
        for n in range(1, 7):
            cfg = MpcConfig(horizon=n, dt=rng.uniform(0.01, 0.2))
            dyn = build_stacked_dynamics(cfg)
            x0 = rng.uniform(-1, 1, 3)
            u = rng.uniform(-1, 1, 3 * n)
            stacked = dyn.sx @ x0 + dyn.su @ u
            # Step-by-step forward simulation oracle.
            x = x0.copy()
            for k in range(n):
                x = x + cfg.dt * u[3 * k : 3 * k + 3]
                assert np.allclose(stacked[3 * k : 3 * k + 3], x, atol=1e-12)


class TestMpcConfig:
    def test_rejects_indefinite_rc(self):
        with pytest.raises(ValueError):
            MpcConfig(rc=(0.0, 1.0, 1.0))

    def test_rejects_bad_horizon(self):
        with pytest.raises(ValueError):
            MpcConfig(horizon=0)


class TestBuildQp:
    def test_on_track_zero_minimizer(self):
        cfg = MpcConfig(horizon=4, dt=0.1)
        dyn = build_stacked_dynamics(cfg)
        x = Pose2(0.3, -0.2, 0.1)
        seg = np.tile(x.as_vector(), (4, 1))
        problem = build_qp(dyn, cfg, x, seg)
        u_star = np.linalg.solve(problem.h_mat, -problem.q)
        assert np.allclose(u_star, 0.0, atol=1e-12)

    def test_single_step_closed_form(self):
        cfg = MpcConfig(horizon=1, dt=0.1, qc=(1, 1, 1), rc=(1e-9, 1e-9, 1e-9), v_max=10, omega_max=10)
        dyn = build_stacked_dynamics(cfg)
        err = np.array([0.05, -0.02, 0.01])
        x = Pose2(*err)
        seg = np.zeros((1, 3))
        problem = build_qp(dyn, cfg, x, seg)
        u = solve_qp(problem).u
        assert np.allclose(u, -err / cfg.dt, rtol=1e-6)

    def test_cost_expansion_identity(self):
        rng = np.random.default_rng(22)
        for _ in range(20):
            n = rng.integers(1, 5)
            cfg = MpcConfig(horizon=int(n), dt=0.1, qc=rng.uniform(0.5, 20, 3), rc=rng.uniform(0.1, 2, 3))
            dyn = build_stacked_dynamics(cfg)
            x = Pose2(*rng.uniform(-1, 1, 3))
            seg = rng.uniform(-1, 1, (n, 3))
            problem = build_qp(dyn, cfg, x, seg)
            u = rng.uniform(-1, 1, 3 * n)
            # Direct evaluation oracle of the stacked tracking cost.
            states = dyn.sx @ x.as_vector() + dyn.su @ u
            err = states - seg.reshape(-1)
            qbar = np.kron(np.eye(n), cfg.qc)
            rbar = np.kron(np.eye(n), cfg.rc)
            direct = err @ qbar @ err + u @ rbar @ u
            err0 = dyn.sx @ x.as_vector() - seg.reshape(-1)
            const = err0 @ qbar @ err0
            assert problem.objective(u) + const == pytest.approx(direct, abs=1e-9)

    def test_dimension_mismatch(self):
        cfg = MpcConfig(horizon=3, dt=0.1)
        dyn = build_stacked_dynamics(cfg)
        with pytest.raises(DimensionError):
            build_qp(dyn, cfg, Pose2.identity(), np.zeros((2, 3)))


class TestSolveQp:
    def test_unconstrained_interior(self):
        rng = np.random.default_rng(23)
        a = rng.normal(size=(6, 6))
        h_mat = a @ a.T + 6 * np.eye(6)
        q = rng.normal(size=6) * 0.01
        problem = QpProblem(h_mat, q, np.vstack([np.eye(6), -np.eye(6)]), np.full(12, 1e3))
        sol = solve_qp(problem)
        assert np.allclose(sol.u, np.linalg.solve(h_mat, -q), atol=1e-10)
        assert sol.stationarity < 1e-8

    def test_clipped_scalar(self):
        # min (u - 2)^2 = u^2 - 4u + 4 s.t. u <= 1.
        problem = QpProblem(np.eye(1), np.array([-2.0]), np.array([[1.0], [-1.0]]), np.array([1.0, 5.0]))
        sol = solve_qp(problem)
        assert sol.u[0] == pytest.approx(1.0, abs=1e-12)
        assert sol.lam[0] == pytest.approx(1.0, abs=1e-10)

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(24)
        for _ in range(40):
            n_steps = int(rng.integers(1, 5))
            problem = random_problem(rng, n_steps)
            sol = solve_qp(problem)
            ref = projected_gradient_oracle(problem)
            assert sol.objective <= problem.objective(ref) + 1e-6
            assert abs(sol.objective - problem.objective(ref)) < 1e-6
            # KKT conditions.
            assert sol.stationarity < 1e-8
            assert np.all(problem.g_mat @ sol.u <= problem.h_vec + 1e-10)
            assert np.all(sol.lam >= 0)
            slack = problem.g_mat @ sol.u - problem.h_vec
            assert np.abs(sol.lam * slack).max() < 1e-8

    def test_iteration_limit_failure(self):
        rng = np.random.default_rng(25)
        problem = random_problem(rng, 3)
        with pytest.raises(SolverFailureError) as exc:
            solve_qp(problem, max_iterations=1)
        assert exc.value.best_u is not None
        assert "stationarity" in exc.value.residuals


class TestMpcStep:
    def test_equilibrium(self):
        cfg = MpcConfig()
        dyn = build_stacked_dynamics(cfg)
        pose = Pose2(1.0, 2.0, 0.5)
        desired = TimedPath(cfg.dt, np.tile(pose.as_vector(), (40, 1)))
        u = mpc_step(cfg, dyn, pose, desired, 0)
        assert np.allclose(u.as_vector(), 0.0, atol=1e-10)

    def test_axis_decoupled_push(self):
        cfg = MpcConfig()
        dyn = build_stacked_dynamics(cfg)
        desired = TimedPath(cfg.dt, np.zeros((40, 3)))
        u = mpc_step(cfg, dyn, Pose2(-0.05, 0.0, 0.0), desired, 0)
        assert u.vx > 0
        assert u.vy == pytest.approx(0.0, abs=1e-12)
        assert u.omega == pytest.approx(0.0, abs=1e-12)

    def test_bounds_hard(self):
        cfg = MpcConfig(v_max=0.1, omega_max=0.2)
        dyn = build_stacked_dynamics(cfg)
        desired = TimedPath(cfg.dt, np.zeros((40, 3)))
        u = mpc_step(cfg, dyn, Pose2(-5.0, 4.0, 3.0), desired, 0)
        assert abs(u.vx) <= 0.1 + 1e-12
        assert abs(u.vy) <= 0.1 + 1e-12
        assert abs(u.omega) <= 0.2 + 1e-12

    def test_ramp_tracking_lag(self):
        # 0.1 m/s ramp in x; the closed loop should track with tiny lag and
        # a steady-state control close to the ramp velocity.
        cfg = MpcConfig()
        steps = 400
        xs = 0.1 * cfg.dt * np.arange(steps + cfg.horizon + 1)
        desired = TimedPath(cfg.dt, np.column_stack([xs, np.zeros_like(xs), np.zeros_like(xs)]))
        controller = MpcController(cfg, desired)
        pose = Pose2(0.0, 0.0, 0.0)
        lags = []
        controls = []
        for k in range(steps):
            u = controller.step(pose, k)
            controls.append(u.as_vector())
            vec = pose.as_vector() + cfg.dt * u.as_vector()
            pose = Pose2(*vec)
            lags.append(desired.samples[k + 1, 0] - pose.x)
        # Lag bound computable from the weights: rc_x * v / (qc_x * dt).
        bound = 0.01 * 0.1 / (100.0 * cfg.dt)
        assert abs(lags[-1]) <= bound + 1e-9
        assert controls[-1][0] == pytest.approx(0.1, abs=1e-3)
        assert abs(controls[-1][1]) < 1e-9

    def test_step_disturbance_recovery(self):
        cfg = MpcConfig()
        dyn = build_stacked_dynamics(cfg)
        desired = TimedPath(cfg.dt, np.zeros((80, 3)))
        pose = Pose2(0.05, 0.0, 0.0)
        errors = [abs(pose.x)]
        for k in range(30):
            u = mpc_step(cfg, dyn, pose, desired, k)
            vec = pose.as_vector() + cfg.dt * u.as_vector()
            pose = Pose2(*vec)
            errors.append(abs(pose.x))
        # Monotone decay after at most N steps.
        tail = errors[cfg.horizon :]
        assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
        assert errors[-1] < 1e-6

    def test_desired_segment_padding(self):
        path = TimedPath(0.1, np.arange(15).reshape(5, 3).astype(float))
        seg = desired_segment(path, 3, 4)
        assert seg.shape == (4, 3)
        assert np.array_equal(seg[0], path.samples[4])
        assert np.array_equal(seg[1], path.samples[4])
