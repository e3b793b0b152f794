"""Finite-horizon linear MPC for the holonomic base.

World-frame velocity commands make the base dynamics exactly linear
(A = I, B = dt * I), so the tracking problem stacks into a dense, strictly
convex QP with per-step input box constraints, solved by an active-set method.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ControlInput, Pose2, TimedPath, wrap_angle
from .errors import DimensionError, SolverFailureError

DEFAULT_HORIZON = 10
DEFAULT_DT = 0.025
DEFAULT_QC = (100.0, 100.0, 10.0)
# Small input weight keeps the tracking lag of a moving reference sub-millimeter.
DEFAULT_RC = (0.01, 0.01, 0.01)
DEFAULT_V_MAX = 0.3
DEFAULT_OMEGA_MAX = 0.5

_KKT_STATIONARITY_TOL = 1e-8
_KKT_FEASIBILITY_TOL = 1e-10


def _as_weight(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.shape == (3,):
        arr = np.diag(arr)
    if arr.shape != (3, 3):
        raise ValueError(f"{name} must be a 3-vector of diagonal weights or a 3x3 matrix")
    return arr


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, step, weights and input bounds of the controller."""

    horizon: int = DEFAULT_HORIZON
    dt: float = DEFAULT_DT
    qc: np.ndarray = DEFAULT_QC
    rc: np.ndarray = DEFAULT_RC
    v_max: float = DEFAULT_V_MAX
    omega_max: float = DEFAULT_OMEGA_MAX

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        qc = _as_weight(self.qc, "qc")
        rc = _as_weight(self.rc, "rc")
        if np.any(np.linalg.eigvalsh((qc + qc.T) / 2) < -1e-12):
            raise ValueError("qc must be positive semidefinite")
        if np.any(np.linalg.eigvalsh((rc + rc.T) / 2) <= 0):
            raise ValueError("rc must be strictly positive definite")
        if self.v_max <= 0 or self.omega_max <= 0:
            raise ValueError("velocity bounds must be positive")
        qc.flags.writeable = False
        rc.flags.writeable = False
        object.__setattr__(self, "qc", qc)
        object.__setattr__(self, "rc", rc)

    def input_bounds(self) -> np.ndarray:
        """Per-step component bounds (v_max, v_max, omega_max) tiled over the horizon."""
        return np.tile([self.v_max, self.v_max, self.omega_max], self.horizon)


@dataclass(frozen=True)
class StackedDynamics:
    """Batch prediction matrices: X = Sx x_k + Su U."""

    sx: np.ndarray
    su: np.ndarray

    def __post_init__(self):
        sx = np.array(self.sx, dtype=float)
        su = np.array(self.su, dtype=float)
        n = sx.shape[0] // 3
        if sx.shape != (3 * n, 3) or su.shape != (3 * n, 3 * n):
            raise ValueError("sx must be (3N, 3) and su (3N, 3N)")
        sx.flags.writeable = False
        su.flags.writeable = False
        object.__setattr__(self, "sx", sx)
        object.__setattr__(self, "su", su)

    @property
    def horizon(self) -> int:
        return self.sx.shape[0] // 3


def build_stacked_dynamics(cfg: MpcConfig) -> StackedDynamics:
    """A = I3 collapses every A^k B block to dt * I3."""
    n = cfg.horizon
    sx = np.tile(np.eye(3), (n, 1))
    su = np.kron(np.tril(np.ones((n, n))), cfg.dt * np.eye(3))
    return StackedDynamics(sx, su)


@dataclass(frozen=True)
class QpProblem:
    """Dense strictly convex QP: min U^T H U + 2 q^T U  s.t.  G U <= h."""

    h_mat: np.ndarray
    q: np.ndarray
    g_mat: np.ndarray
    h_vec: np.ndarray

    def __post_init__(self):
        h_mat = np.array(self.h_mat, dtype=float)
        q = np.array(self.q, dtype=float).reshape(-1)
        g_mat = np.array(self.g_mat, dtype=float)
        h_vec = np.array(self.h_vec, dtype=float).reshape(-1)
        n = h_mat.shape[0]
        if h_mat.shape != (n, n) or q.shape != (n,):
            raise DimensionError("H must be square and q of matching length")
        if np.abs(h_mat - h_mat.T).max() > 1e-10:
            raise ValueError("H must be symmetric")
        if g_mat.shape[0] != h_vec.shape[0] or g_mat.shape[1] != n:
            raise DimensionError("G and h dimensions do not match H")
        if np.any(h_vec < 0):
            raise ValueError("U = 0 must be feasible: h >= 0 required")
        for arr in (h_mat, q, g_mat, h_vec):
            arr.flags.writeable = False
        object.__setattr__(self, "h_mat", h_mat)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "g_mat", g_mat)
        object.__setattr__(self, "h_vec", h_vec)

    def objective(self, u: np.ndarray) -> float:
        return float(u @ self.h_mat @ u + 2.0 * self.q @ u)


def build_qp(
    dyn: StackedDynamics,
    cfg: MpcConfig,
    x_k: Pose2,
    x_desired: np.ndarray,
) -> QpProblem:
    """Assemble the tracking QP for one control step.

    x_desired is the (N, 3) segment of the desired trajectory starting at
    k + 1.  The cost U^T H U + 2 q^T U equals the stacked tracking cost
    ||X - X^d||^2_Qbar + ||U||^2_Rbar up to a U-independent constant.
    """
    n = cfg.horizon
    x_desired = np.asarray(x_desired, dtype=float)
    if x_desired.shape != (n, 3):
        raise DimensionError(
            f"desired segment must be ({n}, 3), got {x_desired.shape}"
        )
    qbar = np.kron(np.eye(n), cfg.qc)
    rbar = np.kron(np.eye(n), cfg.rc)
    h_mat = dyn.su.T @ qbar @ dyn.su + rbar
    h_mat = (h_mat + h_mat.T) / 2
    err0 = dyn.sx @ x_k.as_vector() - x_desired.reshape(-1)
    q = dyn.su.T @ qbar @ err0
    g_mat = np.vstack([np.eye(3 * n), -np.eye(3 * n)])
    h_vec = np.concatenate([cfg.input_bounds(), cfg.input_bounds()])
    return QpProblem(h_mat, q, g_mat, h_vec)


@dataclass(frozen=True)
class QpSolution:
    u: np.ndarray
    lam: np.ndarray
    iterations: int
    objective: float
    stationarity: float

    def first_control(self) -> ControlInput:
        return ControlInput.from_vector(self.u[:3])


def solve_qp(problem: QpProblem, max_iterations: int | None = None) -> QpSolution:
    """Dense primal active-set method for a strictly convex inequality QP.

    Starts from the feasible point U = 0 and returns a KKT point:
    stationarity ||H U + q + G^T lam||_inf < 1e-8, primal feasibility to
    1e-10, complementary slackness and lam >= 0.
    """
    h_mat, q, g_mat, h_vec = problem.h_mat, problem.q, problem.g_mat, problem.h_vec
    n = h_mat.shape[0]
    m = g_mat.shape[0]
    if max_iterations is None:
        max_iterations = 3 * m + 10
    u = np.zeros(n)
    active: list[int] = []
    lam_full = np.zeros(m)
    for iteration in range(1, max_iterations + 1):
        na = len(active)
        if na == 0:
            u_star = np.linalg.solve(h_mat, -q)
            lam_active = np.empty(0)
        else:
            ga = g_mat[active]
            kkt = np.zeros((n + na, n + na))
            kkt[:n, :n] = h_mat
            kkt[:n, n:] = ga.T
            kkt[n:, :n] = ga
            rhs = np.concatenate([-q, h_vec[active]])
            sol = np.linalg.solve(kkt, rhs)
            u_star = sol[:n]
            lam_active = sol[n:]
        step = u_star - u
        if np.abs(step).max() < 1e-14:
            # At the subspace optimum: drop a negative multiplier or finish.
            if na and lam_active.min() < -1e-12:
                drop = active[int(np.argmin(lam_active))]
                active.remove(drop)
                continue
            lam_full = np.zeros(m)
            if na:
                lam_full[active] = np.maximum(lam_active, 0.0)
            stationarity = float(
                np.abs(h_mat @ u + q + g_mat.T @ lam_full).max()
            )
            return QpSolution(
                u=u,
                lam=lam_full,
                iterations=iteration,
                objective=problem.objective(u),
                stationarity=stationarity,
            )
        # Walk toward the subspace optimum until a new constraint blocks.
        gu = g_mat @ step
        slack = h_vec - g_mat @ u
        blocking = -1
        alpha = 1.0
        for i in range(m):
            if i in active or gu[i] <= 1e-14:
                continue
            ratio = slack[i] / gu[i]
            if ratio < alpha - 1e-15:
                alpha = ratio
                blocking = i
        u = u + alpha * step
        if blocking >= 0:
            active.append(blocking)
    res = {
        "stationarity": float(np.abs(h_mat @ u + q + g_mat.T @ lam_full).max()),
        "violation": float(np.maximum(g_mat @ u - h_vec, 0).max()),
    }
    raise SolverFailureError(
        f"active-set QP did not converge in {max_iterations} iterations",
        best_u=u,
        residuals=res,
    )


def desired_segment(desired: TimedPath, k: int, n: int) -> np.ndarray:
    """Samples k+1 .. k+N of the desired trajectory, holding the final pose."""
    samples = desired.samples
    idx = np.minimum(np.arange(k + 1, k + n + 1), len(samples) - 1)
    return samples[idx]


def continuous_theta_segment(theta_anchor: float, seg: np.ndarray) -> np.ndarray:
    """Lift the segment's wrapped headings onto the branch nearest the anchor.

    The QP treats theta as an unconstrained linear state, so reference jumps
    across +-pi must be removed before the cost is assembled.
    """
    out = np.array(seg, dtype=float)
    prev = theta_anchor
    for i in range(out.shape[0]):
        prev = prev + wrap_angle(out[i, 2] - prev)
        out[i, 2] = prev
    return out


class MpcController:
    """Receding-horizon tracker; precomputes everything that does not depend on k."""

    def __init__(self, cfg: MpcConfig, desired: TimedPath):
        self.cfg = cfg
        self.desired = desired
        self.dyn = build_stacked_dynamics(cfg)
        n = cfg.horizon
        self._qbar = np.kron(np.eye(n), cfg.qc)
        rbar = np.kron(np.eye(n), cfg.rc)
        h_mat = self.dyn.su.T @ self._qbar @ self.dyn.su + rbar
        self._h_mat = (h_mat + h_mat.T) / 2
        self._su_t_qbar = self.dyn.su.T @ self._qbar
        self._g_mat = np.vstack([np.eye(3 * n), -np.eye(3 * n)])
        self._h_vec = np.concatenate([cfg.input_bounds(), cfg.input_bounds()])
        self._problem_template = QpProblem(self._h_mat, np.zeros(3 * n), self._g_mat, self._h_vec)
        self.last_solution: QpSolution | None = None

    def step(self, x_hat: Pose2, k: int) -> ControlInput:
        seg = desired_segment(self.desired, k, self.cfg.horizon)
        seg = continuous_theta_segment(x_hat.theta, seg)
        err0 = self.dyn.sx @ x_hat.as_vector() - seg.reshape(-1)
        q = self._su_t_qbar @ err0
        problem = QpProblem(self._h_mat, q, self._g_mat, self._h_vec)
        self.last_solution = solve_qp(problem)
        return self.last_solution.first_control()


def mpc_step(
    cfg: MpcConfig,
    dyn: StackedDynamics,
    x_hat: Pose2,
    desired: TimedPath,
    k: int,
) -> ControlInput:
    """One receding-horizon step: build the QP at k, solve, return u_k."""
    seg = continuous_theta_segment(x_hat.theta, desired_segment(desired, k, cfg.horizon))
    problem = build_qp(dyn, cfg, x_hat, seg)
    return solve_qp(problem).first_control()
