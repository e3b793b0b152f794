"""Virtual plant and closed-loop runner.

The plant realizes exactly the linear additive-Gaussian model the filter
assumes; ground vibration and unevenness are represented only as process
noise.  The arm controller is treated as ideal, so the printed-path error is
entirely the gap between the estimated and true base poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import math
from pathlib import Path

import numpy as np

from .arm import ArmTracker, KinematicChain, forward_kinematics, nominal_seed, solve_reach
from .core import ControlInput, Pose2, TimedPath, Transform3, embed_se2, rotation_about_axis
from .errors import VisibilityFaultError
from .localization import (
    ControlHistory,
    EkfState,
    MarkerDetection,
    MarkerMap,
    ekf_predict,
    ekf_update,
    pose_from_detection,
    propagate_delayed,
    stack_measurements,
)
from .mpc import MpcConfig, MpcController
from .toolpath import PrintPlan


@dataclass(frozen=True)
class SimConfig:
    """Plant, camera and latency parameters of the virtual cell."""

    dt: float = 0.025
    process_noise_std: tuple[float, float, float] = (1e-3, 1e-3, 1e-3)
    detection_noise_std: tuple[float, float] = (1e-2, 1e-2)
    latency_steps: int = 2
    camera_fov: float = 2.2
    camera_range: float = 2.5
    seed: int = 0
    visibility_fault_window: int = 20

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if any(s < 0 for s in self.process_noise_std) or any(
            s < 0 for s in self.detection_noise_std
        ):
            raise ValueError("noise standard deviations must be >= 0")
        if self.latency_steps < 0:
            raise ValueError("latency_steps must be >= 0")

    def process_noise_cov(self) -> np.ndarray:
        return np.diag(np.square(self.process_noise_std))

    def measurement_noise_cov(self) -> np.ndarray:
        sp, sr = self.detection_noise_std
        return np.diag([sp**2, sp**2, sr**2])


@dataclass
class PlantState:
    """Ground truth of the base; advances exactly once per control step."""

    true_pose: Pose2
    step: int = 0


def plant_step(state: PlantState, u: ControlInput, cfg: SimConfig, rng) -> PlantState:
    """x_{k+1} = x_k + dt * u_k + w, with w drawn per-axis from the config."""
    noise = rng.normal(0.0, 1.0, size=3) * np.asarray(cfg.process_noise_std)
    vec = state.true_pose.as_vector() + cfg.dt * u.as_vector() + noise
    return PlantState(Pose2(vec[0], vec[1], vec[2]), state.step + 1)


def default_camera_mount() -> Transform3:
    """Camera on the back of the base, 0.55 m up, looking straight down."""
    flip = rotation_about_axis(np.array([1.0, 0.0, 0.0]), math.pi)
    return Transform3(flip, np.array([-0.35, 0.0, 0.55]))


def camera_pose_world(base: Pose2, camera_mount: Transform3) -> Transform3:
    return embed_se2(base).compose(camera_mount)


def camera_observe(
    state: PlantState,
    marker_map: MarkerMap,
    cfg: SimConfig,
    rng,
    camera_mount: Transform3 | None = None,
) -> list[MarkerDetection]:
    """Detections of every marker inside the camera's range and view cone.

    The reported camera-in-marker transform is the true relative pose
    perturbed so the implied base pose carries planar Gaussian noise; the
    stamped capture step is the current plant step.
    """
    camera_mount = default_camera_mount() if camera_mount is None else camera_mount
    world_from_camera = camera_pose_world(state.true_pose, camera_mount)
    cam_inv = world_from_camera.inverse()
    sp, sr = cfg.detection_noise_std
    detections = []
    for marker_id in sorted(marker_map.markers):
        marker = marker_map.markers[marker_id]
        in_cam = cam_inv.apply(marker.translation)
        dist = float(np.linalg.norm(in_cam))
        if dist > cfg.camera_range or dist < 1e-9:
            continue
        # View axis is camera +z; reject markers outside the cone.
        if math.acos(max(-1.0, min(1.0, in_cam[2] / dist))) > cfg.camera_fov / 2:
            continue
        eps = Pose2(
            rng.normal(0.0, sp) if sp > 0 else 0.0,
            rng.normal(0.0, sp) if sp > 0 else 0.0,
            rng.normal(0.0, sr) if sr > 0 else 0.0,
        )
        noisy_base = embed_se2(state.true_pose.compose(eps))
        camera_from_marker = marker.inverse().compose(noisy_base).compose(camera_mount)
        detections.append(MarkerDetection(marker_id, camera_from_marker, state.step))
    return detections


def grid_marker_map(
    x_range: tuple[float, float],
    y_range: tuple[float, float],
    spacing: float = 1.0,
) -> MarkerMap:
    """Regular ground grid of yaw-zero markers covering the given area."""
    xs = np.arange(x_range[0], x_range[1] + spacing / 2, spacing)
    ys = np.arange(y_range[0], y_range[1] + spacing / 2, spacing)
    markers = {}
    next_id = 0
    for y in ys:
        for x in xs:
            markers[next_id] = Transform3(np.eye(3), np.array([x, y, 0.0]))
            next_id += 1
    return MarkerMap(markers)


def marker_map_for_plan(plan: PrintPlan, spacing: float = 1.0, margin: float = 1.5) -> MarkerMap:
    """Grid map covering the base circuit with enough margin for the camera."""
    xy = plan.base_path.xy()
    return grid_marker_map(
        (xy[:, 0].min() - margin, xy[:, 0].max() + margin),
        (xy[:, 1].min() - margin, xy[:, 1].max() + margin),
        spacing,
    )


@dataclass
class SimReport:
    """Everything the closed loop produced, one row per control step."""

    dt: float
    true_path: TimedPath
    estimated_path: TimedPath
    desired_path: TimedPath
    commanded: np.ndarray
    nozzle_world: np.ndarray | None
    nozzle_plan: np.ndarray | None
    visible_counts: np.ndarray
    delivered_counts: np.ndarray
    cov_diagonals: np.ndarray
    qp_iterations: np.ndarray
    qp_stationarity: np.ndarray
    qp_objective: np.ndarray
    config: dict

    def __len__(self) -> int:
        return len(self.true_path)

    def base_tracking_errors(self) -> np.ndarray:
        """Planar distance between the true base and the desired path, per step."""
        d = self.true_path.xy() - self.desired_path.xy()
        return np.hypot(d[:, 0], d[:, 1])

    def estimation_errors(self) -> np.ndarray:
        d = self.estimated_path.xy() - self.true_path.xy()
        return np.hypot(d[:, 0], d[:, 1])

    def nozzle_errors(self) -> np.ndarray | None:
        if self.nozzle_world is None:
            return None
        d = self.nozzle_world - self.nozzle_plan
        return np.linalg.norm(d, axis=1)

    def summary(self) -> dict:
        base_err = self.base_tracking_errors()
        est_err = self.estimation_errors()
        out = {
            "steps": len(self),
            "dt": self.dt,
            "config": self.config,
            "base_tracking": {
                "max_m": float(base_err.max()),
                "rms_m": float(np.sqrt(np.mean(base_err**2))),
            },
            "estimation": {
                "max_m": float(est_err.max()),
                "rms_m": float(np.sqrt(np.mean(est_err**2))),
            },
            "visibility": {
                "min_markers": int(self.visible_counts.min()),
                "mean_markers": float(self.visible_counts.mean()),
            },
            "qp": {
                "max_iterations": int(self.qp_iterations.max()),
                "max_stationarity": float(self.qp_stationarity.max()),
                "mean_objective": float(self.qp_objective.mean()),
            },
        }
        noz = self.nozzle_errors()
        if noz is not None:
            out["nozzle"] = {
                "max_m": float(noz.max()),
                "rms_m": float(np.sqrt(np.mean(noz**2))),
            }
        return out

    def write_csv(self, path) -> None:
        cols = [
            "k", "t",
            "true_x", "true_y", "true_theta",
            "est_x", "est_y", "est_theta",
            "des_x", "des_y", "des_theta",
            "ux", "uy", "uw", "n_markers",
        ]
        has_nozzle = self.nozzle_world is not None
        if has_nozzle:
            cols += ["noz_x", "noz_y", "noz_z"]
        with open(path, "w", newline="") as f:
            f.write(",".join(cols) + "\n")
            for k in range(len(self)):
                row = [
                    str(k),
                    f"{k * self.dt:.9f}",
                    *(f"{v:.9f}" for v in self.true_path.samples[k]),
                    *(f"{v:.9f}" for v in self.estimated_path.samples[k]),
                    *(f"{v:.9f}" for v in self.desired_path.samples[k]),
                    *(f"{v:.9f}" for v in self.commanded[k]),
                    str(int(self.visible_counts[k])),
                ]
                if has_nozzle:
                    row += [f"{v:.9f}" for v in self.nozzle_world[k]]
                f.write(",".join(row) + "\n")

    def write_estimator_trace(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write("k,mean_x,mean_y,mean_theta,cov_xx,cov_yy,cov_tt,n_markers\n")
            for k in range(len(self)):
                mx, my, mt = self.estimated_path.samples[k]
                cxx, cyy, ctt = self.cov_diagonals[k]
                f.write(
                    f"{k},{mx:.9f},{my:.9f},{mt:.9f},"
                    f"{cxx:.12e},{cyy:.12e},{ctt:.12e},{int(self.delivered_counts[k])}\n"
                )

    def write_controller_trace(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write("k,ux,uy,uw,qp_iters,qp_residual\n")
            for k in range(len(self)):
                ux, uy, uw = self.commanded[k]
                f.write(
                    f"{k},{ux:.9f},{uy:.9f},{uw:.9f},"
                    f"{int(self.qp_iterations[k])},{self.qp_stationarity[k]:.3e}\n"
                )


def run_closed_loop(
    plan: PrintPlan,
    marker_map: MarkerMap,
    sim_cfg: SimConfig,
    mpc_cfg: MpcConfig | None = None,
    chain: KinematicChain | None = None,
    ekf_process_noise: np.ndarray | None = None,
    ekf_measurement_noise: np.ndarray | None = None,
    camera_mount: Transform3 | None = None,
) -> SimReport:
    """Run the full print-while-moving loop against the virtual plant.

    Per step: deliver due detections, EKF predict/update, MPC on the estimate,
    plant step, and (when a chain is supplied) one differential-IK step against
    the estimated base pose with the nozzle logged against the true pose.
    """
    if mpc_cfg is None:
        mpc_cfg = MpcConfig(dt=sim_cfg.dt)
    if mpc_cfg.dt != sim_cfg.dt or plan.dt != sim_cfg.dt:
        raise ValueError("plan, controller and simulation must share dt")
    camera_mount = default_camera_mount() if camera_mount is None else camera_mount
    q_mat = (
        sim_cfg.process_noise_cov()
        if ekf_process_noise is None
        else np.asarray(ekf_process_noise, dtype=float)
    )
    r_mat = (
        sim_cfg.measurement_noise_cov()
        if ekf_measurement_noise is None
        else np.asarray(ekf_measurement_noise, dtype=float)
    )
    # A perfectly zero covariance is not a valid Gaussian for the update.
    if not np.any(r_mat):
        r_mat = np.diag([1e-12, 1e-12, 1e-12])

    rng = np.random.default_rng(sim_cfg.seed)
    steps = len(plan)
    desired = plan.base_path
    controller = MpcController(mpc_cfg, desired)
    plant = PlantState(desired.pose_at(0), 0)
    state = EkfState(plant.true_pose, 1e-10 * np.eye(3))
    history = ControlHistory(capacity=max(sim_cfg.latency_steps + 1, 8))
    pending: dict[int, list[MarkerDetection]] = {}

    tracker = None
    nozzle_world = None
    if chain is not None:
        first_target_world = plan.nozzle_path.samples[0]
        tracker = ArmTracker(chain, np.zeros(6))
        first_target = tracker.target_in_base(first_target_world, state.mean)
        tracker.q = solve_reach(chain, first_target, nominal_seed(chain, first_target))
        nozzle_world = np.empty((steps, 3))

    true_samples = np.empty((steps, 3))
    est_samples = np.empty((steps, 3))
    commanded = np.empty((steps, 3))
    visible_counts = np.empty(steps, dtype=int)
    delivered_counts = np.empty(steps, dtype=int)
    cov_diagonals = np.empty((steps, 3))
    qp_iterations = np.empty(steps, dtype=int)
    qp_stationarity = np.empty(steps)
    qp_objective = np.empty(steps)

    last_control = ControlInput.zero()
    blind_streak = 0

    for k in range(steps):
        if k > 0:
            state = ekf_predict(state, last_control, sim_cfg.dt, q_mat)

        detections = camera_observe(plant, marker_map, sim_cfg, rng, camera_mount)
        visible_counts[k] = len(detections)
        if detections:
            blind_streak = 0
            pending.setdefault(k + sim_cfg.latency_steps, []).extend(detections)
        else:
            blind_streak += 1
            if blind_streak > sim_cfg.visibility_fault_window:
                raise VisibilityFaultError(k)

        due = pending.pop(k, [])
        delivered_counts[k] = len(due)
        if due:
            propagated = []
            for det in due:
                raw = pose_from_detection(det, marker_map, camera_mount.inverse())
                propagated.append(
                    propagate_delayed(raw, history.since(det.capture_step), sim_cfg.dt)
                )
            state = ekf_update(state, stack_measurements(propagated, r_mat))

        true_samples[k] = plant.true_pose.as_vector()
        est_samples[k] = state.mean.as_vector()
        cov_diagonals[k] = np.diag(state.covariance)

        u = controller.step(state.mean, k)
        sol = controller.last_solution
        commanded[k] = u.as_vector()
        qp_iterations[k] = sol.iterations
        qp_stationarity[k] = sol.stationarity
        qp_objective[k] = sol.objective

        if tracker is not None:
            q = tracker.step(plan.nozzle_path.samples[k], state.mean, k)
            tool = forward_kinematics(chain, q)
            x, y = plant.true_pose.transform_point(tool.translation[0], tool.translation[1])
            nozzle_world[k] = (x, y, tool.translation[2])

        history.record(k, u)
        last_control = u
        plant = plant_step(plant, u, sim_cfg, rng)

    config_echo = {
        "sim": {
            "dt": sim_cfg.dt,
            "process_noise_std": list(sim_cfg.process_noise_std),
            "detection_noise_std": list(sim_cfg.detection_noise_std),
            "latency_steps": sim_cfg.latency_steps,
            "camera_fov": sim_cfg.camera_fov,
            "camera_range": sim_cfg.camera_range,
            "seed": sim_cfg.seed,
        },
        "mpc": {
            "horizon": mpc_cfg.horizon,
            "qc": np.diag(mpc_cfg.qc).tolist(),
            "rc": np.diag(mpc_cfg.rc).tolist(),
            "v_max": mpc_cfg.v_max,
            "omega_max": mpc_cfg.omega_max,
        },
        "ekf": {"q_diag": np.diag(q_mat).tolist(), "r_diag": np.diag(r_mat).tolist()},
        "markers": len(marker_map),
        "arm": chain is not None,
    }
    return SimReport(
        dt=sim_cfg.dt,
        true_path=TimedPath(sim_cfg.dt, true_samples),
        estimated_path=TimedPath(sim_cfg.dt, est_samples),
        desired_path=TimedPath(sim_cfg.dt, desired.samples[:steps]),
        commanded=commanded,
        nozzle_world=nozzle_world,
        nozzle_plan=plan.nozzle_path.samples[:steps].copy() if tracker is not None else None,
        visible_counts=visible_counts,
        delivered_counts=delivered_counts,
        cov_diagonals=cov_diagonals,
        qp_iterations=qp_iterations,
        qp_stationarity=qp_stationarity,
        qp_objective=qp_objective,
        config=config_echo,
    )
