"""Base-pose estimation from marker sightings: transform chain, delay
propagation, measurement stacking and EKF fusion.

The holonomic world-frame model keeps both the prediction and the measurement
maps linear, so the filter Jacobians are identities; only angle wrapping needs
care.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Sequence

import numpy as np

from .core import ControlInput, Pose2, Transform3, chain_transforms, project_to_se2, wrap_angle
from .errors import (
    DegenerateObservationError,
    FilterDivergenceError,
    NoVisibleMarkerError,
    UnknownMarkerError,
)

# Per-step process noise and per-marker measurement noise defaults; the sim's
# noise defaults are matched to these so consistency checks are meaningful.
DEFAULT_PROCESS_NOISE = np.diag([1e-6, 1e-6, 1e-6])
DEFAULT_MEASUREMENT_NOISE = np.diag([1e-4, 1e-4, 1e-4])

_SYM_TOL = 1e-12


@dataclass(frozen=True)
class MarkerMap:
    """Known ground-marker layout: unique ids mapped to planar world poses."""

    markers: dict[int, Transform3]

    def __post_init__(self):
        for marker_id, pose in self.markers.items():
            if abs(pose.translation[2]) > 1e-9:
                raise ValueError(f"marker {marker_id} is not on the ground plane")
            # Yaw-only check: the z axes must align.
            if abs(pose.rotation[2, 2] - 1.0) > 1e-9:
                raise ValueError(f"marker {marker_id} pose is not yaw-only")
        object.__setattr__(self, "markers", dict(self.markers))

    def __len__(self) -> int:
        return len(self.markers)

    def pose_of(self, marker_id: int) -> Transform3:
        try:
            return self.markers[marker_id]
        except KeyError:
            raise UnknownMarkerError(f"marker id {marker_id} not in map") from None


@dataclass(frozen=True)
class MarkerDetection:
    """One simulated sighting: pose of the camera in the marker frame."""

    marker_id: int
    camera_from_marker: Transform3
    capture_step: int


@dataclass(frozen=True)
class EkfState:
    """Gaussian belief over the base pose."""

    mean: Pose2
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (3, 3):
            raise ValueError(f"covariance must be 3x3, got {cov.shape}")
        if np.abs(cov - cov.T).max() > _SYM_TOL:
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive-definite")
        cov.flags.writeable = False
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class StackedMeasurement:
    """All propagated per-marker pose estimates for one time step."""

    poses: tuple[Pose2, ...]
    noise: np.ndarray

    @property
    def count(self) -> int:
        return len(self.poses)

    def vector(self) -> np.ndarray:
        return np.concatenate([p.as_vector() for p in self.poses])


def pose_from_detection(
    det: MarkerDetection, marker_map: MarkerMap, base_from_camera: Transform3
) -> Pose2:
    """Chain world<-marker, marker<-camera, camera<-base and project to SE(2)."""
    world_from_base = chain_transforms(
        [marker_map.pose_of(det.marker_id), det.camera_from_marker, base_from_camera]
    )
    return project_to_se2(world_from_base)


def propagate_delayed(
    estimate: Pose2, controls: Sequence[ControlInput], dt: float
) -> Pose2:
    """Advance a stale estimate by integrating the controls sent since capture."""
    x, y, theta = estimate.x, estimate.y, estimate.theta
    for u in controls:
        x += dt * u.vx
        y += dt * u.vy
        theta += dt * u.omega
    return Pose2(x, y, theta)


def stack_measurements(
    propagated: Sequence[Pose2], noise: np.ndarray | None = None
) -> StackedMeasurement:
    """Group all visible-marker estimates into one block measurement.

    The observation matrix is implicit (stacked identity blocks); noise is the
    same 3x3 block per marker.
    """
    if len(propagated) == 0:
        raise NoVisibleMarkerError("no visible marker to stack")
    noise = DEFAULT_MEASUREMENT_NOISE if noise is None else np.asarray(noise, dtype=float)
    if noise.shape != (3, 3):
        raise ValueError(f"per-marker noise must be 3x3, got {noise.shape}")
    return StackedMeasurement(tuple(propagated), noise.copy())


def ekf_predict(
    state: EkfState, u: ControlInput, dt: float, process_noise: np.ndarray | None = None
) -> EkfState:
    """Prediction step: mean advances by dt * u, covariance grows by Q."""
    q_mat = DEFAULT_PROCESS_NOISE if process_noise is None else np.asarray(process_noise, dtype=float)
    if np.any(np.linalg.eigvalsh((q_mat + q_mat.T) / 2) < -1e-12):
        raise ValueError("process noise must be positive semidefinite")
    mean = Pose2(
        state.mean.x + dt * u.vx,
        state.mean.y + dt * u.vy,
        state.mean.theta + dt * u.omega,
    )
    cov = state.covariance + q_mat
    return EkfState(mean, (cov + cov.T) / 2)


def ekf_update(state: EkfState, z: StackedMeasurement) -> EkfState:
    """Kalman update with stacked identity observation blocks.

    Innovation angles are wrapped before the gain is applied; the posterior
    covariance is computed in Joseph form and symmetrized.
    """
    m = z.count
    prior = state.covariance
    h_mat = np.tile(np.eye(3), (m, 1))
    r_bar = np.kron(np.eye(m), z.noise)
    innovation = np.empty(3 * m)
    mean_vec = state.mean.as_vector()
    for i, pose in enumerate(z.poses):
        diff = pose.as_vector() - mean_vec
        diff[2] = wrap_angle(diff[2])
        innovation[3 * i : 3 * i + 3] = diff
    s_mat = h_mat @ prior @ h_mat.T + r_bar
    try:
        chol = np.linalg.cholesky(s_mat)
    except np.linalg.LinAlgError as exc:
        raise FilterDivergenceError(
            "innovation covariance is not positive-definite"
        ) from exc
    # K = P H^T S^-1 via two triangular solves.
    pht = prior @ h_mat.T
    tmp = np.linalg.solve(chol, pht.T)
    gain = np.linalg.solve(chol.T, tmp).T
    new_mean_vec = mean_vec + gain @ innovation
    i_kh = np.eye(3) - gain @ h_mat
    cov = i_kh @ prior @ i_kh.T + gain @ r_bar @ gain.T
    cov = (cov + cov.T) / 2
    mean = Pose2(new_mean_vec[0], new_mean_vec[1], new_mean_vec[2])
    return EkfState(mean, cov)


def nees(state: EkfState, truth: Pose2) -> float:
    """Normalized estimation error squared against the true pose."""
    err = state.mean.minus(truth)
    return float(err @ np.linalg.solve(state.covariance, err))


class ControlHistory:
    """Ring buffer of recent controls for delay propagation."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._steps: list[int] = []
        self._controls: list[ControlInput] = []

    def record(self, step: int, u: ControlInput) -> None:
        self._steps.append(step)
        self._controls.append(u)
        if len(self._steps) > self.capacity:
            self._steps.pop(0)
            self._controls.pop(0)

    def since(self, capture_step: int) -> list[ControlInput]:
        """Controls applied at steps >= capture_step, oldest first."""
        return [u for s, u in zip(self._steps, self._controls) if s >= capture_step]
