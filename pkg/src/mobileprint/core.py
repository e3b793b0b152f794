"""Shared geometric and temporal types: planar poses, rigid transforms, timed paths."""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateObservationError

TWO_PI = 2.0 * math.pi

# Largest roll/pitch (rad) a transform may carry and still count as planar.
DEFAULT_MAX_TILT = 0.05

_ORTHO_TOL = 1e-9


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return math.pi - (math.pi - theta) % TWO_PI


@dataclass(frozen=True)
class Pose2:
    """SE(2) pose of the mobile base: x, y in meters, theta in radians.

    theta is always stored wrapped to (-pi, pi].
    """

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_vector(cls, vec: Iterable[float]) -> "Pose2":
        x, y, theta = vec
        return cls(float(x), float(y), float(theta))

    def as_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    def compose(self, other: "Pose2") -> "Pose2":
        c = math.cos(self.theta)
        s = math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2":
        c = math.cos(self.theta)
        s = math.sin(self.theta)
        return Pose2(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.theta)

    def transform_point(self, px: float, py: float) -> tuple[float, float]:
        c = math.cos(self.theta)
        s = math.sin(self.theta)
        return self.x + c * px - s * py, self.y + s * px + c * py

    def minus(self, other: "Pose2") -> np.ndarray:
        """Component-wise difference with the angle re-wrapped."""
        return np.array(
            [self.x - other.x, self.y - other.y, wrap_angle(self.theta - other.theta)]
        )


def compose_pose(a: Pose2, b: Pose2) -> Pose2:
    """Group composition a . b with the angle wrapped."""
    return a.compose(b)


def _check_rotation(rot: np.ndarray) -> None:
    if rot.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rot.shape}")
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err > _ORTHO_TOL:
        raise ValueError(f"rotation is not orthonormal (|R^T R - I| = {err:.2e})")
    det = np.linalg.det(rot)
    if abs(det - 1.0) > _ORTHO_TOL:
        raise ValueError(f"rotation determinant {det:.12f} != +1")


@dataclass(frozen=True)
class Transform3:
    """Rigid transform: 3x3 orthonormal rotation (det +1) plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float)
        tra = np.array(self.translation, dtype=float).reshape(3)
        _check_rotation(rot)
        rot.flags.writeable = False
        tra.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "Transform3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "Transform3":
        mat = np.asarray(mat, dtype=float)
        if mat.shape != (4, 4):
            raise ValueError(f"homogeneous matrix must be 4x4, got {mat.shape}")
        return cls(mat[:3, :3], mat[:3, 3])

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other: "Transform3") -> "Transform3":
        return Transform3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Transform3":
        rot_t = self.rotation.T
        return Transform3(rot_t, -rot_t @ self.translation)

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if not math.isclose(norm, 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError(f"axis must be unit length, got |axis| = {norm}")
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def chain_transforms(transforms: Sequence[Transform3]) -> Transform3:
    """Left-to-right composition of a non-empty transform sequence."""
    if len(transforms) == 0:
        raise ValueError("chain_transforms requires at least one transform")
    out = transforms[0]
    for t in transforms[1:]:
        out = out.compose(t)
    return out


def embed_se2(pose: Pose2, z: float = 0.0) -> Transform3:
    """Lift a planar pose into a z-up 3D transform."""
    return Transform3(rot_z(pose.theta), np.array([pose.x, pose.y, z]))


def project_to_se2(t: Transform3, max_tilt: float = DEFAULT_MAX_TILT) -> Pose2:
    """Project a near-planar transform to (x, y, yaw).

    Raises DegenerateObservationError when roll or pitch exceeds max_tilt,
    which signals a bad simulated detection.
    """
    rot = t.rotation
    pitch = -math.asin(max(-1.0, min(1.0, rot[2, 0])))
    roll = math.atan2(rot[2, 1], rot[2, 2])
    if max(abs(roll), abs(pitch)) > max_tilt:
        raise DegenerateObservationError(
            f"out-of-plane rotation (roll={roll:.4f}, pitch={pitch:.4f} rad) "
            f"exceeds tolerance {max_tilt}"
        )
    yaw = math.atan2(rot[1, 0], rot[0, 0])
    return Pose2(t.translation[0], t.translation[1], yaw)


@dataclass(frozen=True)
class TimedPath:
    """Uniformly sampled path: dt in seconds, samples as an (N, 3) array.

    Rows are (x, y, theta) poses for base paths or (x, y, z) waypoints for
    nozzle paths; which one is a property of the producing operation.
    """

    dt: float
    samples: np.ndarray

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        arr = np.array(self.samples, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
            raise ValueError(f"samples must be a non-empty (N, 3) array, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "samples", arr)

    @classmethod
    def from_poses(cls, dt: float, poses: Sequence[Pose2]) -> "TimedPath":
        return cls(dt, np.array([[p.x, p.y, p.theta] for p in poses]))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        """Time spanned by the samples: (N - 1) * dt."""
        return (len(self) - 1) * self.dt

    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def xy(self) -> np.ndarray:
        return self.samples[:, :2]

    def pose_at(self, k: int) -> Pose2:
        x, y, theta = self.samples[k]
        return Pose2(x, y, theta)

    def step_lengths(self) -> np.ndarray:
        """Planar (xy) distance between consecutive samples."""
        d = np.diff(self.samples[:, :2], axis=0)
        return np.hypot(d[:, 0], d[:, 1])

    def path_length(self) -> float:
        """Total planar arc length."""
        return float(self.step_lengths().sum())

    def speeds(self) -> np.ndarray:
        """Planar speed of each step."""
        return self.step_lengths() / self.dt


@dataclass(frozen=True)
class ControlInput:
    """World-frame velocity command: vx, vy in m/s, omega in rad/s."""

    vx: float
    vy: float
    omega: float

    def __post_init__(self):
        for name in ("vx", "vy", "omega"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)

    @classmethod
    def zero(cls) -> "ControlInput":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_vector(cls, vec: Iterable[float]) -> "ControlInput":
        vx, vy, omega = vec
        return cls(float(vx), float(vy), float(omega))

    def as_vector(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.omega], dtype=float)
