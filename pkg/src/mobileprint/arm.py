"""Serial 6R arm on the mobile base: FK, geometric Jacobian, differential IK.

The nozzle axis is held vertical (pointing down) with yaw left free; the
remaining redundancy is resolved by the damped-least-squares step, which
minimizes joint velocity.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Pose2, TimedPath, Transform3, rotation_about_axis
from .errors import ConfigError, IkFailureError, JointLimitError
from .toolpath import PrintPlan

DEFAULT_DAMPING = 1e-3

# Down-pointing nozzle axis, identical in world and base frames (yaw-only base).
_DOWN = np.array([0.0, 0.0, -1.0])


@dataclass(frozen=True)
class Joint:
    """Revolute joint: rotation axis (unit, in the post-offset frame) and link offset."""

    axis: np.ndarray
    offset: Transform3

    def __post_init__(self):
        axis = np.array(self.axis, dtype=float).reshape(3)
        norm = np.linalg.norm(axis)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"joint axis must be unit length, got |axis| = {norm}")
        axis.flags.writeable = False
        object.__setattr__(self, "axis", axis)


@dataclass(frozen=True)
class KinematicChain:
    """Six-revolute-joint serial arm description."""

    joints: tuple[Joint, ...]
    joint_limits: np.ndarray
    velocity_limits: np.ndarray
    tool_offset: Transform3

    def __post_init__(self):
        if len(self.joints) != 6:
            raise ValueError(f"chain must have exactly 6 revolute joints, got {len(self.joints)}")
        limits = np.array(self.joint_limits, dtype=float)
        if limits.shape != (6, 2) or np.any(limits[:, 0] >= limits[:, 1]):
            raise ValueError("joint_limits must be (6, 2) with min < max")
        vel = np.array(self.velocity_limits, dtype=float).reshape(6)
        if np.any(vel <= 0):
            raise ValueError("velocity_limits must be positive")
        limits.flags.writeable = False
        vel.flags.writeable = False
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "joint_limits", limits)
        object.__setattr__(self, "velocity_limits", vel)

    @property
    def reach_max(self) -> float:
        """Stretched length: sum of link offset lengths plus the tool offset."""
        total = sum(float(np.linalg.norm(j.offset.translation)) for j in self.joints)
        return total + float(np.linalg.norm(self.tool_offset.translation))

    def check_limits(self, q: np.ndarray) -> None:
        q = np.asarray(q, dtype=float)
        low = self.joint_limits[:, 0] - 1e-12
        high = self.joint_limits[:, 1] + 1e-12
        bad = np.nonzero((q < low) | (q > high))[0]
        if bad.size:
            j = int(bad[0])
            raise JointLimitError(
                f"joint {j} value {q[j]:.4f} outside [{self.joint_limits[j, 0]}, "
                f"{self.joint_limits[j, 1]}]"
            )


def _frames(chain: KinematicChain, q: np.ndarray):
    """Rotation/origin of every joint frame plus the tool frame, in the base frame."""
    rot = np.eye(3)
    pos = np.zeros(3)
    origins = np.empty((6, 3))
    axes = np.empty((6, 3))
    for i, joint in enumerate(chain.joints):
        pos = rot @ joint.offset.translation + pos
        rot = rot @ joint.offset.rotation
        origins[i] = pos
        axes[i] = rot @ joint.axis
        rot = rot @ rotation_about_axis(joint.axis, q[i])
    pos = rot @ chain.tool_offset.translation + pos
    rot = rot @ chain.tool_offset.rotation
    return origins, axes, rot, pos


def forward_kinematics(chain: KinematicChain, q: Sequence[float]) -> Transform3:
    """Base-frame pose of the nozzle tip."""
    q = np.asarray(q, dtype=float)
    chain.check_limits(q)
    _, _, rot, pos = _frames(chain, q)
    return Transform3(rot, pos)


def jacobian(chain: KinematicChain, q: Sequence[float]) -> np.ndarray:
    """Geometric Jacobian: rows (linear; angular) of the tool twist in the base frame."""
    q = np.asarray(q, dtype=float)
    chain.check_limits(q)
    origins, axes, _, tool = _frames(chain, q)
    jac = np.empty((6, 6))
    for i in range(6):
        jac[:3, i] = np.cross(axes[i], tool - origins[i])
        jac[3:, i] = axes[i]
    return jac


@dataclass(frozen=True)
class ArmTrajectory:
    """Joint-space trajectory sampled at the plan rate."""

    dt: float
    q_samples: np.ndarray

    def __post_init__(self):
        arr = np.array(self.q_samples, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 6 or arr.shape[0] == 0:
            raise ValueError(f"q_samples must be (N, 6), got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "q_samples", arr)

    def __len__(self) -> int:
        return self.q_samples.shape[0]

    def max_joint_steps(self) -> np.ndarray:
        return np.abs(np.diff(self.q_samples, axis=0)).max(axis=0)


def _dls_step(chain, q, target_pos, weight_rot, damping):
    origins, axes, rot, tool = _frames(chain, q)
    err_pos = target_pos - tool
    err_rot = np.cross(rot[:, 2], _DOWN)
    jac = np.empty((6, 6))
    jac[:3] = np.cross(axes, tool - origins).T
    jac[3:] = axes.T
    twist = np.concatenate([err_pos, weight_rot * err_rot])
    jt = jac.T
    dq = jt @ np.linalg.solve(jac @ jt + damping**2 * np.eye(6), twist)
    return dq, float(np.linalg.norm(err_pos))


def solve_reach(
    chain: KinematicChain,
    target_pos: np.ndarray,
    q_seed: np.ndarray,
    iterations: int = 200,
    damping: float = DEFAULT_DAMPING,
    tol: float = 1e-10,
) -> np.ndarray:
    """Polish a seed configuration until the tool reaches target_pos, nozzle down."""
    q = np.array(q_seed, dtype=float)
    for _ in range(iterations):
        dq, err = _dls_step(chain, q, target_pos, weight_rot=0.5, damping=damping)
        q = np.clip(q + dq, chain.joint_limits[:, 0], chain.joint_limits[:, 1])
        if err < tol:
            break
    return q


def nominal_seed(chain: KinematicChain, target_pos: np.ndarray) -> np.ndarray:
    """Elbow-up seed turned toward the target.

    The mount yaw is unknown in general, so candidate base-yaw values are
    probed and the one whose forward kinematics lands closest to the target
    (within the joint limits) wins.
    """
    bearing = math.atan2(target_pos[1], target_pos[0])
    arm_pose = np.array([0.0, 0.7, 1.6, 0.0, 0.8, 0.0])
    lo, hi = chain.joint_limits[:, 0], chain.joint_limits[:, 1]
    best_q = None
    best_err = math.inf
    for yaw in (bearing, bearing - math.pi / 2, bearing + math.pi / 2, bearing + math.pi):
        q = arm_pose.copy()
        q[0] = math.remainder(yaw, 2 * math.pi)
        q = np.clip(q, lo, hi)
        _, _, _, pos = _frames(chain, q)
        err = float(np.linalg.norm(pos - target_pos))
        if err < best_err:
            best_err = err
            best_q = q
    return best_q


class ArmTracker:
    """Incremental differential-IK stepper used inside the closed loop.

    Each step expresses the world-frame nozzle target in the supplied base
    frame and runs damped-least-squares iterations from the previous joint
    configuration.
    """

    def __init__(
        self,
        chain: KinematicChain,
        q0: np.ndarray,
        damping: float = DEFAULT_DAMPING,
        pos_tol: float = 1e-4,
        inner_tol: float = 1e-7,
        max_inner: int = 10,
        max_consecutive_failures: int = 5,
    ):
        self.chain = chain
        self.q = np.array(q0, dtype=float)
        self.damping = damping
        self.pos_tol = pos_tol
        self.inner_tol = inner_tol
        self.max_inner = max_inner
        self.max_consecutive_failures = max_consecutive_failures
        self._bad_streak = 0

    def target_in_base(self, target_world: np.ndarray, base_pose: Pose2) -> np.ndarray:
        c, s = math.cos(base_pose.theta), math.sin(base_pose.theta)
        dx = target_world[0] - base_pose.x
        dy = target_world[1] - base_pose.y
        return np.array([c * dx + s * dy, -s * dx + c * dy, target_world[2]])

    def step(self, target_world: np.ndarray, base_pose: Pose2, index: int) -> np.ndarray:
        target = self.target_in_base(target_world, base_pose)
        if np.linalg.norm(target) > self.chain.reach_max:
            raise IkFailureError(
                index,
                f"target {np.linalg.norm(target):.3f} m from base exceeds stretched "
                f"reach {self.chain.reach_max:.3f} m at sample {index}",
            )
        q = self.q
        err = math.inf
        for _ in range(self.max_inner):
            dq, err = _dls_step(self.chain, q, target, weight_rot=0.5, damping=self.damping)
            q = q + dq
            if err < self.inner_tol:
                break
        if err > self.pos_tol:
            self._bad_streak += 1
            if self._bad_streak > self.max_consecutive_failures:
                raise IkFailureError(
                    index,
                    f"DLS residual {err:.2e} m stayed above {self.pos_tol} "
                    f"for {self._bad_streak} consecutive steps (sample {index})",
                )
        else:
            self._bad_streak = 0
        self.chain.check_limits(q)
        self.q = q
        return q


def differential_ik(
    chain: KinematicChain,
    plan: PrintPlan,
    base_actual: TimedPath,
    q0: np.ndarray | None = None,
    damping: float = DEFAULT_DAMPING,
) -> ArmTrajectory:
    """Joint trajectory realizing the plan's nozzle path from the actual base motion.

    base_actual must be sample-aligned with the plan.  The returned trajectory
    tracks every world-frame nozzle target to the tracker's position tolerance.
    """
    if len(base_actual) != len(plan.nozzle_path) or base_actual.dt != plan.dt:
        raise ValueError("base_actual must be sample-aligned with the plan")
    targets = plan.nozzle_path.samples
    tracker = ArmTracker(chain, np.zeros(6), damping=damping)
    first_target = tracker.target_in_base(targets[0], base_actual.pose_at(0))
    if np.linalg.norm(first_target) > chain.reach_max:
        raise IkFailureError(
            0,
            f"first nozzle waypoint {np.linalg.norm(first_target):.3f} m from base "
            f"exceeds stretched reach {chain.reach_max:.3f} m",
        )
    if q0 is None:
        q0 = solve_reach(chain, first_target, nominal_seed(chain, first_target))
    else:
        q0 = solve_reach(chain, first_target, np.asarray(q0, dtype=float))
    err0 = np.linalg.norm(forward_kinematics(chain, q0).translation - first_target)
    if err0 > 1e-4:
        raise IkFailureError(0, f"initial configuration misses first waypoint by {err0:.2e} m")
    tracker.q = q0
    qs = np.empty((len(targets), 6))
    qs[0] = q0
    for k in range(1, len(targets)):
        qs[k] = tracker.step(targets[k], base_actual.pose_at(k), k)
    return ArmTrajectory(plan.dt, qs)


def nozzle_world_positions(
    chain: KinematicChain, traj: ArmTrajectory, base_path: TimedPath
) -> np.ndarray:
    """World-frame nozzle positions of a joint trajectory carried by base_path."""
    if len(base_path) != len(traj):
        raise ValueError("trajectory and base path must be sample-aligned")
    out = np.empty((len(traj), 3))
    for k in range(len(traj)):
        tool = forward_kinematics(chain, traj.q_samples[k])
        pose = base_path.pose_at(k)
        x, y = pose.transform_point(tool.translation[0], tool.translation[1])
        out[k] = (x, y, tool.translation[2])
    return out


def _rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    rx = rotation_about_axis(np.array([1.0, 0.0, 0.0]), roll)
    ry = rotation_about_axis(np.array([0.0, 1.0, 0.0]), pitch)
    rz = rotation_about_axis(np.array([0.0, 0.0, 1.0]), yaw)
    return rz @ ry @ rx


def chain_from_dict(data: dict) -> KinematicChain:
    try:
        joints = tuple(
            Joint(
                np.array(j["axis"], dtype=float),
                Transform3(
                    _rpy_matrix(*j.get("offset_rpy", (0.0, 0.0, 0.0))),
                    np.array(j["offset_translation"], dtype=float),
                ),
            )
            for j in data["joints"]
        )
        tool = data["tool"]
        tool_offset = Transform3(
            _rpy_matrix(*tool.get("rpy", (0.0, 0.0, 0.0))),
            np.array(tool["translation"], dtype=float),
        )
        return KinematicChain(
            joints,
            np.array(data["joint_limits"], dtype=float),
            np.array(data["velocity_limits"], dtype=float),
            tool_offset,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid chain description: {exc}") from exc


def load_chain(path) -> KinematicChain:
    """Load a chain description from a JSON config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"chain file not found: {path}")
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"chain file {path} is not valid JSON: {exc}") from exc
    return chain_from_dict(data)


def default_chain_path() -> Path:
    return Path(__file__).parent / "data" / "default_chain.json"


def reference_chain() -> KinematicChain:
    """The packaged 6R chain with a 0.87 m stretched reach."""
    return load_chain(default_chain_path())
