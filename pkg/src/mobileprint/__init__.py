"""Printing-while-moving mobile 3D-printing cell: planning, localization, control, metrics."""

from .core import ControlInput, Pose2, TimedPath, Transform3, wrap_angle

__all__ = ["ControlInput", "Pose2", "TimedPath", "Transform3", "wrap_angle"]

__version__ = "0.1.0"
