"""Precision and accuracy assessment of the tracked base motion.

Measured points are pooled per straight segment of the desired rounded
rectangle across all laps, a line is fitted per segment, and precision is the
max / root-mean-square residual to to those lines.  Accuracy is the largest
distance between the fitted lines and the desired segments.  For Y-parallel
segments the roles of x and y are swapped before fitting.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import math
from typing import Sequence

import numpy as np

from .core import TimedPath, wrap_angle
from .errors import InsufficientDataError, VerticalDegeneracyError

DEFAULT_CORNER_MARGIN = 0.1

_MIN_SEGMENT_POINTS = 10
_HEADING_TOL = 1e-6

# Cardinal headings of an axis-aligned circuit, in traversal order.
_SEGMENT_HEADINGS = {"A": 0.0, "B": math.pi / 2, "C": math.pi, "D": -math.pi / 2}


@dataclass(frozen=True)
class SegmentGeometry:
    """One straight segment of the desired path."""

    label: str
    axis: str  # "x": segment parallel to the X axis, "y": parallel to Y
    level: float  # constant cross-axis coordinate of the desired line
    lo: float  # extent along the segment's own axis
    hi: float

    def endpoints(self) -> np.ndarray:
        if self.axis == "x":
            return np.array([[self.lo, self.level], [self.hi, self.level]])
        return np.array([[self.level, self.lo], [self.level, self.hi]])


@dataclass(frozen=True)
class LabeledSegment:
    """Measured points assigned to one desired segment."""

    geometry: SegmentGeometry
    points: np.ndarray  # (M, 2) world xy

    def fit_coordinates(self) -> np.ndarray:
        """Points with axes swapped so the independent coordinate comes first."""
        if self.geometry.axis == "x":
            return self.points
        return self.points[:, ::-1]


def desired_segments(desired: TimedPath) -> list[SegmentGeometry]:
    """Extract the four straight segments of a rounded-rectangle desired path."""
    samples = desired.samples
    out = []
    for label, heading in _SEGMENT_HEADINGS.items():
        mask = np.abs(np.array([wrap_angle(t - heading) for t in samples[:, 2]])) < _HEADING_TOL
        pts = samples[mask, :2]
        if pts.shape[0] < 2:
            raise InsufficientDataError(
                f"desired path has no straight segment at heading {heading:.3f}"
            )
        if label in ("A", "C"):
            level = float(np.median(pts[:, 1]))
            lo, hi = float(pts[:, 0].min()), float(pts[:, 0].max())
            out.append(SegmentGeometry(label, "x", level, lo, hi))
        else:
            level = float(np.median(pts[:, 0]))
            lo, hi = float(pts[:, 1].min()), float(pts[:, 1].max())
            out.append(SegmentGeometry(label, "y", level, lo, hi))
    return out


def _segment_distance(point: np.ndarray, seg: SegmentGeometry) -> float:
    if seg.axis == "x":
        t, cross = point[0], point[1]
    else:
        t, cross = point[1], point[0]
    dt = max(seg.lo - t, 0.0, t - seg.hi)
    return math.hypot(dt, cross - seg.level)


def segment_points(
    path: TimedPath,
    desired: TimedPath,
    corner_margin: float = DEFAULT_CORNER_MARGIN,
) -> list[LabeledSegment]:
    """Assign measured samples to the nearest desired straight segment.

    Points whose projection falls within corner_margin of a segment end (the
    corner arcs) are discarded.
    """
    segments = desired_segments(desired)
    buckets: dict[str, list[np.ndarray]] = {s.label: [] for s in segments}
    for point in path.samples[:, :2]:
        nearest = min(segments, key=lambda s: _segment_distance(point, s))
        t = point[0] if nearest.axis == "x" else point[1]
        if nearest.lo + corner_margin <= t <= nearest.hi - corner_margin:
            buckets[nearest.label].append(point)
    labeled = []
    for seg in segments:
        pts = np.array(buckets[seg.label])
        if pts.shape[0] < _MIN_SEGMENT_POINTS:
            raise InsufficientDataError(
                f"segment {seg.label} has only {pts.shape[0]} points "
                f"(need >= {_MIN_SEGMENT_POINTS})"
            )
        labeled.append(LabeledSegment(seg, pts))
    return labeled


@dataclass(frozen=True)
class SegmentFit:
    """Least-squares line fit y = a x + b in the segment's own coordinates."""

    axis: str
    a: float
    b: float
    n_points: int
    residuals: np.ndarray

    def distance_to_point(self, x: float, y: float) -> float:
        """Perpendicular distance from (x, y) in fit coordinates to the line."""
        return abs(self.a * x + self.b - y) / math.sqrt(1.0 + self.a**2)


def fit_line(points: np.ndarray, axis: str = "x") -> SegmentFit:
    """Least-squares y = a x + b; the first column is the independent coordinate.

    Y-parallel segments must arrive with swapped coordinates; a degenerate
    spread in the first column means the caller failed to do so.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need an (M, 2) array with at least two points")
    x, y = pts[:, 0], pts[:, 1]
    if x.max() - x.min() < 1e-6:
        raise VerticalDegeneracyError(
            "no spread in the independent coordinate; swap axes before fitting"
        )
    design = np.column_stack([x, np.ones_like(x)])
    coeff, *_ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ coeff
    return SegmentFit(axis, float(coeff[0]), float(coeff[1]), pts.shape[0], residuals)


def fit_segments(labeled: Sequence[LabeledSegment]) -> list[SegmentFit]:
    return [fit_line(seg.fit_coordinates(), seg.geometry.axis) for seg in labeled]


@dataclass(frozen=True)
class PrecisionReport:
    e_max: float
    e_mean: float  # root-mean-square residual, as printed in the assessment
    e_mean_abs: float  # plain mean absolute residual, for transparency
    fits: tuple[SegmentFit, ...]

    def __post_init__(self):
        if self.e_mean > self.e_max + 1e-15:
            raise ValueError("e_mean cannot exceed e_max")


def precision(fits: Sequence[SegmentFit]) -> PrecisionReport:
    """Pooled max and RMS residual across all fitted segments."""
    residuals = np.concatenate([f.residuals for f in fits])
    e_max = float(np.abs(residuals).max())
    e_mean = float(np.sqrt(np.mean(residuals**2)))
    e_mean_abs = float(np.abs(residuals).mean())
    return PrecisionReport(e_max, e_mean, e_mean_abs, tuple(fits))


def accuracy(fits: Sequence[SegmentFit], labeled: Sequence[LabeledSegment]) -> float:
    """Largest perpendicular distance from fitted lines to the desired segments.

    For straight-versus-straight, checking the desired segment's endpoints
    suffices.
    """
    worst = 0.0
    for fit, seg in zip(fits, labeled):
        geom = seg.geometry
        for t in (geom.lo, geom.hi):
            worst = max(worst, fit.distance_to_point(t, geom.level))
    return worst


def assess(
    path: TimedPath,
    desired: TimedPath,
    corner_margin: float = DEFAULT_CORNER_MARGIN,
) -> tuple[PrecisionReport, float, list[LabeledSegment]]:
    """Segment, fit, and score a measured path against the desired circuit."""
    labeled = segment_points(path, desired, corner_margin)
    fits = fit_segments(labeled)
    report = precision(fits)
    return report, accuracy(fits, labeled), labeled


def metrics_json(report: PrecisionReport, accuracy_m: float) -> dict:
    return {
        "e_max_m": report.e_max,
        "e_mean_m": report.e_mean,
        "e_mean_abs_m": report.e_mean_abs,
        "accuracy_m": accuracy_m,
        "segments": [
            {
                "axis": "X-parallel" if f.axis == "x" else "Y-parallel",
                "a": f.a,
                "b": f.b,
                "n_points": f.n_points,
                "e_max_m": float(np.abs(f.residuals).max()),
                "e_rms_m": float(np.sqrt(np.mean(f.residuals**2))),
            }
            for f in report.fits
        ],
    }


def write_metrics_json(path, report: PrecisionReport, accuracy_m: float) -> None:
    with open(path, "w") as f:
        json.dump(metrics_json(report, accuracy_m), f, indent=2, sort_keys=True)
        f.write("\n")


def _svg_polyline(points: np.ndarray, transform, style: str) -> str:
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in (transform(p) for p in points))
    return f'<polyline fill="none" {style} points="{coords}"/>'


def write_assessment_svg(
    path,
    measured: TimedPath,
    desired: TimedPath,
    fits: Sequence[SegmentFit] | None = None,
    labeled: Sequence[LabeledSegment] | None = None,
    nozzle: np.ndarray | None = None,
    size: int = 900,
) -> None:
    """Plot measured laps, desired circuit and fitted lines in one SVG."""
    pts = [measured.xy(), desired.xy()]
    if nozzle is not None:
        pts.append(nozzle[:, :2])
    allpts = np.vstack(pts)
    lo = allpts.min(axis=0) - 0.2
    hi = allpts.max(axis=0) + 0.2
    span = hi - lo
    scale = size / span.max()
    height = int(math.ceil(span[1] * scale))

    def transform(p):
        return ((p[0] - lo[0]) * scale, height - (p[1] - lo[1]) * scale)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(math.ceil(span[0] * scale))}" '
        f'height="{height}" viewBox="0 0 {int(math.ceil(span[0] * scale))} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    if nozzle is not None:
        parts.append(
            _svg_polyline(nozzle[:, :2], transform, 'stroke="black" stroke-width="0.8"')
        )
    parts.append(
        _svg_polyline(measured.xy(), transform, 'stroke="blue" stroke-width="0.8"')
    )
    parts.append(
        _svg_polyline(desired.xy(), transform, 'stroke="red" stroke-width="1.2"')
    )
    if fits is not None and labeled is not None:
        for fit, seg in zip(fits, labeled):
            geom = seg.geometry
            t = np.array([geom.lo, geom.hi])
            cross = fit.a * t + fit.b
            if geom.axis == "x":
                line = np.column_stack([t, cross])
            else:
                line = np.column_stack([cross, t])
            parts.append(
                _svg_polyline(
                    line,
                    transform,
                    'stroke="green" stroke-width="1.2" stroke-dasharray="6,4"',
                )
            )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
