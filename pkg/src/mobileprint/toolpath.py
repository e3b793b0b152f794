"""Layer-by-layer nozzle path generation, base-path prescription and synchronization.

The nozzle traces each layer's footprint contour (plus an optional wall-tooth
serpentine) at constant planar speed; the base is prescribed a rounded offset
circuit of the footprint and synchronized so it completes exactly one circuit
per nozzle lap.
"""

from __future__ import annotations

from dataclasses import dataclass
import csv
import math
from typing import Sequence

import numpy as np

from .core import Pose2, TimedPath, wrap_angle
from .errors import InvalidSpecError, PlanningError, SynchronizationError

# Arm reach bound used for planning feasibility (meters).
DEFAULT_REACH_MAX = 0.87
DEFAULT_REACH_MIN = 0.2

# Lateral base offset defaults; standoff leaves kinematic margin below reach_max.
DEFAULT_STANDOFF = 0.40
DEFAULT_CLEARANCE = 0.25

_AREA_TOL = 1e-12


def _close_polyline(points: np.ndarray) -> np.ndarray:
    if not np.allclose(points[0], points[-1]):
        points = np.vstack([points, points[0]])
    return points


def _signed_area(points: np.ndarray) -> float:
    x, y = points[:-1, 0], points[:-1, 1]
    xn, yn = points[1:, 0], points[1:, 1]
    return 0.5 * float(np.sum(x * yn - xn * y))


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _is_simple(points: np.ndarray) -> bool:
    n = len(points) - 1
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_intersect(points[i], points[i + 1], points[j], points[j + 1]):
                return False
    return True


def point_in_polygon(x: float, y: float, polygon: np.ndarray) -> bool:
    """Even-odd rule test against a closed polyline."""
    inside = False
    pts = polygon
    for i in range(len(pts) - 1):
        x1, y1 = pts[i]
        x2, y2 = pts[i + 1]
        if (y1 > y) != (y2 > y):
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x_cross > x:
                inside = not inside
    return inside


def distance_to_polygon(x: float, y: float, polygon: np.ndarray) -> float:
    """Distance from a point to the closest polygon edge (segments, not lines)."""
    best = math.inf
    for i in range(len(polygon) - 1):
        ax, ay = polygon[i]
        bx, by = polygon[i + 1]
        dx, dy = bx - ax, by - ay
        seg_len2 = dx * dx + dy * dy
        if seg_len2 == 0.0:
            d = math.hypot(x - ax, y - ay)
        else:
            t = max(0.0, min(1.0, ((x - ax) * dx + (y - ay) * dy) / seg_len2))
            d = math.hypot(x - (ax + t * dx), y - (ay + t * dy))
        best = min(best, d)
    return best


@dataclass(frozen=True)
class StructureSpec:
    """Printable structure: closed footprint polyline plus vertical build parameters.

    footprint: (V, 2) closed polyline in meters.  infill_spacing = 0 means
    contour-only layers.
    """

    footprint: np.ndarray
    length: float
    width: float
    height: float
    layer_height: float
    infill_spacing: float = 0.0

    def __post_init__(self):
        pts = np.array(self.footprint, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise InvalidSpecError("footprint must be an (V, 2) polyline with V >= 3")
        pts = _close_polyline(pts)
        if abs(_signed_area(pts)) < _AREA_TOL:
            raise InvalidSpecError("footprint has zero area")
        if _signed_area(pts) < 0:
            pts = pts[::-1].copy()
        if not _is_simple(pts):
            raise InvalidSpecError("footprint is self-intersecting")
        pts.flags.writeable = False
        object.__setattr__(self, "footprint", pts)
        if self.height <= 0 or self.layer_height <= 0:
            raise InvalidSpecError("height and layer_height must be positive")
        ratio = self.height / self.layer_height
        if abs(ratio - round(ratio)) > 1e-9:
            raise InvalidSpecError(
                f"height {self.height} is not an integer multiple of layer_height "
                f"{self.layer_height}"
            )
        if self.infill_spacing < 0:
            raise InvalidSpecError("infill_spacing must be >= 0")

    @classmethod
    def rectangle(
        cls,
        length: float,
        width: float,
        height: float,
        layer_height: float,
        infill_spacing: float = 0.0,
    ) -> "StructureSpec":
        """Axis-aligned rectangular footprint with one corner at the origin."""
        if length <= 0 or width <= 0:
            raise InvalidSpecError("rectangle sides must be positive")
        footprint = np.array(
            [[0.0, 0.0], [length, 0.0], [length, width], [0.0, width], [0.0, 0.0]]
        )
        return cls(footprint, length, width, height, layer_height, infill_spacing)

    @property
    def layer_count(self) -> int:
        return int(round(self.height / self.layer_height))

    def perimeter(self) -> float:
        d = np.diff(self.footprint, axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())


def _is_axis_aligned_rectangle(pts: np.ndarray) -> bool:
    if len(pts) != 5:
        return False
    d = np.diff(pts, axis=0)
    for dx, dy in d:
        if abs(dx) > 1e-12 and abs(dy) > 1e-12:
            return False
    return True


def _serpentine_teeth(spec: StructureSpec) -> list[tuple[float, float]]:
    """Square-wave teeth inserted along the footprint's first edge.

    Teeth dive into the interior with a depth proportional to the footprint
    width, so widening the structure pushes the nozzle farther from any
    exterior base circuit.  The toothed band is centered on the edge.
    """
    s = spec.infill_spacing
    pts = spec.footprint
    if not _is_axis_aligned_rectangle(pts):
        raise InvalidSpecError("serpentine infill requires an axis-aligned rectangular footprint")
    edge_len = float(np.hypot(*(pts[1] - pts[0])))
    cross = spec.width if abs(pts[1][1] - pts[0][1]) < 1e-12 else spec.length
    if s >= min(edge_len, cross) / 2:
        raise InvalidSpecError(
            f"infill_spacing {s} too large for footprint {edge_len} x {cross}"
        )
    depth = 0.20 * (cross - s)
    band = min(cross, edge_len - 2 * s)
    n_teeth = max(1, int(band // (2 * s)))
    start = (edge_len - (2 * n_teeth - 1) * s) / 2
    teeth = []
    for i in range(n_teeth):
        x0 = start + 2 * i * s
        teeth.append((x0, x0 + s, depth))
    return teeth


def _layer_polyline(spec: StructureSpec) -> np.ndarray:
    """One closed lap: footprint contour with optional serpentine teeth."""
    pts = spec.footprint
    if spec.infill_spacing == 0.0:
        return pts.copy()
    teeth = _serpentine_teeth(spec)
    # Teeth are traced while running the first edge (pts[0] -> pts[1]).
    a, b = pts[0], pts[1]
    edge_dir = (b - a) / np.hypot(*(b - a))
    # Interior normal: footprint is CCW so the interior is to the left.
    normal = np.array([-edge_dir[1], edge_dir[0]])
    lap = [a]
    for x0, x1, depth in teeth:
        lap.append(a + edge_dir * x0)
        lap.append(a + edge_dir * x0 + normal * depth)
        lap.append(a + edge_dir * x1 + normal * depth)
        lap.append(a + edge_dir * x1)
    lap.extend(pts[1:])
    return np.array(lap)


def _resample_closed(polyline: np.ndarray, ds: float) -> tuple[np.ndarray, int]:
    """Sample a closed polyline at uniform arc steps, excluding the end point.

    Step count is rounded so the lap closes exactly; returns (points, steps).
    """
    seg = np.diff(polyline, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    total = float(seg_len.sum())
    if total <= 0:
        raise InvalidSpecError("degenerate lap polyline")
    steps = max(1, int(round(total / ds)))
    arc = np.arange(steps) * (total / steps)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    idx = np.searchsorted(cum, arc, side="right") - 1
    idx = np.clip(idx, 0, len(seg_len) - 1)
    frac = (arc - cum[idx]) / np.where(seg_len[idx] > 0, seg_len[idx], 1.0)
    pts = polyline[idx] + seg[idx] * frac[:, None]
    return pts, steps


def slice_structure(spec: StructureSpec, nozzle_speed: float, dt: float) -> TimedPath:
    """Build the 3D nozzle path: constant-speed laps, one per layer, bottom-up.

    Each layer traces the lap polyline at z = (layer_index + 1) * layer_height;
    the nozzle rises to the next layer over the single step that closes the lap
    at the seam.  Planar arc length between consecutive samples is uniform.
    """
    if nozzle_speed <= 0:
        raise InvalidSpecError(f"nozzle_speed must be positive, got {nozzle_speed}")
    if dt <= 0:
        raise InvalidSpecError(f"dt must be positive, got {dt}")
    lap = _layer_polyline(spec)
    ds = nozzle_speed * dt
    lap_pts, steps = _resample_closed(lap, ds)
    n_layers = spec.layer_count
    samples = np.empty((n_layers * steps + 1, 3))
    for j in range(n_layers):
        z = (j + 1) * spec.layer_height
        block = samples[j * steps : (j + 1) * steps]
        block[:, :2] = lap_pts
        block[:, 2] = z
    samples[-1, :2] = lap[0]
    samples[-1, 2] = n_layers * spec.layer_height
    return TimedPath(dt, samples)


class _Piece:
    """Constant-curvature piece of the base circuit (line or arc)."""

    __slots__ = ("kind", "p0", "p1", "center", "a0", "a1", "radius", "length")

    def __init__(self, kind, length, p0=None, p1=None, center=None, a0=None, a1=None, radius=None):
        self.kind = kind
        self.length = length
        self.p0 = p0
        self.p1 = p1
        self.center = center
        self.a0 = a0
        self.a1 = a1
        self.radius = radius

    def point_and_tangent(self, s: float) -> tuple[np.ndarray, float]:
        if self.kind == "line":
            t = s / self.length if self.length > 0 else 0.0
            p = self.p0 + (self.p1 - self.p0) * t
            d = self.p1 - self.p0
            return p, math.atan2(d[1], d[0])
        ang = self.a0 + (self.a1 - self.a0) * (s / self.length)
        p = self.center + self.radius * np.array([math.cos(ang), math.sin(ang)])
        # CCW arcs only: tangent leads the radius by 90 degrees.
        return p, wrap_angle(ang + math.pi / 2)


class OffsetCircuit:
    """Exact outward offset of a convex polygon: straight edges joined by corner arcs."""

    def __init__(self, hull: np.ndarray, distance: float):
        if distance <= 0:
            raise PlanningError(f"offset distance must be positive, got {distance}")
        hull = np.asarray(hull, dtype=float)
        n = len(hull)
        pieces: list[_Piece] = []
        for i in range(n):
            prev_pt = hull[(i - 1) % n]
            cur = hull[i]
            nxt = hull[(i + 1) % n]
            d_in = cur - prev_pt
            d_out = nxt - cur
            n_in = np.array([d_in[1], -d_in[0]]) / np.hypot(*d_in)
            n_out = np.array([d_out[1], -d_out[0]]) / np.hypot(*d_out)
            a0 = math.atan2(n_in[1], n_in[0])
            a1 = math.atan2(n_out[1], n_out[0])
            while a1 < a0:
                a1 += 2 * math.pi
            arc_len = (a1 - a0) * distance
            if arc_len > 1e-12:
                pieces.append(
                    _Piece("arc", arc_len, center=cur, a0=a0, a1=a1, radius=distance)
                )
            p0 = cur + n_out * distance
            p1 = nxt + n_out * distance
            edge_len = float(np.hypot(*(p1 - p0)))
            if edge_len > 1e-12:
                pieces.append(_Piece("line", edge_len, p0=p0, p1=p1))
        self.pieces = pieces
        self.cum = np.concatenate([[0.0], np.cumsum([p.length for p in pieces])])
        self.length = float(self.cum[-1])

    def pose_at(self, s: float) -> Pose2:
        s = s % self.length
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(i, len(self.pieces) - 1)
        p, heading = self.pieces[i].point_and_tangent(s - self.cum[i])
        return Pose2(p[0], p[1], heading)

    def nearest_arc_position(self, point: np.ndarray) -> float:
        best_s, best_d = 0.0, math.inf
        for i, piece in enumerate(self.pieces):
            grid = np.linspace(0, piece.length, 64)
            for s in grid:
                p, _ = piece.point_and_tangent(s)
                d = float(np.hypot(*(p - point)))
                if d < best_d:
                    best_d, best_s = d, self.cum[i] + s
        return best_s


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW vertices without repetition."""
    pts = np.unique(np.round(points, 12), axis=0)
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if len(pts) < 3:
        return pts

    def cross2(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(iterable):
        out = []
        for p in iterable:
            while len(out) >= 2 and cross2(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    return hull


def _lap_slices(nozzle_path: TimedPath) -> list[slice]:
    """Group nozzle samples into laps by their (constant per layer) z value."""
    z = nozzle_path.samples[:, 2]
    boundaries = [0]
    for k in range(1, len(z)):
        if abs(z[k] - z[k - 1]) > 1e-12:
            boundaries.append(k)
    slices = []
    for i, start in enumerate(boundaries):
        stop = boundaries[i + 1] if i + 1 < len(boundaries) else len(z)
        slices.append(slice(start, stop))
    # The single closing sample at the top belongs to the final lap.
    if slices and slices[-1].stop - slices[-1].start == 1 and len(slices) > 1:
        last = slices.pop()
        prev = slices.pop()
        slices.append(slice(prev.start, last.stop))
    return slices


def _lap_fractions(nozzle_path: TimedPath) -> np.ndarray:
    """Per-sample progress in [0, 1]: planar arc-length fraction within each lap."""
    fractions = np.empty(len(nozzle_path))
    xy = nozzle_path.samples[:, :2]
    for lap in _lap_slices(nozzle_path):
        seg = np.diff(xy[lap], axis=0)
        steps = np.hypot(seg[:, 0], seg[:, 1])
        cum = np.concatenate([[0.0], np.cumsum(steps)])
        total = cum[-1] if cum[-1] > 0 else 1.0
        fractions[lap] = cum / total
    return fractions


def prescribe_base_path(
    nozzle_path: TimedPath,
    standoff: float,
    clearance: float,
    reach_min: float = DEFAULT_REACH_MIN,
    reach_max: float = DEFAULT_REACH_MAX,
) -> TimedPath:
    """Prescribe the base motion: an offset circuit of the print, sample-aligned.

    The circuit is the exact outward offset (rounded corners) of the convex
    hull of the nozzle's planar footprint, at lateral distance `standoff`.
    A degenerate (collinear) nozzle path yields a straight path translated
    laterally by `standoff`.  Base heading is tangent to the path.
    """
    if standoff < clearance:
        raise PlanningError(
            f"standoff {standoff} cannot be smaller than clearance {clearance}"
        )
    if not (reach_min <= standoff <= reach_max):
        raise PlanningError(
            f"standoff {standoff} outside reach band [{reach_min}, {reach_max}]"
        )
    xy = nozzle_path.samples[:, :2]
    hull = _convex_hull(xy)
    if len(hull) < 3 or abs(_signed_area(_close_polyline(hull))) < 1e-9:
        # Straight print: offset to the left of the travel direction.
        d = xy[-1] - xy[0]
        norm = np.hypot(*d)
        if norm < 1e-12:
            raise PlanningError("nozzle path is a single point; no base path exists")
        d = d / norm
        left = np.array([-d[1], d[0]])
        heading = math.atan2(d[1], d[0])
        samples = np.column_stack(
            [xy + left * standoff, np.full(len(xy), wrap_angle(heading))]
        )
        return TimedPath(nozzle_path.dt, samples)
    circuit = OffsetCircuit(hull, standoff)
    start = circuit.nearest_arc_position(xy[0])
    fractions = _lap_fractions(nozzle_path)
    samples = np.empty((len(nozzle_path), 3))
    for k, f in enumerate(fractions):
        pose = circuit.pose_at(start + f * circuit.length)
        samples[k] = (pose.x, pose.y, pose.theta)
    return TimedPath(nozzle_path.dt, samples)


@dataclass(frozen=True)
class PrintPlan:
    """Synchronized nozzle and base motion plus the plan's nominal parameters."""

    nozzle_path: TimedPath
    base_path: TimedPath
    nozzle_speed: float
    layer_count: int

    def __post_init__(self):
        if len(self.nozzle_path) != len(self.base_path):
            raise SynchronizationError(0, "nozzle and base paths have different lengths")
        if self.nozzle_path.dt != self.base_path.dt:
            raise SynchronizationError(0, "nozzle and base paths have different dt")

    def __len__(self) -> int:
        return len(self.nozzle_path)

    @property
    def dt(self) -> float:
        return self.nozzle_path.dt

    @property
    def duration(self) -> float:
        return self.nozzle_path.duration

    def reach_distances(self) -> np.ndarray:
        d = self.nozzle_path.samples[:, :2] - self.base_path.samples[:, :2]
        return np.hypot(d[:, 0], d[:, 1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "nx", "ny", "nz", "bx", "by", "btheta"])
            t = self.nozzle_path.times()
            for k in range(len(self)):
                nx, ny, nz = self.nozzle_path.samples[k]
                bx, by, btheta = self.base_path.samples[k]
                writer.writerow(
                    [f"{v:.9f}" for v in (t[k], nx, ny, nz, bx, by, btheta)]
                )


def read_plan_csv(path) -> PrintPlan:
    """Parse a plan CSV written by PrintPlan.to_csv."""
    from .errors import CsvParseError

    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["t", "nx", "ny", "nz", "bx", "by", "btheta"]:
            raise CsvParseError(1, f"unexpected plan header: {header}")
        for i, row in enumerate(reader, start=2):
            if len(row) != 7:
                raise CsvParseError(i, f"expected 7 columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise CsvParseError(i, f"non-numeric value in line {i}") from None
    if len(rows) < 2:
        raise CsvParseError(len(rows) + 1, "plan needs at least two samples")
    arr = np.array(rows)
    dt = arr[1, 0] - arr[0, 0]
    nozzle = TimedPath(dt, arr[:, 1:4])
    base = TimedPath(dt, arr[:, 4:7])
    speeds = nozzle.speeds()
    z = nozzle.samples[:, 2]
    layers = len({round(v, 9) for v in z})
    return PrintPlan(nozzle, base, float(np.median(speeds)), layers)


def _check_reach(nozzle: TimedPath, base: TimedPath, reach_min: float, reach_max: float):
    d = nozzle.samples[:, :2] - base.samples[:, :2]
    dist = np.hypot(d[:, 0], d[:, 1])
    bad = np.nonzero((dist > reach_max + 1e-9) | (dist < reach_min - 1e-9))[0]
    if bad.size:
        k = int(bad[0])
        raise SynchronizationError(
            k,
            f"nozzle/base distance {dist[k]:.4f} m at sample {k} outside "
            f"[{reach_min}, {reach_max}]",
        )


def synchronize(
    nozzle_path: TimedPath,
    base_path: TimedPath,
    reach_min: float = DEFAULT_REACH_MIN,
    reach_max: float = DEFAULT_REACH_MAX,
) -> PrintPlan:
    """Align base samples with nozzle samples and verify the reach band.

    A base path with the same sample count is taken as already aligned and
    only verified.  Otherwise the base path is treated as one traversal of the
    base circuit and re-sampled so that base arc-length progress matches the
    nozzle's per-lap arc-length progress.
    """
    if nozzle_path.dt != base_path.dt:
        raise SynchronizationError(0, "paths must share dt")
    if len(base_path) == len(nozzle_path):
        aligned = base_path
    else:
        xy = base_path.samples[:, :2]
        seg = np.diff(xy, axis=0)
        steps = np.hypot(seg[:, 0], seg[:, 1])
        cum = np.concatenate([[0.0], np.cumsum(steps)])
        total = cum[-1]
        if total <= 0:
            raise SynchronizationError(0, "base path has zero length")
        fractions = _lap_fractions(nozzle_path)
        arc = fractions * total
        idx = np.clip(np.searchsorted(cum, arc, side="right") - 1, 0, len(steps) - 1)
        frac = (arc - cum[idx]) / np.where(steps[idx] > 0, steps[idx], 1.0)
        pts = xy[idx] + seg[idx] * np.clip(frac, 0.0, 1.0)[:, None]
        headings = np.arctan2(seg[idx][:, 1], seg[idx][:, 0])
        aligned = TimedPath(
            nozzle_path.dt, np.column_stack([pts, headings])
        )
    _check_reach(nozzle_path, aligned, reach_min, reach_max)
    speeds = nozzle_path.speeds()
    z = nozzle_path.samples[:, 2]
    layers = len({round(v, 9) for v in z})
    return PrintPlan(nozzle_path, aligned, float(np.median(speeds)), layers)
