import math

import numpy as np
import pytest

from mobileprint.core import TimedPath
from mobileprint.errors import InsufficientDataError, VerticalDegeneracyError
from mobileprint.metrics import (
    LabeledSegment,
    SegmentFit,
    SegmentGeometry,
    accuracy,
    assess,
    desired_segments,
    fit_line,
    fit_segments,
    metrics_json,
    precision,
    segment_points,
    write_assessment_svg,
    write_metrics_json,
)
from mobileprint.toolpath import (
    StructureSpec,
    prescribe_base_path,
    slice_structure,
    synchronize,
)

DT = 0.025


@pytest.fixture(scope="module")
def circuit():
    spec = StructureSpec.rectangle(1.2, 0.6, 0.01, 0.01)
    nozzle = slice_structure(spec, 0.1, DT)
    base = prescribe_base_path(nozzle, standoff=0.4, clearance=0.2)
    return synchronize(nozzle, base).base_path


class TestSegmentPoints:
    def test_points_on_segment_a(self, circuit):
        labeled = segment_points(circuit, circuit, corner_margin=0.05)
        by_label = {seg.geometry.label: seg for seg in labeled}
        seg_a = by_label["A"]
        assert seg_a.geometry.axis == "x"
        # Every bottom-wall point sits exactly on its line.
        assert np.allclose(seg_a.points[:, 1], seg_a.geometry.level, atol=1e-12)

    def test_corner_points_discarded(self, circuit):
        margin = 0.1
        labeled = segment_points(circuit, circuit, corner_margin=margin)
        for seg in labeled:
            geom = seg.geometry
            t = seg.points[:, 0] if geom.axis == "x" else seg.points[:, 1]
            assert t.min() >= geom.lo + margin - 1e-12
            assert t.max() <= geom.hi - margin + 1e-12

    def test_synthetic_labels_match_construction(self, circuit):
        # Ground truth: jittered copies of each desired straight segment.
        rng = np.random.default_rng(41)
        segs = desired_segments(circuit)
        pts = []
        owners = []
        for seg in segs:
            t = rng.uniform(seg.lo + 0.12, seg.hi - 0.12, size=40)
            cross = seg.level + rng.normal(0, 0.003, size=40)
            if seg.axis == "x":
                pts.append(np.column_stack([t, cross]))
            else:
                pts.append(np.column_stack([cross, t]))
            owners.extend([seg.label] * 40)
        measured = TimedPath(DT, np.column_stack([np.vstack(pts), np.zeros(160)]))
        labeled = segment_points(measured, circuit, corner_margin=0.1)
        by_label = {seg.geometry.label: seg for seg in labeled}
        start = 0
        for seg, owner_block in zip(segs, np.split(np.vstack(pts), 4)):
            got = by_label[seg.label].points
            assert got.shape[0] == 40
            assert np.allclose(np.sort(got[:, 0]), np.sort(owner_block[:, 0]))

    def test_insufficient_points(self, circuit):
        sparse = TimedPath(DT, np.tile(circuit.samples[0], (12, 1)))
        with pytest.raises(InsufficientDataError):
            segment_points(sparse, circuit)


class TestFitLine:
    def test_two_point_interpolation(self):
        fit = fit_line(np.array([[0.0, 0.0], [1.0, 1.0]]))
        assert fit.a == pytest.approx(1.0, abs=1e-12)
        assert fit.b == pytest.approx(0.0, abs=1e-12)

    def test_exact_line(self):
        x = np.linspace(0, 2, 50)
        fit = fit_line(np.column_stack([x, 2 * x + 3]))
        assert fit.a == pytest.approx(2.0, abs=1e-12)
        assert fit.b == pytest.approx(3.0, abs=1e-12)
        assert np.abs(fit.residuals).max() < 1e-12

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.uniform(0, 3, 200)
        y = 0.7 * x - 1.2 + rng.normal(0, 0.01, 200)
        fit = fit_line(np.column_stack([x, y]))
        # Oracle: closed-form normal equations.
        sx, sy = x.sum(), y.sum()
        sxx, sxy = (x * x).sum(), (x * y).sum()
        n = len(x)
        a = (n * sxy - sx * sy) / (n * sxx - sx * sx)
        b = (sy - a * sx) / n
        assert fit.a == pytest.approx(a, abs=1e-10)
        assert fit.b == pytest.approx(b, abs=1e-10)

    def test_residual_orthogonality(self):
        rng = np.random.default_rng(43)
        x = rng.uniform(0, 3, 100)
        y = rng.normal(0, 1, 100)
        fit = fit_line(np.column_stack([x, y]))
        assert abs(fit.residuals @ x) < 1e-10
        assert abs(fit.residuals.sum()) < 1e-10

    def test_degenerate_spread(self):
        pts = np.column_stack([np.full(20, 0.5), np.linspace(0, 1, 20)])
        with pytest.raises(VerticalDegeneracyError):
            fit_line(pts)


class TestPrecision:
    def test_zero_residuals(self):
        fit = fit_line(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
        report = precision([fit])
        assert report.e_max == pytest.approx(0.0, abs=1e-15)
        assert report.e_mean == pytest.approx(0.0, abs=1e-15)

    def test_hand_arithmetic(self):
        # Residuals of 3 mm and 4 mm: e_max = 4 mm, e_mean = sqrt(12.5) mm.
        fit = SegmentFit("x", 0.0, 0.0, 2, np.array([0.003, -0.004]))
        report = precision([fit])
        assert report.e_max == pytest.approx(0.004, abs=1e-15)
        assert report.e_mean == pytest.approx(math.sqrt(12.5) * 1e-3, abs=1e-12)
        assert report.e_mean <= report.e_max

    def test_pooled_across_segments(self):
        f1 = SegmentFit("x", 0.0, 0.0, 2, np.array([0.001, -0.002]))
        f2 = SegmentFit("y", 0.0, 0.0, 2, np.array([0.005, 0.0]))
        report = precision([f1, f2])
        assert report.e_max == pytest.approx(0.005)


class TestAccuracy:
    def test_identical_lines(self, circuit):
        report, acc, labeled = assess(circuit, circuit, corner_margin=0.05)
        assert acc < 1e-9
        assert report.e_max < 1e-9

    def test_parallel_offset_exact(self):
        geom = SegmentGeometry("A", "x", 0.0, 0.0, 2.0)
        seg = LabeledSegment(geom, np.column_stack([np.linspace(0.1, 1.9, 30), np.full(30, 0.005)]))
        fit = fit_line(seg.fit_coordinates())
        assert accuracy([fit], [seg]) == pytest.approx(0.005, abs=1e-12)

    def test_translation_invariance(self, circuit):
        report1, acc1, _ = assess(circuit, circuit, corner_margin=0.05)
        shifted = TimedPath(
            circuit.dt, circuit.samples + np.array([5.0, -3.0, 0.0])
        )
        report2, acc2, _ = assess(shifted, shifted, corner_margin=0.05)
        assert report2.e_max == pytest.approx(report1.e_max, abs=1e-12)
        assert acc2 == pytest.approx(acc1, abs=1e-12)

    def test_offset_measured_path(self, circuit):
        # Whole measured path shifted 5 mm in +y: X-parallel fits off by 5 mm.
        shifted = TimedPath(circuit.dt, circuit.samples + np.array([0.0, 0.005, 0.0]))
        report, acc, labeled = assess(shifted, circuit, corner_margin=0.05)
        assert acc == pytest.approx(0.005, abs=1e-9)
        # Residuals stay tiny: precision is unaffected by a rigid offset.
        assert report.e_max < 1e-9


class TestOutputs:
    def test_metrics_json_keys(self, circuit):
        report, acc, _ = assess(circuit, circuit, corner_margin=0.05)
        data = metrics_json(report, acc)
        assert {"e_max_m", "e_mean_m", "e_mean_abs_m", "accuracy_m", "segments"} <= set(data)
        assert len(data["segments"]) == 4

    def test_write_files(self, tmp_path, circuit):
        report, acc, labeled = assess(circuit, circuit, corner_margin=0.05)
        jpath = tmp_path / "metrics.json"
        write_metrics_json(jpath, report, acc)
        assert jpath.exists()
        svg = tmp_path / "fig.svg"
        write_assessment_svg(svg, circuit, circuit, list(report.fits), labeled)
        text = svg.read_text()
        assert text.startswith("<svg")
        assert "polyline" in text
