import math

import numpy as np
import pytest

from mobileprint.core import (
    ControlInput,
    Pose2,
    Transform3,
    rot_z,
    rotation_about_axis,
)
from mobileprint.errors import (
    FilterDivergenceError,
    NoVisibleMarkerError,
    UnknownMarkerError,
)
from mobileprint.localization import (
    ControlHistory,
    EkfState,
    MarkerDetection,
    MarkerMap,
    StackedMeasurement,
    ekf_predict,
    ekf_update,
    nees,
    pose_from_detection,
    propagate_delayed,
    stack_measurements,
)

DT = 0.025


def planar_marker(x, y, yaw):
    return Transform3(rot_z(yaw), np.array([x, y, 0.0]))


class TestPoseFromDetection:
    def test_identity_chain(self):
        marker_map = MarkerMap({0: Transform3.identity()})
        det = MarkerDetection(0, Transform3.identity(), 0)
        pose = pose_from_detection(det, marker_map, Transform3.identity())
        assert pose == Pose2.identity()

    def test_matrix_product_oracle(self):
        # Marker at (2, 0, 0), camera behind it looking down, base ahead of
        # the camera; cross-checked with a direct homogeneous product.
        marker = planar_marker(2.0, 0.0, 0.0)
        flip = rotation_about_axis(np.array([1.0, 0.0, 0.0]), math.pi)
        camera_in_marker = Transform3(flip, np.array([-1.0, 0.0, 0.55]))
        base_in_camera = camera_in_marker.inverse().compose(
            Transform3(rot_z(0.0), np.array([-0.7, 0.0, 0.0])).inverse()
        ).inverse()
        # base_in_camera now maps the base frame into the camera frame such
        # that the base sits at (-0.7, 0, 0) relative to the marker.
        marker_map = MarkerMap({7: marker})
        det = MarkerDetection(7, camera_in_marker, 0)
        pose = pose_from_detection(det, marker_map, base_in_camera)
        expected = (
            marker.as_matrix()
            @ camera_in_marker.as_matrix()
            @ base_in_camera.as_matrix()
        )
        assert pose.x == pytest.approx(expected[0, 3], abs=1e-12)
        assert pose.y == pytest.approx(expected[1, 3], abs=1e-12)
        assert pose.theta == pytest.approx(
            math.atan2(expected[1, 0], expected[0, 0]), abs=1e-12
        )

    def test_unknown_marker(self):
        marker_map = MarkerMap({0: Transform3.identity()})
        det = MarkerDetection(99, Transform3.identity(), 0)
        with pytest.raises(UnknownMarkerError):
            pose_from_detection(det, marker_map, Transform3.identity())

    def test_map_validates_planarity(self):
        tilted = Transform3(
            rotation_about_axis(np.array([1.0, 0.0, 0.0]), 0.3), np.zeros(3)
        )
        with pytest.raises(ValueError):
            MarkerMap({0: tilted})


class TestPropagateDelayed:
    def test_no_delay(self):
        p = Pose2(1.0, 2.0, 0.5)
        assert propagate_delayed(p, [], DT) == p

    def test_two_controls(self):
        u = ControlInput(0.1, 0.0, 0.0)
        out = propagate_delayed(Pose2.identity(), [u, u], DT)
        assert out.x == pytest.approx(0.005, abs=1e-15)
        assert out.y == 0.0
        assert out.theta == 0.0

    def test_random_walk_matches_integrator(self):
        # Oracle: the noiseless ground-truth integrator of the same controls.
        rng = np.random.default_rng(31)
        controls = [
            ControlInput(*rng.uniform(-0.3, 0.3, size=3)) for _ in range(20)
        ]
        start = Pose2(0.3, -0.2, 0.7)
        expected = start.as_vector().copy()
        for u in controls:
            expected += DT * u.as_vector()
        out = propagate_delayed(start, controls, DT)
        assert out.x == pytest.approx(expected[0], abs=1e-12)
        assert out.y == pytest.approx(expected[1], abs=1e-12)
        assert out.theta == pytest.approx(
            math.remainder(expected[2], 2 * math.pi), abs=1e-12
        )


class TestStackMeasurements:
    def test_single(self):
        p = Pose2(1, 2, 0.3)
        z = stack_measurements([p])
        assert z.count == 1
        assert np.allclose(z.vector(), p.as_vector())

    def test_empty_faults(self):
        with pytest.raises(NoVisibleMarkerError):
            stack_measurements([])

    def test_information_additivity(self):
        # Three identical poses must equal one update with noise R / 3.
        prior = EkfState(Pose2.identity(), 0.01 * np.eye(3))
        z_pose = Pose2(0.02, -0.01, 0.005)
        r_mat = 1e-4 * np.eye(3)
        stacked = ekf_update(prior, stack_measurements([z_pose] * 3, r_mat))
        single = ekf_update(prior, stack_measurements([z_pose], r_mat / 3))
        assert np.allclose(
            stacked.mean.as_vector(), single.mean.as_vector(), atol=1e-12
        )
        assert np.allclose(stacked.covariance, single.covariance, atol=1e-12)


class TestEkfPredict:
    def test_zero_control_zero_noise(self):
        state = EkfState(Pose2(1, 1, 1), np.eye(3) * 0.1)
        out = ekf_predict(state, ControlInput.zero(), DT, np.zeros((3, 3)))
        assert out.mean == state.mean
        assert np.allclose(out.covariance, state.covariance)

    def test_trace_grows_by_q(self):
        q_mat = np.diag([1e-5, 2e-5, 3e-5])
        state = EkfState(Pose2.identity(), np.eye(3) * 0.1)
        out = ekf_predict(state, ControlInput.zero(), DT, q_mat)
        assert np.trace(out.covariance) == pytest.approx(
            np.trace(state.covariance) + np.trace(q_mat)
        )

    def test_hundred_predicts_match_integrator(self):
        rng = np.random.default_rng(32)
        state = EkfState(Pose2.identity(), np.eye(3) * 1e-6)
        expected = np.zeros(3)
        for _ in range(100):
            u = ControlInput(*rng.uniform(-0.2, 0.2, 3))
            state = ekf_predict(state, u, DT, np.zeros((3, 3)))
            expected += DT * u.as_vector()
        assert state.mean.x == pytest.approx(expected[0], abs=1e-12)
        assert state.mean.y == pytest.approx(expected[1], abs=1e-12)
        assert state.mean.theta == pytest.approx(
            math.remainder(expected[2], 2 * math.pi), abs=1e-12
        )


class TestEkfUpdate:
    def test_zero_innovation(self):
        prior = EkfState(Pose2(0.5, -0.5, 0.2), 0.01 * np.eye(3))
        z = stack_measurements([prior.mean], 1e-4 * np.eye(3))
        post = ekf_update(prior, z)
        assert np.allclose(post.mean.as_vector(), prior.mean.as_vector(), atol=1e-15)
        assert np.all(np.linalg.eigvalsh(prior.covariance - post.covariance) > 0)

    def test_uninformative_measurement(self):
        prior = EkfState(Pose2(0.5, -0.5, 0.2), 0.01 * np.eye(3))
        z = stack_measurements([Pose2(5, 5, 1)], 1e12 * np.eye(3))
        post = ekf_update(prior, z)
        assert np.allclose(post.mean.as_vector(), prior.mean.as_vector(), atol=1e-6)
        assert np.allclose(post.covariance, prior.covariance, atol=1e-6)

    def test_scalar_gain_oracle(self):
        # Diagonal everything decouples into the textbook scalar filter.
        p0, r0 = 0.04, 0.01
        prior = EkfState(Pose2.identity(), p0 * np.eye(3))
        z_pose = Pose2(0.1, 0.0, 0.0)
        post = ekf_update(prior, stack_measurements([z_pose], r0 * np.eye(3)))
        k = p0 / (p0 + r0)
        assert post.mean.x == pytest.approx(k * 0.1, abs=1e-12)
        assert post.covariance[0, 0] == pytest.approx((1 - k) * p0, abs=1e-12)

    def test_innovation_wrap_near_pi(self):
        prior = EkfState(Pose2(0, 0, math.pi - 0.01), 0.01 * np.eye(3))
        z = stack_measurements([Pose2(0, 0, -math.pi + 0.01)], 1e-4 * np.eye(3))
        post = ekf_update(prior, z)
        # Fusion goes through pi, not back through zero.
        assert abs(post.mean.theta) > math.pi - 0.011

    def test_posterior_loewner_order(self):
        rng = np.random.default_rng(33)
        state = EkfState(Pose2.identity(), 0.05 * np.eye(3))
        for _ in range(50):
            state = ekf_predict(
                state, ControlInput(*rng.uniform(-0.2, 0.2, 3)), DT
            )
            prior_cov = state.covariance
            z_pose = Pose2(*rng.normal(scale=0.05, size=3))
            state = ekf_update(state, stack_measurements([z_pose]))
            eigs = np.linalg.eigvalsh(prior_cov - state.covariance)
            assert eigs.min() > -1e-10
            # Symmetric positive-definite after every update.
            assert np.abs(state.covariance - state.covariance.T).max() <= 1e-12
            assert np.linalg.eigvalsh(state.covariance).min() > 0

    def test_divergence_error(self):
        prior = EkfState(Pose2.identity(), 1e-9 * np.eye(3))
        bad_noise = -1e-6 * np.eye(3)
        z = StackedMeasurement((Pose2.identity(),), bad_noise)
        with pytest.raises(FilterDivergenceError):
            ekf_update(prior, z)


class TestControlHistory:
    def test_since(self):
        hist = ControlHistory(capacity=4)
        for step in range(6):
            hist.record(step, ControlInput(step, 0, 0))
        got = hist.since(3)
        assert [u.vx for u in got] == [3, 4, 5]

    def test_capacity(self):
        hist = ControlHistory(capacity=2)
        for step in range(5):
            hist.record(step, ControlInput(step, 0, 0))
        assert len(hist.since(0)) == 2


class TestConsistency:
    def test_nees_matched_noise(self):
        # Small Monte Carlo: linear plant with matched noise must be
        # chi-square consistent (3 DoF).  The full-size run lives in the
        # acceptance suite.
        rng = np.random.default_rng(34)
        q_std = 1e-3
        r_std = 1e-2
        q_mat = q_std**2 * np.eye(3)
        r_mat = r_std**2 * np.eye(3)
        runs, steps = 20, 200
        total = 0.0
        for _ in range(runs):
            truth = np.zeros(3)
            state = EkfState(Pose2.identity(), 1e-8 * np.eye(3))
            for k in range(steps):
                u = ControlInput(0.1, 0.05, 0.0)
                truth = truth + DT * u.as_vector() + rng.normal(scale=q_std, size=3)
                state = ekf_predict(state, u, DT, q_mat)
                z_pose = Pose2(*(truth + rng.normal(scale=r_std, size=3)))
                state = ekf_update(state, stack_measurements([z_pose], r_mat))
                total += nees(state, Pose2(*truth))
        avg = total / (runs * steps)
        assert 2.5 < avg < 3.6
