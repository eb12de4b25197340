"""Trajectory integration, ATE/RTE/CDF metrics and the step-counting baseline."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bodynet.dataio import DeviceWindow, ImuStream, PoseTrack, yaw_quaternion
from bodynet.evaluator import (
    PDR_STEP_LENGTH,
    Trajectory,
    ate,
    cdf_from_errors,
    detect_steps,
    error_cdf,
    initial_heading,
    integrate_trajectory,
    pdr_baseline,
    rte,
    rte_detail,
    sequence_trajectories,
    split_segments,
)
from oracles import empirical_cdf, rmse_of_distances

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def line(t, vx=1.0, vy=0.0):
    t = np.asarray(t, dtype=np.float64)
    return Trajectory(t, np.column_stack([vx * t, vy * t]))


class TestIntegrate:
    def test_constant_velocity(self):
        traj = integrate_trajectory(np.tile([1.0, -0.5], (5, 1)), np.arange(5) * 0.4, y0=(2.0, 3.0))
        np.testing.assert_allclose(traj.t, np.arange(6) * 0.4)
        np.testing.assert_allclose(traj.positions, np.column_stack([2 + 0.4 * np.arange(6), 3 - 0.2 * np.arange(6)]))

    def test_piecewise(self):
        traj = integrate_trajectory([[1.0, 0.0], [0.0, 2.0]], [0.0, 1.0], last_duration=3.0)
        np.testing.assert_allclose(traj.positions, [[0, 0], [1, 0], [1, 6]])

    def test_single_window_needs_duration(self):
        with pytest.raises(ValueError):
            integrate_trajectory([[1.0, 0.0]], [0.0])
        traj = integrate_trajectory([[1.0, 0.0]], [0.0], last_duration=3.96)
        np.testing.assert_allclose(traj.positions[-1], [3.96, 0.0])

    def test_out_of_order_rejected(self):
        with pytest.raises(ValueError):
            integrate_trajectory([[1.0, 0.0]] * 3, [0.0, 0.8, 0.4])

    def test_trajectory_validation(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 0.0], np.zeros((2, 2)))
        with pytest.raises(ValueError):
            Trajectory([0.0, 1.0], [[0.0, 0.0], [np.nan, 0.0]])


class TestAte:
    def test_identical(self):
        g = line(np.arange(100.0))
        assert ate(g, g) == 0.0

    def test_constant_offset(self):
        g = line(np.arange(100.0))
        assert ate(g.translated([3.0, 4.0]), g) == pytest.approx(5.0, abs=1e-12)

    def test_linear_drift_closed_form(self):
        t = np.arange(0.0, 61.0)
        g = line(t)
        p = Trajectory(t, g.positions + np.column_stack([0.5 * t, np.zeros_like(t)]))
        assert ate(p, g) == pytest.approx(math.sqrt(np.mean(0.25 * t * t)), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (20, 2), elements=finite), arrays(np.float64, (20, 2), elements=finite))
    def test_matches_oracle(self, a, b):
        t = np.arange(20.0)
        assert ate(Trajectory(t, a), Trajectory(t, b)) == pytest.approx(rmse_of_distances(a, b), rel=1e-12, abs=1e-12)

    def test_truth_interpolated_on_predicted_times(self):
        g = line(np.arange(0.0, 10.01, 0.01), 1.2)
        p = line(np.arange(0.0, 10.0, 0.4), 1.2)
        assert ate(p, g) < 1e-12


class TestRte:
    def test_identical(self):
        g = line(np.arange(200.0))
        assert rte(g, g) == 0.0

    def test_offset_is_zero(self):
        g = line(np.arange(200.0))
        assert rte(g.translated([10.0, -3.0]), g) == pytest.approx(0.0, abs=1e-12)

    def test_linear_drift_closed_form(self):
        c = 0.05
        t = np.arange(0.0, 200.0)
        g = line(t)
        p = Trajectory(t, g.positions + np.column_stack([c * t, np.zeros_like(t)]))
        k = np.arange(61.0)
        res = rte_detail(p, g, 60.0)
        assert res.value == pytest.approx(c * math.sqrt(np.mean(k * k)), rel=1e-12)
        assert res.n_intervals == 140 and not res.truncated

    def test_short_trajectory_flagged(self):
        g = line(np.arange(30.0))
        res = rte_detail(g.translated([1, 1]), g, 60.0)
        assert res.truncated and res.n_intervals == 1

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (30, 2), elements=finite), arrays(np.float64, (30, 2), elements=finite), finite, finite)
    def test_translation_invariance(self, a, b, dx, dy):
        t = np.arange(30.0)
        p, g = Trajectory(t, a), Trajectory(t, b)
        assert rte(p.translated([dx, dy]), g, 10.0) == pytest.approx(rte(p, g, 10.0), rel=1e-9, abs=1e-9)
        assert ate(p.translated([dx, dy]), g.translated([dx, dy])) == pytest.approx(ate(p, g), rel=1e-9, abs=1e-9)


class TestCdf:
    def test_four_points(self):
        assert cdf_from_errors([3.0, 1.0, 4.0, 2.0]) == [(1.0, 0.25), (2.0, 0.5), (3.0, 0.75), (4.0, 1.0)]

    def test_ties(self):
        assert cdf_from_errors([1.0, 1.0, 2.0]) == [(1.0, pytest.approx(2 / 3)), (2.0, 1.0)]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=60))
    def test_matches_sort_oracle(self, errors):
        got = cdf_from_errors(errors)
        want = empirical_cdf(errors)
        assert [v for v, _ in got] == [v for v, _ in want]
        np.testing.assert_allclose([p for _, p in got], [p for _, p in want], rtol=1e-12)
        assert got[-1][1] == 1.0

    def test_from_trajectories(self):
        t = np.arange(4.0)
        g = Trajectory(t, np.zeros((4, 2)))
        p = Trajectory(t, np.column_stack([[1.0, 2.0, 3.0, 4.0], np.zeros(4)]))
        assert [v for v, _ in error_cdf(p, g)] == [1.0, 2.0, 3.0, 4.0]


def step_stream(duration, rate=25.0, turn=None):
    """Gravity-free phone stream with one acceleration pulse every 0.5 s, peaks at k/2 s."""
    t = np.arange(int(round(duration * rate)) + 1) / rate
    acc = np.zeros((len(t), 3))
    acc[:, 2] = 1.0 + np.cos(2 * np.pi * 2.0 * t)
    gyr = np.zeros((len(t), 3))
    if turn is not None:
        t0, t1, angle = turn
        inside = (t >= t0) & (t <= t1)
        # trapezoidal integration of the sampled pulse covers inside.sum() intervals
        gyr[inside, 2] = angle * rate / inside.sum()
    return ImuStream(t, acc, gyr, "phone")


class TestPdr:
    def test_fifty_steps(self):
        res = pdr_baseline(step_stream(25.5))
        assert len(res.step_times) == 50
        end = res.trajectory.positions[-1]
        assert np.linalg.norm(end) == pytest.approx(50 * PDR_STEP_LENGTH, abs=0.02 * 33.5)
        assert abs(end[1]) < 1e-12

    def test_stationary(self):
        s = ImuStream(np.arange(500) / 25.0, np.zeros((500, 3)), np.zeros((500, 3)), "phone")
        res = pdr_baseline(s)
        assert len(res.step_times) == 0
        assert np.all(res.trajectory.positions == 0.0)

    def test_l_turn_endpoint(self):
        # right angle completed between the 25th and 26th steps
        s = step_stream(25.5, turn=(12.6, 12.88, math.pi / 2))
        res = pdr_baseline(s)
        assert len(res.step_times) == 50
        end = res.trajectory.positions[-1]
        np.testing.assert_allclose(end, [25 * 0.67, 25 * 0.67], atol=0.05)

    def test_initial_heading_and_origin(self):
        res = pdr_baseline(step_stream(5.5), initial_heading=math.pi / 2, y0=(1.0, 2.0))
        end = res.trajectory.positions[-1]
        np.testing.assert_allclose(end, [1.0, 2.0 + 10 * 0.67], atol=1e-9)

    def test_too_short_stream(self):
        with pytest.raises(ValueError):
            detect_steps(ImuStream(np.arange(5) / 25.0, np.zeros((5, 3)), np.zeros((5, 3))))

    def test_initial_heading_from_truth(self):
        t = np.arange(0, 10.0, 0.01)
        pos = np.column_stack([-t, t, np.zeros_like(t)])
        truth = PoseTrack(t, pos, yaw_quaternion(np.zeros_like(t)))
        assert initial_heading(truth, 0.0) == pytest.approx(3 * math.pi / 4)


def window(t0, v=(1.0, 0.0), duration=3.96):
    return DeviceWindow(np.zeros((3, 100, 6)), t0, duration, np.array(v), "s", "STW")


class TestSequenceTrajectories:
    def test_gap_splits_segments(self):
        ws = [window(t) for t in (0.0, 0.4, 0.8, 5.0, 5.4)]
        assert split_segments(ws) == [[0, 1, 2], [3, 4]]

    def test_perfect_velocities_reproduce_truth(self):
        t = np.arange(0, 30.0, 0.01)
        pos = np.column_stack([1.3 * t, 0.2 * t, np.zeros_like(t)])
        truth = PoseTrack(t, pos, yaw_quaternion(np.zeros_like(t)))
        ws = [window(s, (1.3, 0.2)) for s in np.arange(0, 20.0, 0.4)]
        pred, gt = sequence_trajectories(ws, [w.v_label for w in ws], truth)
        np.testing.assert_allclose(pred.positions, gt.positions, atol=1e-9)
        assert pred.t[-1] == pytest.approx(ws[-1].t_start + 3.96)
