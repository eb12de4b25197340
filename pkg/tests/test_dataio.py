"""Sensor file parsing, clock alignment, resampling, projection and windowing."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bodynet.dataio import (
    DataFormatError,
    ImuSample,
    ImuStream,
    PoseTrack,
    SyncError,
    align_by_jumps,
    fill_gaps,
    load_manifest,
    load_sequence,
    load_stream,
    load_truth,
    make_windows,
    num_windows,
    prepare_windows,
    project_to_global,
    resample,
    synchronize,
    write_stream,
    yaw_quaternion,
)
from bodynet.synthgen import generate, preset

HEADER = "t,ax,ay,az,gx,gy,gz\n"


def stream(t, accel=None, gyro=None, name="s"):
    t = np.asarray(t, dtype=np.float64)
    accel = np.zeros((len(t), 3)) if accel is None else np.asarray(accel, dtype=np.float64)
    gyro = np.zeros((len(t), 3)) if gyro is None else np.asarray(gyro, dtype=np.float64)
    return ImuStream(t, accel, gyro, name)


def track(t, xy, z=None):
    t = np.asarray(t, dtype=np.float64)
    pos = np.zeros((len(t), 3))
    pos[:, :2] = xy
    if z is not None:
        pos[:, 2] = z
    return PoseTrack(t, pos, yaw_quaternion(np.zeros(len(t))))


class TestLoadStream:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text(HEADER + "0.0,1,2,3,4,5,6\n0.01,1,2,3,4,5,6\n0.02,1,2,3,4,5,7\n")
        s = load_stream(p)
        assert len(s) == 3
        assert s[2] == ImuSample(0.02, (1.0, 2.0, 3.0), (4.0, 5.0, 7.0))
        assert [x.t for x in s] == [0.0, 0.01, 0.02]

    def test_short_row_names_its_line(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text(HEADER + "0.0,1,2,3,4,5,6\n0.01,1,2,3,4\n")
        with pytest.raises(DataFormatError) as exc:
            load_stream(p)
        assert exc.value.line == 3
        assert ":3:" in str(exc.value)

    def test_shuffled_timestamps_rejected(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text(HEADER + "0.0,0,0,0,0,0,0\n0.02,0,0,0,0,0,0\n0.01,0,0,0,0,0,0\n")
        with pytest.raises(DataFormatError, match="non-monotonic") as exc:
            load_stream(p)
        assert exc.value.line == 4

    def test_duplicate_timestamp_rejected(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text(HEADER + "0.0,0,0,0,0,0,0\n0.0,0,0,0,0,0,0\n")
        with pytest.raises(DataFormatError, match="duplicate"):
            load_stream(p)

    @pytest.mark.parametrize("body", ["", "t,ax\n", HEADER + "0,a,0,0,0,0,0\n", HEADER + "0,nan,0,0,0,0,0\n"])
    def test_malformed(self, tmp_path, body):
        p = tmp_path / "a.csv"
        p.write_text(body)
        with pytest.raises(DataFormatError):
            load_stream(p)

    def test_write_then_load_round_trips(self, tmp_path):
        rng = np.random.default_rng(0)
        s = stream(np.arange(50) / 100.0, rng.normal(size=(50, 3)), rng.normal(size=(50, 3)))
        write_stream(tmp_path / "s.csv", s)
        back = load_stream(tmp_path / "s.csv")
        assert np.array_equal(back.data, s.data) and np.array_equal(back.t, s.t)

    def test_truth_requires_unit_quaternions(self, tmp_path):
        p = tmp_path / "truth.csv"
        p.write_text("t,px,py,pz,qw,qx,qy,qz\n0,0,0,0,2,0,0,0\n")
        with pytest.raises(DataFormatError):
            load_truth(p)


class TestManifest:
    def test_round_trip_of_generated_sequence(self, tmp_path):
        path = generate(preset("STW", 10.0, 0), 0).write(tmp_path)
        man = load_manifest(path)
        assert man.mode == "STW" and [d.name for d in man.devices] == ["phone", "watch", "earbuds"]

    @pytest.mark.parametrize("edit", [
        lambda d: d.pop("truth"),
        lambda d: d.update(mode="FLY"),
        lambda d: d.update(colour="red"),
    ])
    def test_invalid_manifest(self, tmp_path, edit):
        path = generate(preset("STW", 10.0, 0), 0).write(tmp_path)
        doc = json.loads(path.read_text())
        edit(doc)
        path.write_text(json.dumps(doc))
        with pytest.raises(DataFormatError):
            load_manifest(path)

    def test_missing_device_file(self, tmp_path):
        path = generate(preset("STW", 10.0, 0), 0).write(tmp_path)
        (tmp_path / "watch.csv").unlink()
        with pytest.raises(FileNotFoundError):
            load_manifest(path)


def jump_signal(t, times, width=0.08):
    z = sum(0.25 * np.exp(-(((t - tj) / width) ** 2)) for tj in times)
    zdd = sum(0.25 * np.exp(-(((t - tj) / width) ** 2)) * (4 * (t - tj) ** 2 / width**4 - 2 / width**2) for tj in times)
    return z, zdd


class TestAlignment:
    JUMPS = (1.0, 2.0, 3.0, 27.0, 28.0, 29.0)

    def make(self, shift, rate=100.0):
        tt = np.arange(0, 30.0, 0.01)
        z, _ = jump_signal(tt, self.JUMPS)
        truth = track(tt, np.zeros((len(tt), 2)), z)
        ts = np.arange(0, 30.0, 1.0 / rate)
        # the device clock reads true time + shift
        _, zdd = jump_signal(ts - shift, self.JUMPS)
        acc = np.zeros((len(ts), 3))
        acc[:, 2] = zdd
        return truth, stream(ts, acc)

    @pytest.mark.parametrize("shift", [0.4, -0.4, 0.0, 0.13])
    def test_recovers_known_shift(self, shift):
        truth, s = self.make(shift)
        (offset,) = align_by_jumps([s], truth)
        assert abs(offset + shift) < 1.0 / 25.0

    def test_low_rate_stream(self):
        truth, s = self.make(0.4, rate=25.0)
        (offset,) = align_by_jumps([s], truth)
        assert abs(offset + 0.4) < 1.0 / 25.0

    def test_no_jumps_is_an_error(self):
        tt = np.arange(0, 10.0, 0.01)
        truth = track(tt, np.zeros((len(tt), 2)))
        with pytest.raises(SyncError):
            align_by_jumps([stream(tt)], truth)

    def test_generated_sequence_offsets(self, tmp_path):
        script = preset("STW", 40.0, 3, sync_jumps=True)
        seq = load_sequence(generate(script, 3).write(tmp_path))
        offsets = align_by_jumps(seq.streams, seq.truth)
        for est, true in zip(offsets, script.clock_offsets):
            assert abs(est + true) < 1.0 / 25.0


class TestResample:
    def test_constant(self):
        s = stream(np.arange(201) / 100.0, np.full((201, 3), 7.5), np.full((201, 3), -1.0))
        r = resample(s, 25.0)
        assert np.all(r.accel == 7.5) and np.all(r.gyro == -1.0)
        assert len(r) == 51

    def test_ramp_is_exact(self):
        t = np.arange(301) / 100.0
        s = stream(t, np.column_stack([t, 2 * t, -t]))
        r = resample(s, 25.0)
        np.testing.assert_allclose(r.accel, np.column_stack([r.t, 2 * r.t, -r.t]), atol=1e-12)

    def test_sinusoid(self):
        t = np.arange(1001) / 100.0
        s = stream(t, np.column_stack([np.sin(2 * np.pi * t)] * 3))
        r = resample(s, 25.0)
        assert np.abs(r.accel[:, 0] - np.sin(2 * np.pi * r.t)).max() < 1e-3

    @settings(max_examples=30, deadline=None)
    @given(st.integers(30, 200), st.integers(0, 2**31 - 1))
    def test_idempotent(self, n, seed):
        rng = np.random.default_rng(seed)
        s = stream(np.arange(n) / 100.0, rng.normal(size=(n, 3)), rng.normal(size=(n, 3)))
        once = resample(s, 25.0)
        twice = resample(once, 25.0)
        assert np.array_equal(once.t, twice.t)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-12)

    def test_upsampling_rejected(self):
        with pytest.raises(ValueError):
            resample(stream(np.arange(10) / 25.0), 100.0)

    def test_synchronize_common_grid(self):
        a = stream(np.arange(0.0, 10.0, 0.01))
        b = stream(np.arange(0.3, 12.0, 0.04))
        sa, sb = synchronize([a, b], 25.0)
        assert np.array_equal(sa.t, sb.t)
        assert sa.t[0] == pytest.approx(0.3) and sa.t[-1] <= 9.99 + 1e-9


class TestProjection:
    def test_identity(self):
        rng = np.random.default_rng(1)
        s = stream(np.arange(5.0), rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
        p = project_to_global(s, np.eye(3))
        assert np.array_equal(p.data, s.data)

    def test_yaw_quarter_turn(self):
        R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        s = stream([0.0], [[1.0, 0.0, 0.0]], [[0.0, 0.0, 1.0]])
        p = project_to_global(s, R)
        np.testing.assert_allclose(p.accel, [[0.0, 1.0, 0.0]], atol=1e-15)
        np.testing.assert_allclose(p.gyro, [[0.0, 0.0, 1.0]], atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_norm_preserved(self, seed):
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        R = q * np.sign(np.diag(r))
        if np.linalg.det(R) < 0:
            R[:, 0] *= -1
        s = stream(np.arange(20.0), rng.normal(size=(20, 3)), rng.normal(size=(20, 3)))
        p = project_to_global(s, R)
        np.testing.assert_allclose(np.linalg.norm(p.accel, axis=1), np.linalg.norm(s.accel, axis=1), rtol=1e-12)

    def test_reflection_rejected(self):
        with pytest.raises(ValueError):
            project_to_global(stream([0.0]), np.diag([1.0, 1.0, -1.0]))


class TestFillGaps:
    def test_short_gap_held(self):
        t = np.concatenate([np.arange(10) * 0.01, 0.3 + np.arange(10) * 0.01])
        acc = np.arange(20.0)[:, None] * np.ones(3)
        (out,) = fill_gaps(stream(t, acc))
        assert len(out) == 40
        assert np.all(out.accel[10:30] == 9.0) and out.accel[30, 0] == 10.0

    def test_long_gap_splits(self):
        t = np.concatenate([np.arange(10) * 0.01, 2.0 + np.arange(10) * 0.01])
        assert [len(p) for p in fill_gaps(stream(t))] == [10, 10]


class TestWindows:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 400), st.integers(2, 120), st.integers(1, 50))
    def test_count_formula(self, n, window, stride):
        expected = (n - window) // stride + 1 if n >= window else 0
        assert num_windows(n, window, stride) == expected

    def test_single_window(self):
        t = np.arange(100) / 25.0
        ws = make_windows([stream(t)], track(t, np.zeros((100, 2))), 100, 10)
        assert len(ws) == 1 and ws[0].device_data.shape == (1, 100, 6)

    def test_straight_line_label(self):
        t = np.arange(500) / 25.0
        truth = track(t, np.column_stack([1.2 * t, np.zeros_like(t)]))
        ws = make_windows([stream(t), stream(t)], truth, 100, 10)
        assert len(ws) == 41
        for w in ws:
            np.testing.assert_allclose(w.v_label, [1.2, 0.0], atol=1e-12)

    def test_circle_chord(self):
        r, omega = 3.0, 0.4
        tt = np.arange(0, 30.0, 0.01)
        truth = track(tt, np.column_stack([r * np.cos(omega * tt), r * np.sin(omega * tt)]))
        t = np.arange(0, 20.0, 0.04)
        for w in make_windows([stream(t)], truth, 100, 25):
            a, b = omega * w.t_start, omega * w.t_end
            chord = np.array([r * (np.cos(b) - np.cos(a)), r * (np.sin(b) - np.sin(a))]) / w.duration
            np.testing.assert_allclose(w.v_label, chord, atol=1e-9)

    def test_conservation_with_contiguous_windows(self, tmp_path):
        seq = load_sequence(generate(preset("STW", 60.0, 8), 8).write(tmp_path))
        ws = prepare_windows(seq, 25.0, 100, 99)
        total = sum(w.v_label * w.duration for w in ws)
        truth = seq.truth.horizontal_at(np.array([ws[0].t_start, ws[-1].t_end]))
        assert np.abs(total - (truth[1] - truth[0])).max() < 1e-6

    def test_unsynchronized_streams_rejected(self):
        t = np.arange(200) / 25.0
        with pytest.raises(ValueError):
            make_windows([stream(t), stream(t + 0.01)], track(t, np.zeros((200, 2))), 100, 10)

    def test_removed_device_splits_windows(self, tmp_path):
        script = preset("DRW", 40.0, 1)
        seq = load_sequence(generate(script, 1).write(tmp_path))
        ws = prepare_windows(seq, 25.0, 100, 25)
        assert ws and all(np.all(np.isfinite(w.device_data)) for w in ws)
