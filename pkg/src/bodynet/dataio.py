"""Sensor-log ingestion: parsing, clock alignment, resampling, frame projection and windowing.

File formats
------------
Sensor CSV (one per device): header ``t,ax,ay,az,gx,gy,gz``; seconds,
m/s^2 (gravity-compensated), rad/s.
Truth CSV: header ``t,px,py,pz,qw,qx,qy,qz``; seconds, meters, unit quaternion.
Manifest: JSON document, see :class:`SequenceManifest`.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import signal

log = logging.getLogger(__name__)

IMU_HEADER = ("t", "ax", "ay", "az", "gx", "gy", "gz")
TRUTH_HEADER = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz")
WALKING_MODES = ("STW", "PVW", "MVW", "DRW", "DLW", "HD", "MP", "PK", "BG", "SYN")
MAX_HOLD_GAP = 0.5


class DataFormatError(ValueError):
    """A sensor/truth/manifest file does not follow the documented format."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class SyncError(ValueError):
    """Jump-based clock alignment could not find enough spikes."""


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: tuple[float, float, float]
    gyro: tuple[float, float, float]


@dataclass
class ImuStream:
    """Column-oriented IMU stream; behaves as a sequence of :class:`ImuSample`."""

    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.accel = np.asarray(self.accel, dtype=np.float64).reshape(-1, 3)
        self.gyro = np.asarray(self.gyro, dtype=np.float64).reshape(-1, 3)
        if not (len(self.t) == len(self.accel) == len(self.gyro)):
            raise ValueError("t, accel and gyro lengths differ")

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample], name: str = "") -> ImuStream:
        return cls(
            np.array([s.t for s in samples], dtype=np.float64),
            np.array([s.accel for s in samples], dtype=np.float64).reshape(-1, 3),
            np.array([s.gyro for s in samples], dtype=np.float64).reshape(-1, 3),
            name,
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> ImuSample:
        return ImuSample(float(self.t[i]), tuple(self.accel[i]), tuple(self.gyro[i]))

    def __iter__(self) -> Iterator[ImuSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def data(self) -> np.ndarray:
        """``[N, 6]`` array, accel then gyro."""
        return np.hstack([self.accel, self.gyro])

    @property
    def rate(self) -> float:
        return 1.0 / float(np.median(np.diff(self.t)))

    def shifted(self, offset: float) -> ImuStream:
        return ImuStream(self.t + offset, self.accel.copy(), self.gyro.copy(), self.name)

    def between(self, t0: float, t1: float) -> ImuStream:
        m = (self.t >= t0) & (self.t <= t1)
        return ImuStream(self.t[m], self.accel[m], self.gyro[m], self.name)


@dataclass(frozen=True)
class PoseSample:
    t: float
    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float]


@dataclass
class PoseTrack:
    """Ground-truth poses: positions [N, 3] and (w, x, y, z) quaternions [N, 4]."""

    t: np.ndarray
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(-1, 3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(-1, 4)
        norms = np.linalg.norm(self.orientation, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
        if bad.size:
            raise ValueError(f"quaternion at index {bad[0]} has norm {norms[bad[0]]:.9f}")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> PoseSample:
        return PoseSample(float(self.t[i]), tuple(self.position[i]), tuple(self.orientation[i]))

    def horizontal_at(self, t) -> np.ndarray:
        """Linearly interpolated horizontal position(s) at time(s) ``t``."""
        t = np.asarray(t, dtype=np.float64)
        lo, hi = self.t[0], self.t[-1]
        if np.any(t < lo - 1e-9) or np.any(t > hi + 1e-9):
            raise ValueError(f"time outside truth span [{lo}, {hi}]")
        x = np.interp(t, self.t, self.position[:, 0])
        y = np.interp(t, self.t, self.position[:, 1])
        return np.stack([x, y], axis=-1)

    def rotation_at_start(self) -> np.ndarray:
        return quat_to_matrix(self.orientation[0])


@dataclass
class DeviceWindow:
    device_data: np.ndarray  # [J, L, 6]
    t_start: float
    duration: float
    v_label: np.ndarray  # [2]
    sequence_id: str = ""
    mode: str = ""

    @property
    def t_end(self) -> float:
        return self.t_start + self.duration


@dataclass
class DeviceEntry:
    name: str
    path: str
    rate_hz: float


@dataclass
class SequenceManifest:
    """Per-sequence metadata document.

    JSON keys: ``sequence_id``, ``subject_id``, ``mode``, ``devices`` (list of
    ``{name, path, rate_hz}``), ``truth`` (``{path, rate_hz}``),
    ``sync_jumps`` (bool) and optional ``extra`` (free-form object).  Paths
    are relative to the manifest's directory.
    """

    sequence_id: str
    subject_id: str
    mode: str
    devices: list[DeviceEntry]
    truth_path: str
    truth_rate_hz: float
    sync_jumps: bool = False
    extra: dict = field(default_factory=dict)
    root: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "subject_id": self.subject_id,
            "mode": self.mode,
            "devices": [{"name": d.name, "path": d.path, "rate_hz": d.rate_hz} for d in self.devices],
            "truth": {"path": self.truth_path, "rate_hz": self.truth_rate_hz},
            "sync_jumps": self.sync_jumps,
            "extra": self.extra,
        }


# -- quaternion helpers ------------------------------------------------------

def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def yaw_quaternion(yaw) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64)
    out = np.zeros(yaw.shape + (4,))
    out[..., 0] = np.cos(yaw / 2)
    out[..., 3] = np.sin(yaw / 2)
    return out


# -- CSV I/O -----------------------------------------------------------------

def _read_numeric_csv(path: str | Path, header: tuple[str, ...]) -> np.ndarray:
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DataFormatError("empty file", path, 1) from None
        if tuple(c.strip() for c in first) != header:
            raise DataFormatError(f"expected header {','.join(header)!r}, got {','.join(first)!r}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise DataFormatError(f"non-numeric field ({exc})", path, lineno) from None
            if not all(np.isfinite(vals)):
                raise DataFormatError("non-finite value", path, lineno)
            rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    if len(arr) >= 2:
        dt = np.diff(arr[:, 0])
        bad = np.flatnonzero(dt <= 0)
        if bad.size:
            i = int(bad[0])
            kind = "duplicate" if dt[i] == 0 else "non-monotonic"
            raise DataFormatError(f"{kind} timestamp {arr[i + 1, 0]!r}", path, i + 3)
    return arr


def load_stream(path: str | Path, name: str = "") -> ImuStream:
    """Parse a sensor CSV; timestamps must be strictly increasing."""
    arr = _read_numeric_csv(path, IMU_HEADER)
    return ImuStream(arr[:, 0], arr[:, 1:4], arr[:, 4:7], name or Path(path).stem)


def load_truth(path: str | Path) -> PoseTrack:
    arr = _read_numeric_csv(path, TRUTH_HEADER)
    try:
        return PoseTrack(arr[:, 0], arr[:, 1:4], arr[:, 4:8])
    except ValueError as exc:
        raise DataFormatError(str(exc), path) from None


def _fmt(x: float) -> str:
    return repr(float(x))


def write_stream(path: str | Path, stream: ImuStream) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(IMU_HEADER) + "\n")
        for row in np.column_stack([stream.t, stream.accel, stream.gyro]):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_truth(path: str | Path, truth: PoseTrack) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(TRUTH_HEADER) + "\n")
        for row in np.column_stack([truth.t, truth.position, truth.orientation]):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_manifest(path: str | Path, manifest: SequenceManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, check_files: bool = True) -> SequenceManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    required = {"sequence_id", "subject_id", "mode", "devices", "truth"}
    missing = required - doc.keys()
    if missing:
        raise DataFormatError(f"missing keys {sorted(missing)}", path)
    unknown = doc.keys() - required - {"sync_jumps", "extra"}
    if unknown:
        raise DataFormatError(f"unknown keys {sorted(unknown)}", path)
    if doc["mode"] not in WALKING_MODES:
        raise DataFormatError(f"unknown walking mode {doc['mode']!r}", path)
    man = SequenceManifest(
        sequence_id=str(doc["sequence_id"]),
        subject_id=str(doc["subject_id"]),
        mode=doc["mode"],
        devices=[DeviceEntry(d["name"], d["path"], float(d["rate_hz"])) for d in doc["devices"]],
        truth_path=doc["truth"]["path"],
        truth_rate_hz=float(doc["truth"]["rate_hz"]),
        sync_jumps=bool(doc.get("sync_jumps", False)),
        extra=doc.get("extra", {}),
        root=path.parent,
    )
    if check_files:
        for d in man.devices:
            load_stream(man.root / d.path)
        load_truth(man.root / man.truth_path)
    return man


# -- alignment -----------------------------------------------------------------

def _uniform(t: np.ndarray, values: np.ndarray, step: float, t0: float, t1: float) -> np.ndarray:
    grid = t0 + step * np.arange(int(np.floor((t1 - t0) / step + 1e-9)) + 1)
    return grid, np.interp(grid, t, values, left=0.0, right=0.0)


def _spike_count(x: np.ndarray, step: float) -> int:
    mag = np.abs(x)
    if mag.max() <= 0:
        return 0
    peaks, _ = signal.find_peaks(mag, height=0.5 * mag.max(), distance=max(1, int(round(0.25 / step))))
    return len(peaks)


def _spike_train(x: np.ndarray) -> np.ndarray:
    mag = np.abs(x)
    return np.maximum(mag - 0.25 * mag.max(), 0.0)


def align_by_jumps(
    streams: Sequence[ImuStream], truth: PoseTrack, max_lag: float = 2.0
) -> list[float]:
    """Per-stream clock offsets (seconds, to be *added* to stream timestamps).

    Each stream's vertical acceleration and the truth's vertical
    acceleration (second derivative of ``pz``) are reduced to spike trains
    and cross-correlated on a common uniform grid; the lag of the
    correlation peak (refined by parabolic interpolation) gives the offset.
    """
    step_truth = float(np.median(np.diff(truth.t)))
    pz_grid, pz = _uniform(truth.t, truth.position[:, 2], step_truth, truth.t[0], truth.t[-1])
    truth_acc = np.gradient(np.gradient(pz, step_truth), step_truth)
    n_truth = _spike_count(truth_acc, step_truth)
    if n_truth < 3:
        raise SyncError(f"truth: detected {n_truth} jump spikes, need at least 3")

    offsets = []
    for s in streams:
        step = min(step_truth, 1.0 / s.rate)
        n_stream = _spike_count(s.accel[:, 2], 1.0 / s.rate)
        if n_stream < 3:
            raise SyncError(f"stream {s.name!r}: detected {n_stream} jump spikes, need at least 3")
        t0 = min(truth.t[0], s.t[0]) - max_lag
        t1 = max(truth.t[-1], s.t[-1]) + max_lag
        _, a = _uniform(s.t, _spike_train(s.accel[:, 2]), step, t0, t1)
        _, b = _uniform(pz_grid, _spike_train(truth_acc), step, t0, t1)
        corr = signal.correlate(a, b, mode="full", method="fft")
        lags = signal.correlation_lags(len(a), len(b), mode="full")
        keep = np.abs(lags * step) <= max_lag
        corr, lags = corr[keep], lags[keep]
        k = int(np.argmax(corr))
        shift = float(lags[k])
        if 0 < k < len(corr) - 1:
            c0, c1, c2 = corr[k - 1], corr[k], corr[k + 1]
            denom = c0 - 2 * c1 + c2
            if denom < 0:
                shift += 0.5 * (c0 - c2) / denom
        offsets.append(-shift * step)
    return offsets


# -- resampling / projection ---------------------------------------------------

def resample(stream: ImuStream, rate_hz: float, start: float | None = None) -> ImuStream:
    """Linear interpolation onto a uniform grid ``start + k / rate_hz`` inside the stream span."""
    if len(stream) == 0:
        raise ValueError("cannot resample an empty stream")
    if len(stream) > 1 and rate_hz > stream.rate * (1 + 1e-6):
        raise ValueError(f"target rate {rate_hz} Hz exceeds native rate {stream.rate:.3f} Hz")
    t0 = stream.t[0] if start is None else float(start)
    if t0 < stream.t[0] - 1e-12:
        raise ValueError("grid start precedes the stream")
    n = int(np.floor((stream.t[-1] - t0) * rate_hz + 1e-9)) + 1
    if n < 1:
        raise ValueError("grid start lies after the stream end")
    grid = t0 + np.arange(n) / rate_hz
    grid = np.minimum(grid, stream.t[-1])
    data = stream.data
    out = np.column_stack([np.interp(grid, stream.t, data[:, c]) for c in range(6)])
    return ImuStream(grid, out[:, :3], out[:, 3:], stream.name)


def check_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
        raise ValueError("matrix is not a proper rotation (R R^T != I or det != +1)")
    return R


def project_to_global(stream: ImuStream, initial_rotation: np.ndarray) -> ImuStream:
    """Rotate accel and gyro vectors by the device-to-global rotation."""
    R = check_rotation(initial_rotation)
    return ImuStream(stream.t.copy(), stream.accel @ R.T, stream.gyro @ R.T, stream.name)


def fill_gaps(stream: ImuStream, max_gap: float = MAX_HOLD_GAP) -> list[ImuStream]:
    """Hold the last sample across gaps up to ``max_gap`` s; split the stream at longer gaps."""
    if len(stream) < 2:
        return [stream]
    dt = float(np.median(np.diff(stream.t)))
    pieces: list[ImuStream] = []
    t, acc, gyr = [stream.t[0]], [stream.accel[0]], [stream.gyro[0]]
    for i in range(1, len(stream)):
        gap = stream.t[i] - stream.t[i - 1]
        if gap > 1.5 * dt:
            if gap > max_gap:
                pieces.append(ImuStream(np.array(t), np.array(acc), np.array(gyr), stream.name))
                t, acc, gyr = [], [], []
            else:
                n_fill = int(round(gap / dt)) - 1
                for k in range(1, n_fill + 1):
                    t.append(stream.t[i - 1] + k * dt)
                    acc.append(stream.accel[i - 1])
                    gyr.append(stream.gyro[i - 1])
        t.append(stream.t[i])
        acc.append(stream.accel[i])
        gyr.append(stream.gyro[i])
    pieces.append(ImuStream(np.array(t), np.array(acc), np.array(gyr), stream.name))
    return pieces


def synchronize(
    streams: Sequence[ImuStream], rate_hz: float, span: tuple[float, float] | None = None
) -> list[ImuStream]:
    """Resample all streams onto one grid covering their common span (optionally clipped)."""
    t0 = max(s.t[0] for s in streams)
    t1 = min(s.t[-1] for s in streams)
    if span is not None:
        t0, t1 = max(t0, span[0]), min(t1, span[1])
    if t1 <= t0:
        raise ValueError("streams have no common time span")
    out = [resample(s, rate_hz, start=t0) for s in streams]
    n = min(int(np.sum(s.t <= t1 + 1e-9)) for s in out)
    grid = out[0].t[:n]
    return [ImuStream(grid.copy(), s.accel[:n], s.gyro[:n], s.name) for s in out]


# -- windowing -----------------------------------------------------------------

def num_windows(n_samples: int, window: int, stride: int) -> int:
    return 0 if n_samples < window else (n_samples - window) // stride + 1


def make_windows(
    streams: Sequence[ImuStream],
    truth: PoseTrack,
    window: int,
    stride: int,
    sequence_id: str = "",
    mode: str = "",
) -> list[DeviceWindow]:
    """Slice synchronized streams into windows labeled with mean horizontal velocity.

    A window spans the timestamps of its first and last samples; its label
    is the truth displacement between those instants over their difference.
    """
    if stride < 1 or window < 2:
        raise ValueError("window must be >= 2 samples and stride >= 1")
    n = len(streams[0])
    for s in streams[1:]:
        if len(s) != n or np.max(np.abs(s.t - streams[0].t)) > 1e-9:
            raise ValueError("streams are not on a common grid; call synchronize() first")
    if n < window:
        raise ValueError(f"span of {n} samples is shorter than one window of {window}")
    t = streams[0].t
    data = np.stack([s.data for s in streams])  # [J, N, 6]
    starts = np.arange(num_windows(n, window, stride)) * stride
    t_start = t[starts]
    t_end = t[starts + window - 1]
    p0 = truth.horizontal_at(t_start)
    p1 = truth.horizontal_at(t_end)
    vel = (p1 - p0) / (t_end - t_start)[:, None]
    return [
        DeviceWindow(
            data[:, s : s + window, :].copy(), float(ts), float(te - ts), v, sequence_id, mode
        )
        for s, ts, te, v in zip(starts, t_start, t_end, vel)
    ]


# -- whole-sequence pipeline ---------------------------------------------------

@dataclass
class LoadedSequence:
    manifest: SequenceManifest
    streams: list[ImuStream]
    truth: PoseTrack


def load_sequence(manifest_path: str | Path) -> LoadedSequence:
    man = load_manifest(manifest_path, check_files=False)
    streams = [load_stream(man.root / d.path, d.name) for d in man.devices]
    truth = load_truth(man.root / man.truth_path)
    return LoadedSequence(man, streams, truth)


def _intersect_spans(spans_per_stream: list[list[tuple[float, float]]]) -> list[tuple[float, float]]:
    common = spans_per_stream[0]
    for spans in spans_per_stream[1:]:
        nxt = []
        for a0, a1 in common:
            for b0, b1 in spans:
                lo, hi = max(a0, b0), min(a1, b1)
                if hi > lo:
                    nxt.append((lo, hi))
        common = nxt
    return common


def prepare_windows(
    seq: LoadedSequence,
    rate_hz: float = 25.0,
    window: int = 100,
    stride: int = 10,
) -> list[DeviceWindow]:
    """Align, gap-fill, project, synchronize and window one sequence."""
    streams = list(seq.streams)
    truth = seq.truth
    if seq.manifest.sync_jumps:
        offsets = align_by_jumps(streams, truth)
        log.info("%s: clock offsets %s", seq.manifest.sequence_id, offsets)
        streams = [s.shifted(o) for s, o in zip(streams, offsets)]
    R0 = truth.rotation_at_start()
    pieces = [[project_to_global(p, R0) for p in fill_gaps(s)] for s in streams]
    spans = _intersect_spans([[(p.t[0], p.t[-1]) for p in ps] for ps in pieces])
    windows: list[DeviceWindow] = []
    for lo, hi in spans:
        lo, hi = max(lo, truth.t[0]), min(hi, truth.t[-1])
        if (hi - lo) * rate_hz + 1 < window:
            continue
        parts = [next(p for p in ps if p.t[0] <= lo + 1e-9 and p.t[-1] >= hi - 1e-9) for ps in pieces]
        synced = synchronize(parts, rate_hz, span=(lo, hi))
        if len(synced[0]) < window:
            continue
        windows += make_windows(
            synced, truth, window, stride, seq.manifest.sequence_id, seq.manifest.mode
        )
    return windows


def stack_windows(windows: Sequence[DeviceWindow]) -> tuple[np.ndarray, np.ndarray]:
    """``([N, J, L, 6], [N, 2])`` arrays from a list of windows."""
    x = np.stack([w.device_data for w in windows])
    y = np.stack([w.v_label for w in windows])
    return x, y
