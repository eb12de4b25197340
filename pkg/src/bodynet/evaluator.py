"""Trajectory reconstruction from window velocities, error metrics and the PDR baseline."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.ndimage import uniform_filter1d
from scipy.signal import butter, filtfilt, find_peaks

from .dataio import DeviceWindow, ImuStream, PoseTrack

PDR_STEP_LENGTH = 0.67
DEFAULT_RTE_INTERVAL = 60.0


@dataclass
class Trajectory:
    t: np.ndarray
    positions: np.ndarray  # [N, 2]
    origin: str = "given"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if len(self.t) != len(self.positions):
            raise ValueError(f"{len(self.t)} timestamps vs {len(self.positions)} positions")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("trajectory positions must be finite")

    def __len__(self) -> int:
        return len(self.t)

    def at(self, t) -> np.ndarray:
        """Linearly interpolated positions at times inside the covered span."""
        t = np.asarray(t, dtype=np.float64)
        return np.stack([np.interp(t, self.t, self.positions[:, k]) for k in range(2)], axis=-1)

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())

    def translated(self, d) -> Trajectory:
        return Trajectory(self.t, self.positions + np.asarray(d, dtype=np.float64), self.origin)


def integrate_trajectory(
    velocities,
    window_starts,
    y0=(0.0, 0.0),
    last_duration: float | None = None,
) -> Trajectory:
    """Dead-reckon window velocities into positions.

    Window i's velocity applies from its start to the next window's start;
    the last velocity applies over ``last_duration`` (defaulting to the
    final stride), giving one point per window start plus the last window end.
    """
    v = np.asarray(velocities, dtype=np.float64).reshape(-1, 2)
    ts = np.asarray(window_starts, dtype=np.float64)
    if len(v) != len(ts) or len(v) == 0:
        raise ValueError("need one start time per velocity, at least one window")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("windows must be in strictly increasing temporal order")
    if last_duration is None:
        if len(ts) < 2:
            raise ValueError("last_duration required for a single window")
        last_duration = float(ts[-1] - ts[-2])
    if last_duration <= 0:
        raise ValueError("last_duration must be positive")
    times = np.append(ts, ts[-1] + last_duration)
    steps = v * np.diff(times)[:, None]
    pos = np.vstack([np.zeros(2), np.cumsum(steps, axis=0)]) + np.asarray(y0, dtype=np.float64)
    return Trajectory(times, pos, origin="y0")


def _common(predicted: Trajectory, truth: Trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predicted and truth positions on the predicted timestamps that truth covers."""
    if np.array_equal(predicted.t, truth.t):
        return predicted.t, predicted.positions, truth.positions
    lo, hi = truth.t[0] - 1e-9, truth.t[-1] + 1e-9
    mask = (predicted.t >= lo) & (predicted.t <= hi)
    if not mask.any():
        raise ValueError("trajectories do not overlap in time")
    t = predicted.t[mask]
    return t, predicted.positions[mask], truth.at(np.clip(t, truth.t[0], truth.t[-1]))


def position_errors(predicted: Trajectory, truth: Trajectory) -> np.ndarray:
    _, p, g = _common(predicted, truth)
    return np.linalg.norm(p - g, axis=1)


def ate(predicted: Trajectory, truth: Trajectory) -> float:
    """Root-mean-square pointwise position error in the shared frame (no alignment)."""
    e = position_errors(predicted, truth)
    return float(math.sqrt(np.mean(e * e)))


@dataclass
class RteResult:
    value: float
    interval: float
    n_intervals: int
    truncated: bool


def rte_detail(predicted: Trajectory, truth: Trajectory, interval: float = DEFAULT_RTE_INTERVAL) -> RteResult:
    """Relative trajectory error over ``interval`` seconds.

    For every sample whose interval fits inside the trajectory, both paths
    are re-anchored at that sample and the RMSE of the displacement error up
    to the interval end is taken; the result is the mean over starts.  A
    trajectory shorter than one interval is evaluated as a single truncated
    interval and flagged.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    t, p, g = _common(predicted, truth)
    ends = np.searchsorted(t, t + interval - 1e-9)
    starts = np.nonzero(ends < len(t))[0]
    truncated = len(starts) == 0
    if truncated:
        starts, ends = np.array([0]), np.array([len(t) - 1])
    else:
        ends = ends[starts]
    vals = []
    for i, j in zip(starts, ends):
        d = (p[i : j + 1] - p[i]) - (g[i : j + 1] - g[i])
        vals.append(math.sqrt(np.mean(np.sum(d * d, axis=1))))
    return RteResult(float(np.mean(vals)), float(interval), len(vals), truncated)


def rte(predicted: Trajectory, truth: Trajectory, interval: float = DEFAULT_RTE_INTERVAL) -> float:
    return rte_detail(predicted, truth, interval).value


def error_cdf(predicted: Trajectory, truth: Trajectory) -> list[tuple[float, float]]:
    """Empirical CDF of pointwise errors as ``(error, P[E <= error])`` at each distinct error."""
    return cdf_from_errors(position_errors(predicted, truth))


def cdf_from_errors(errors) -> list[tuple[float, float]]:
    e = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    if e.size == 0:
        return []
    values, counts = np.unique(e, return_counts=True)
    probs = np.cumsum(counts) / e.size
    probs[-1] = 1.0
    return [(float(v), float(p)) for v, p in zip(values, probs)]


# -- PDR baseline ----------------------------------------------------------------

@dataclass
class PdrResult:
    trajectory: Trajectory
    step_times: np.ndarray


def detect_steps(
    stream: ImuStream,
    cutoff_hz: float = 3.0,
    min_interval: float = 0.3,
    threshold: float = 0.15,
    mean_window: float = 1.0,
) -> np.ndarray:
    """Step times: peaks of the low-passed acceleration magnitude above its moving mean."""
    rate = stream.rate
    b, a = butter(2, cutoff_hz / (rate / 2.0))
    warmup = 3 * max(len(a), len(b))
    if len(stream) <= max(warmup, int(round(mean_window * rate))):
        raise ValueError(f"stream of {len(stream)} samples is shorter than the filter warm-up")
    mag = np.linalg.norm(stream.accel, axis=1)
    smooth = filtfilt(b, a, mag)
    base = uniform_filter1d(smooth, size=max(1, int(round(mean_window * rate))), mode="nearest")
    peaks, _ = find_peaks(smooth - base, height=threshold, distance=max(1, int(round(min_interval * rate))))
    return stream.t[peaks]


def pdr_baseline(
    stream: ImuStream,
    step_length: float = PDR_STEP_LENGTH,
    initial_heading: float = 0.0,
    y0=(0.0, 0.0),
    **detector,
) -> PdrResult:
    """Step-and-heading dead reckoning on a resampled, gravity-free phone stream.

    Heading is the initial heading plus the integrated vertical-axis gyro;
    each detected step advances ``step_length`` along the heading at that
    instant.  The trajectory has one point per stream sample.
    """
    steps = detect_steps(stream, **detector)
    heading = initial_heading + cumulative_trapezoid(stream.gyro[:, 2], stream.t, initial=0.0)
    h_step = np.interp(steps, stream.t, heading)
    moves = step_length * np.stack([np.cos(h_step), np.sin(h_step)], axis=-1)
    idx = np.searchsorted(stream.t, steps, side="left")
    inc = np.zeros((len(stream), 2))
    np.add.at(inc, idx, moves)
    pos = np.cumsum(inc, axis=0) + np.asarray(y0, dtype=np.float64)
    return PdrResult(Trajectory(stream.t, pos, origin="y0"), steps)


def initial_heading(truth: PoseTrack, t0: float, min_distance: float = 0.5) -> float:
    """Direction of the first ``min_distance`` metres of truth travel after ``t0``."""
    mask = truth.t >= t0
    p = truth.position[mask, :2]
    d = np.linalg.norm(p - p[0], axis=1)
    k = int(np.argmax(d >= min_distance)) if np.any(d >= min_distance) else len(p) - 1
    delta = p[k] - p[0]
    return float(math.atan2(delta[1], delta[0]))


# -- sequence-level evaluation ---------------------------------------------------

def split_segments(windows: list[DeviceWindow], max_step: float | None = None) -> list[list[int]]:
    """Group window indices (sorted by start) into runs without time gaps."""
    order = sorted(range(len(windows)), key=lambda i: windows[i].t_start)
    if not order:
        return []
    starts = np.array([windows[i].t_start for i in order])
    if max_step is None:
        d = np.diff(starts)
        max_step = 1.5 * float(np.median(d)) if len(d) else np.inf
    segs, cur = [], [order[0]]
    for prev, i in zip(order, order[1:]):
        if windows[i].t_start - windows[prev].t_start > max_step + 1e-9:
            segs.append(cur)
            cur = []
        cur.append(i)
    segs.append(cur)
    return segs


def sequence_trajectories(
    windows: list[DeviceWindow], velocities, truth: PoseTrack
) -> tuple[Trajectory, Trajectory]:
    """Predicted and truth trajectories of one sequence on shared timestamps.

    Each gap-free run of windows is integrated from the truth position at its
    first window start.
    """
    velocities = np.asarray(velocities, dtype=np.float64)
    ts, ps, gs = [], [], []
    for seg in split_segments(windows):
        w = [windows[i] for i in seg]
        starts = np.array([x.t_start for x in w])
        y0 = truth.horizontal_at(starts[:1])[0]
        pred = integrate_trajectory(velocities[seg], starts, y0, last_duration=w[-1].duration)
        ts.append(pred.t)
        ps.append(pred.positions)
        gs.append(truth.horizontal_at(pred.t))
    t = np.concatenate(ts)
    return Trajectory(t, np.vstack(ps), "truth_start"), Trajectory(t, np.vstack(gs), "truth")


@dataclass
class SequenceMetrics:
    sequence_id: str
    mode: str
    method: str
    ate: float
    rte: float
    rte_truncated: bool = False


@dataclass
class MetricsReport:
    rows: list[SequenceMetrics] = field(default_factory=list)
    cdf: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    rte_interval: float = DEFAULT_RTE_INTERVAL
    meta: dict = field(default_factory=dict)

    def methods(self) -> list[str]:
        return sorted({r.method for r in self.rows})

    def summary(self) -> list[dict]:
        """Mean ATE/RTE per (method, mode) plus an ``overall`` row per method."""
        out = []
        for m in self.methods():
            rows = [r for r in self.rows if r.method == m]
            modes = sorted({r.mode for r in rows})
            for mode in modes + ["overall"]:
                sel = rows if mode == "overall" else [r for r in rows if r.mode == mode]
                out.append({
                    "method": m,
                    "mode": mode,
                    "n": len(sel),
                    "ate": float(np.mean([r.ate for r in sel])),
                    "rte": float(np.mean([r.rte for r in sel])),
                })
        return out

    def overall(self, method: str) -> dict:
        return next(s for s in self.summary() if s["method"] == method and s["mode"] == "overall")

    def to_dict(self) -> dict:
        return {
            "rte_interval_s": self.rte_interval,
            "meta": self.meta,
            "sequences": [r.__dict__ for r in self.rows],
            "summary": self.summary(),
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sequence_id", "mode", "method", "ate", "rte", "rte_truncated"])
            for r in self.rows:
                w.writerow([r.sequence_id, r.mode, r.method, repr(r.ate), repr(r.rte), int(r.rte_truncated)])

    def write_cdf_csv(self, path: str | Path, method: str | None = None) -> None:
        method = method or (self.methods()[0] if self.methods() else "")
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["error_m", "probability"])
            for e, p in self.cdf.get(method, []):
                w.writerow([repr(e), repr(p)])
