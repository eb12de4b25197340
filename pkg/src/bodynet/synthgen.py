"""Synthetic three-device body-network sequences (phone, watch, earbuds) with ground truth.

The torso follows smooth speed and heading profiles.  Each device moves
with the torso plus a bounded, zero-mean local displacement (gait
oscillation aligned with the walking direction, lateral sway, vertical
bounce, optional shaking).  Device accelerations are the second derivative
of torso + local position, expressed in the global frame, plus a constant
bias and white noise.  Gyroscopes read the torso turn rate plus a small
gait-synchronous wobble.

Walking-mode presets
--------------------
STW  low oscillation on every device, no events.
PVW  the phone's oscillation amplitude switches between regimes at random times.
MVW  elevated oscillation plus random shaking on all three devices.
DRW  one device (watch or earbuds) is removed mid-walk; afterwards it rests (bias + noise only).
DLW  the walk contains zero-speed stops with vertical posture changes (stand, sit, squat).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import (
    DeviceEntry,
    ImuStream,
    PoseTrack,
    SequenceManifest,
    write_manifest,
    write_stream,
    write_truth,
    yaw_quaternion,
)

PRESET_MODES = ("STW", "PVW", "MVW", "DRW", "DLW")
DEVICE_NAMES = ("phone", "watch", "earbuds")
DEVICE_RATES = (100.0, 100.0, 25.0)
GAIT_FREQ = 2.0
REFERENCE_SPEED = 1.4

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


# -- smooth piecewise profiles -------------------------------------------------

def _smoothstep(u):
    return u * u * u * (10 - 15 * u + 6 * u * u)


def _smoothstep_d(u):
    return 30 * u * u * (1 - u) ** 2


def _profile(keys: list[tuple[float, float]], t: np.ndarray, derivative: bool = False) -> np.ndarray:
    """Quintic-smoothstep interpolation through ``(time, value)`` keys, held outside."""
    t = np.asarray(t, dtype=np.float64)
    kt = np.array([k[0] for k in keys])
    kv = np.array([k[1] for k in keys])
    if len(keys) == 1:
        return np.zeros_like(t) if derivative else np.full_like(t, kv[0])
    i = np.clip(np.searchsorted(kt, t, side="right") - 1, 0, len(kt) - 2)
    span = kt[i + 1] - kt[i]
    u = np.clip((t - kt[i]) / span, 0.0, 1.0)
    dv = kv[i + 1] - kv[i]
    if derivative:
        inside = (t > kt[0]) & (t < kt[-1])
        return np.where(inside, dv * _smoothstep_d(u) / span, 0.0)
    return kv[i] + dv * _smoothstep(u)


def _second_derivative(f, t: np.ndarray, h: float = 1e-3) -> np.ndarray:
    return (-f(t + 2 * h) + 16 * f(t + h) - 30 * f(t) + 16 * f(t - h) - f(t - 2 * h)) / (12 * h * h)


# -- script types ----------------------------------------------------------------

@dataclass
class DevicePerturbation:
    """Local motion and sensor-error parameters of one device."""

    name: str
    rate_hz: float
    osc_amp: float  # forward gait oscillation, m/s^2 at the reference speed
    osc_freq: float = GAIT_FREQ
    lateral_amp: float = 0.15
    vertical_amp: float = 0.8
    gyro_amp: float = 0.3
    phase: float = 0.0
    shake_amp: float = 0.0  # random-direction shaking, m/s^2
    regimes: list[tuple[float, float]] = field(default_factory=list)  # (switch time, amplitude scale)
    noise_acc: float = 0.05
    noise_gyro: float = 0.005
    bias_acc: float = 0.02
    bias_gyro: float = 0.002


@dataclass
class Event:
    kind: str  # "removal" or "stop"
    t: float
    t_end: float | None = None
    device: int | None = None
    posture: str | None = None


@dataclass
class MotionScript:
    duration: float
    speed_keys: list[tuple[float, float]]
    heading_keys: list[tuple[float, float]]
    mode: str
    devices: list[DevicePerturbation]
    events: list[Event] = field(default_factory=list)
    sync_jumps: bool = False
    clock_offsets: list[float] | None = None
    truth_rate_hz: float = 100.0
    subject_id: str = "synthetic"

    def validate(self) -> None:
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.truth_rate_hz < 25.0:
            raise ValueError("truth must be sampled at >= 25 Hz")
        for d in self.devices:
            if min(d.noise_acc, d.noise_gyro, d.bias_acc, d.bias_gyro) < 0:
                raise ValueError(f"{d.name}: noise and bias magnitudes must be >= 0")
        for e in self.events:
            end = e.t if e.t_end is None else e.t_end
            if not (0.0 <= e.t <= end <= self.duration):
                raise ValueError(f"event {e.kind} at {e.t} lies outside [0, {self.duration}]")
        if self.clock_offsets is not None and len(self.clock_offsets) != len(self.devices):
            raise ValueError("one clock offset per device required")

    def removals(self) -> list[Event]:
        return [e for e in self.events if e.kind == "removal"]

    def stops(self) -> list[Event]:
        return [e for e in self.events if e.kind == "stop"]


@dataclass
class SyntheticSequence:
    streams: list[ImuStream]
    truth: PoseTrack
    manifest: SequenceManifest
    script: MotionScript

    def write(self, out_dir: str | Path) -> Path:
        """Write device CSVs, truth CSV and ``manifest.json``; returns the manifest path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s, d in zip(self.streams, self.manifest.devices):
            write_stream(out / d.path, s)
        write_truth(out / self.manifest.truth_path, self.truth)
        path = out / "manifest.json"
        write_manifest(path, self.manifest)
        return path


# -- kinematics ----------------------------------------------------------------

class Kinematics:
    """Noise-free motion model of a script: torso kinematics and per-device local displacement."""

    JUMP_HEIGHT = 0.25
    JUMP_WIDTH = 0.08

    def __init__(self, script: MotionScript, seed: int = 0):
        self.script = script
        rng = np.random.default_rng([seed, 1])
        self._shakes = []
        for d in script.devices:
            comps = []
            if d.shake_amp > 0:
                for _ in range(2):
                    f = rng.uniform(2.6, 4.2)
                    comps.append((d.shake_amp / (2 * math.pi * f) ** 2, 2 * math.pi * f,
                                  rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi)))
            self._shakes.append(comps)
        self.jump_times: list[float] = []
        if script.sync_jumps:
            self.jump_times = [0.8, 1.8, 2.8] + [script.duration - x for x in (2.8, 1.8, 0.8)]

    # torso ---------------------------------------------------------------------
    def speed(self, t):
        return _profile(self.script.speed_keys, t)

    def heading(self, t):
        return _profile(self.script.heading_keys, t)

    def turn_rate(self, t):
        return _profile(self.script.heading_keys, t, derivative=True)

    def velocity(self, t) -> np.ndarray:
        s, h = self.speed(t), self.heading(t)
        return np.stack([s * np.cos(h), s * np.sin(h)], axis=-1)

    def acceleration(self, t) -> np.ndarray:
        """Horizontal torso acceleration, analytic."""
        s, h = self.speed(t), self.heading(t)
        ds = _profile(self.script.speed_keys, t, derivative=True)
        dh = self.turn_rate(t)
        c, sn = np.cos(h), np.sin(h)
        return np.stack([ds * c - s * dh * sn, ds * sn + s * dh * c], axis=-1)

    def position(self, t_grid: np.ndarray) -> np.ndarray:
        """Horizontal torso position at increasing times, by composite 8-point Gauss-Legendre."""
        t_grid = np.asarray(t_grid, dtype=np.float64)
        knots = np.unique(np.concatenate([[0.0], t_grid]))
        a, b = knots[:-1], knots[1:]
        mid, half = (a + b) / 2, (b - a) / 2
        nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        v = self.velocity(nodes.reshape(-1)).reshape(len(a), len(_GL_NODES), 2)
        inc = (v * _GL_WEIGHTS[None, :, None]).sum(axis=1) * half[:, None]
        cum = np.vstack([[0.0, 0.0], np.cumsum(inc, axis=0)])
        return cum[np.searchsorted(knots, t_grid)]

    def vertical(self, t) -> np.ndarray:
        """Torso height: sync jumps and posture changes during stops."""
        t = np.asarray(t, dtype=np.float64)
        z = np.zeros_like(t)
        for tj in self.jump_times:
            z = z + self.JUMP_HEIGHT * np.exp(-(((t - tj) / self.JUMP_WIDTH) ** 2))
        depth = {"stand": 0.0, "sit": 0.45, "squat": 0.6}
        for e in self.script.stops():
            d = depth.get(e.posture or "stand", 0.0)
            if d == 0.0 or e.t_end is None:
                continue
            span = e.t_end - e.t
            keys = [(e.t + 0.2 * span, 0.0), (e.t + 0.4 * span, -d), (e.t + 0.6 * span, -d), (e.t + 0.8 * span, 0.0)]
            z = z + _profile(keys, t)
        return z

    # devices -------------------------------------------------------------------
    def _active(self, j: int, t) -> np.ndarray:
        for e in self.script.removals():
            if e.device == j:
                return (np.asarray(t) < e.t).astype(np.float64)
        return np.ones_like(np.asarray(t, dtype=np.float64))

    def _regime_scale(self, j: int, t) -> np.ndarray:
        regimes = self.script.devices[j].regimes
        if not regimes:
            return np.ones_like(np.asarray(t, dtype=np.float64))
        keys = []
        prev = 1.0
        for ts, scale in regimes:
            keys += [(ts - 0.25, prev), (ts + 0.25, scale)]
            prev = scale
        return _profile(keys, t)

    def local_offset(self, j: int, t) -> np.ndarray:
        """Zero-mean displacement ``[..., 3]`` of device ``j`` relative to the torso."""
        d = self.script.devices[j]
        t = np.asarray(t, dtype=np.float64)
        w = 2 * math.pi * d.osc_freq
        theta = w * t + d.phase
        gait = self.speed(t) / REFERENCE_SPEED * self._regime_scale(j, t)
        h = self.heading(t)
        fwd = np.stack([np.cos(h), np.sin(h)], axis=-1)
        lat = np.stack([-np.sin(h), np.cos(h)], axis=-1)
        # forward waveform: acceleration ~ osc_amp * (sin th + 0.5 cos 2th), asymmetric in sign
        g_fwd = -(np.sin(theta) + 0.125 * np.cos(2 * theta)) * (d.osc_amp / w**2)
        g_lat = -np.sin(theta / 2) * (d.lateral_amp / (w / 2) ** 2)
        horiz = gait[..., None] * (g_fwd[..., None] * fwd + g_lat[..., None] * lat)
        for amp, ws, ph_a, ph_b in self._shakes[j]:
            direction = np.stack([np.full_like(t, math.cos(ph_b)), np.full_like(t, math.sin(ph_b))], axis=-1)
            horiz = horiz + (amp * np.sin(ws * t + ph_a))[..., None] * direction
        vert = -gait * np.sin(2 * theta + 0.7) * (d.vertical_amp / (2 * w) ** 2)
        return np.concatenate([horiz, vert[..., None]], axis=-1) * self._active(j, t)[..., None]

    def device_accel(self, j: int, t) -> np.ndarray:
        """Noise-free global-frame acceleration of device ``j``, ``[N, 3]``."""
        t = np.asarray(t, dtype=np.float64)
        local = _second_derivative(lambda x: self.local_offset(j, x), t)
        body = np.zeros((len(t), 3))
        body[:, :2] = self.acceleration(t)
        body[:, 2] = _second_derivative(self.vertical, t)
        active = self._active(j, t)[:, None]
        return body * active + local

    def device_gyro(self, j: int, t) -> np.ndarray:
        d = self.script.devices[j]
        t = np.asarray(t, dtype=np.float64)
        theta = 2 * math.pi * d.osc_freq * t + d.phase
        gait = self.speed(t) / REFERENCE_SPEED * self._regime_scale(j, t)
        wobble = d.gyro_amp * gait[:, None] * np.stack(
            [np.cos(theta), 0.5 * np.sin(theta), 0.2 * np.sin(2 * theta)], axis=-1
        )
        out = wobble
        out[:, 2] += self.turn_rate(t)
        return out * self._active(j, t)[:, None]


# -- generation ------------------------------------------------------------------

def generate(script: MotionScript, seed: int, sequence_id: str | None = None) -> SyntheticSequence:
    """Sample device streams and ground truth for ``script``; deterministic given ``seed``."""
    script.validate()
    kin = Kinematics(script, seed)
    rng = np.random.default_rng([seed, 0])
    seq_id = sequence_id or f"{script.mode.lower()}_{seed:05d}"
    offsets = script.clock_offsets or [0.0] * len(script.devices)

    n_truth = int(round(script.duration * script.truth_rate_hz)) + 1
    tt = np.arange(n_truth) / script.truth_rate_hz
    pos = np.zeros((n_truth, 3))
    pos[:, :2] = kin.position(tt)
    pos[:, 2] = kin.vertical(tt)
    h0 = float(kin.heading(0.0))
    truth = PoseTrack(tt, pos, yaw_quaternion(kin.heading(tt) - h0))

    streams = []
    for j, d in enumerate(script.devices):
        n = int(round(script.duration * d.rate_hz)) + 1
        ts = np.arange(n) / d.rate_hz
        t_true = np.clip(ts - offsets[j], 0.0, script.duration)
        bias_a = rng.uniform(-d.bias_acc, d.bias_acc, size=3)
        bias_g = rng.uniform(-d.bias_gyro, d.bias_gyro, size=3)
        acc = kin.device_accel(j, t_true) + bias_a + rng.normal(0.0, 1.0, (n, 3)) * d.noise_acc
        gyr = kin.device_gyro(j, t_true) + bias_g + rng.normal(0.0, 1.0, (n, 3)) * d.noise_gyro
        streams.append(ImuStream(ts, acc, gyr, d.name))

    manifest = SequenceManifest(
        sequence_id=seq_id,
        subject_id=script.subject_id,
        mode=script.mode,
        devices=[DeviceEntry(d.name, f"{d.name}.csv", d.rate_hz) for d in script.devices],
        truth_path="truth.csv",
        truth_rate_hz=script.truth_rate_hz,
        sync_jumps=script.sync_jumps,
        extra={"generator": "bodynet.synthgen", "seed": seed, "duration_s": script.duration},
    )
    return SyntheticSequence(streams, truth, manifest, script)


# -- presets ---------------------------------------------------------------------

def default_devices(phone_amp: float = 0.3, watch_amp: float = 2.0, earbud_amp: float = 0.5) -> list[DevicePerturbation]:
    return [
        DevicePerturbation("phone", DEVICE_RATES[0], phone_amp, phase=0.0, vertical_amp=0.8),
        DevicePerturbation("watch", DEVICE_RATES[1], watch_amp, phase=0.9, lateral_amp=0.3, gyro_amp=0.8),
        DevicePerturbation("earbuds", DEVICE_RATES[2], earbud_amp, phase=0.3, vertical_amp=0.6, gyro_amp=0.1),
    ]


def _walk_profiles(rng: np.random.Generator, duration: float, start: float = 0.0):
    """Random speed and heading keys: ramp up, piecewise-constant cruising speeds, turns, ramp down."""
    s_keys = [(0.0, 0.0), (start, 0.0)] if start > 0 else [(0.0, 0.0)]
    t = start + 1.5
    speed = rng.uniform(0.9, 1.7)
    s_keys.append((t, speed))
    while True:
        t_next = t + rng.uniform(6.0, 14.0)
        if t_next > duration - start - 6.0:
            break
        new = rng.uniform(0.9, 1.7)
        s_keys += [(t_next, speed), (t_next + 1.5, new)]
        speed, t = new, t_next + 1.5
    end = duration - start
    s_keys += [(end - 1.5, speed), (end, 0.0)]
    if start > 0:
        s_keys.append((duration, 0.0))

    h = rng.uniform(-math.pi, math.pi)
    h_keys = [(0.0, h)]
    t = start + rng.uniform(3.0, 8.0)
    while t < end - 5.0:
        dur = rng.uniform(1.5, 4.0)
        h_keys += [(t, h)]
        h = h + rng.choice([-1.0, 1.0]) * rng.uniform(math.pi / 6, math.pi)
        h_keys.append((t + dur, h))
        t = t + dur + rng.uniform(4.0, 12.0)
    return s_keys, h_keys


def _insert_stop(s_keys, t0: float, t1: float):
    """Bring the speed profile to zero on ``[t0, t1]``; returns new keys."""
    speed_at = float(_profile(s_keys, np.array([t0 - 1.5]))[0])
    resume = float(_profile(s_keys, np.array([t1 + 1.5]))[0])
    kept = [k for k in s_keys if k[0] < t0 - 1.5 or k[0] > t1 + 1.5]
    kept += [(t0 - 1.5, speed_at), (t0, 0.0), (t1, 0.0), (t1 + 1.5, resume)]
    return sorted(kept)


def preset(mode: str, duration: float = 60.0, seed: int = 0, sync_jumps: bool = False) -> MotionScript:
    """Documented parameterization of a walking mode (see module docstring)."""
    if mode not in PRESET_MODES:
        raise ValueError(f"unknown walking mode {mode!r}; expected one of {PRESET_MODES}")
    rng = np.random.default_rng([seed, 7])
    start = 4.0 if sync_jumps else 0.0
    s_keys, h_keys = _walk_profiles(rng, duration, start)
    devices = default_devices()
    events: list[Event] = []
    if mode == "PVW":
        n = int(rng.integers(2, 5))
        times = np.sort(rng.uniform(0.1 * duration, 0.9 * duration, size=n))
        scales = rng.choice([1.0, 10.0 / 3.0, 25.0 / 3.0], size=n)  # 0.3, 1.0, 2.5 m/s^2
        devices[0] = replace(devices[0], regimes=[(float(a), float(b)) for a, b in zip(times, scales)])
    elif mode == "MVW":
        devices = default_devices(phone_amp=2.5, watch_amp=2.4, earbud_amp=1.0)
        devices = [replace(d, shake_amp=0.8, gyro_amp=d.gyro_amp * 2) for d in devices]
    elif mode == "DRW":
        device = int(rng.integers(1, 3))
        events.append(Event("removal", float(rng.uniform(0.3, 0.7) * duration), device=device))
    elif mode == "DLW":
        n_stops = 1 if duration < 45 else 2
        slots = np.linspace(0.2, 0.8, n_stops + 1)
        for k in range(n_stops):
            t0 = float(rng.uniform(slots[k], slots[k + 1] - 0.1) * duration)
            t0 = max(t0, start + 4.0)
            t1 = t0 + float(rng.uniform(3.0, 6.0))
            if t1 > duration - start - 4.0:
                continue
            s_keys = _insert_stop(s_keys, t0, t1)
            posture = str(rng.choice(["stand", "sit", "squat"]))
            events.append(Event("stop", t0, t1, posture=posture))
    offsets = None
    if sync_jumps:
        offsets = [0.0, float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.5, 0.5))]
    return MotionScript(
        duration=duration,
        speed_keys=s_keys,
        heading_keys=h_keys,
        mode=mode,
        devices=devices,
        events=events,
        sync_jumps=sync_jumps,
        clock_offsets=offsets,
    )


def still_script(duration: float = 10.0) -> MotionScript:
    """Zero speed, zero oscillation, zero noise."""
    devices = [
        replace(d, osc_amp=0.0, lateral_amp=0.0, vertical_amp=0.0, gyro_amp=0.0,
                noise_acc=0.0, noise_gyro=0.0, bias_acc=0.0, bias_gyro=0.0)
        for d in default_devices()
    ]
    return MotionScript(duration, [(0.0, 0.0)], [(0.0, 0.0)], "SYN", devices)


def make_dataset(modes: list[str], count: int, duration: float, seed: int) -> list[SyntheticSequence]:
    """``count`` sequences cycling through ``modes``, seeds derived from ``seed``."""
    out = []
    for i in range(count):
        mode = modes[i % len(modes)]
        s = seed * 1000 + i
        out.append(generate(preset(mode, duration, s), s, sequence_id=f"{mode.lower()}_{i:03d}"))
    return out
