"""Glue between data, training and evaluation used by the command line and the acceptance suite."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import (
    DeviceWindow,
    ImuStream,
    LoadedSequence,
    load_sequence,
    prepare_windows,
    project_to_global,
    resample,
    stack_windows,
)
from .diffnet.params import ParameterSet
from .evaluator import (
    MetricsReport,
    SequenceMetrics,
    Trajectory,
    cdf_from_errors,
    initial_heading,
    pdr_baseline,
    position_errors,
    rte_detail,
    sequence_trajectories,
)
from .model import AblationConfig, predict
from .synthgen import PRESET_MODES, generate, preset
from .trainer import DivergenceError, TrainConfig, TrainResult, flatten, split_dataset, train


@dataclass
class SequenceData:
    sequence_id: str
    mode: str
    windows: list[DeviceWindow]
    loaded: LoadedSequence

    @property
    def truth(self):
        return self.loaded.truth


def find_manifests(root: str | Path) -> list[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    if not root.is_dir():
        raise FileNotFoundError(f"data path {root} does not exist")
    found = sorted(root.rglob("manifest.json"))
    if not found:
        raise FileNotFoundError(f"no manifest.json found under {root}")
    return found


def load_dataset(root: str | Path, cfg: TrainConfig) -> list[SequenceData]:
    out = []
    for path in find_manifests(root):
        seq = load_sequence(path)
        windows = prepare_windows(seq, cfg.data.rate_hz, cfg.data.window, cfg.data.stride)
        if windows:
            out.append(SequenceData(seq.manifest.sequence_id, seq.manifest.mode, windows, seq))
    return out


def simulate_dataset(
    out_dir: str | Path, count: int, duration: float, seed: int, modes: Sequence[str] = PRESET_MODES,
    sync_jumps: bool = False,
) -> list[Path]:
    """Write ``count`` synthetic sequences cycling through ``modes`` into subdirectories."""
    paths = []
    for i in range(count):
        mode = modes[i % len(modes)]
        s = seed * 1000 + i
        sid = f"{mode.lower()}_{i:03d}"
        seq = generate(preset(mode, duration, s, sync_jumps=sync_jumps), s, sequence_id=sid)
        paths.append(seq.write(Path(out_dir) / sid))
    return paths


def split_sequences(data: list[SequenceData], cfg: TrainConfig):
    """Sequence-level split; returns three lists of :class:`SequenceData`."""
    by_first = {id(d.windows[0]): d for d in data}
    parts = split_dataset([d.windows for d in data], tuple(cfg.data.split), cfg.seed)
    return tuple([by_first[id(g[0])] for g in part] for part in parts)


# -- evaluation --------------------------------------------------------------------

def _phone_stream(seq: LoadedSequence, rate_hz: float) -> ImuStream:
    names = [d.name for d in seq.manifest.devices]
    j = names.index("phone") if "phone" in names else 0
    s = project_to_global(seq.streams[j], seq.truth.rotation_at_start())
    return resample(s, rate_hz)


def _pdr_trajectory(seq: SequenceData, t: np.ndarray, rate_hz: float) -> Trajectory:
    phone = _phone_stream(seq.loaded, rate_hz).between(t[0], t[-1] + 1e-9)
    h0 = initial_heading(seq.truth, t[0])
    y0 = seq.truth.horizontal_at(t[:1])[0]
    traj = pdr_baseline(phone, initial_heading=h0, y0=y0).trajectory
    return Trajectory(t, traj.at(t), origin="truth_start")


def evaluate(
    params: ParameterSet | None,
    cfg: TrainConfig,
    sequences: Sequence[SequenceData],
    baselines: Sequence[str] = (),
    rte_interval: float = 60.0,
    method: str = "model",
) -> MetricsReport:
    """Per-sequence ATE/RTE for the model and the requested baselines (``zero``, ``pdr``)."""
    report = MetricsReport(rte_interval=rte_interval, meta={"config_digest": cfg.digest(), "variant": cfg.variant_tag})
    errors: dict[str, list[np.ndarray]] = {}
    methods = ([method] if params is not None else []) + list(baselines)
    for seq in sequences:
        order = sorted(range(len(seq.windows)), key=lambda i: seq.windows[i].t_start)
        windows = [seq.windows[i] for i in order]
        x, _ = stack_windows(windows)
        for m in methods:
            if m == method:
                v = predict(x, params, cfg.model, cfg.ablation, cfg.loss)
                pred, truth = sequence_trajectories(windows, v, seq.truth)
            elif m == "zero":
                pred, truth = sequence_trajectories(windows, np.zeros((len(windows), 2)), seq.truth)
            elif m == "pdr":
                _, truth = sequence_trajectories(windows, np.zeros((len(windows), 2)), seq.truth)
                pred = _pdr_trajectory(seq, truth.t, cfg.data.rate_hz)
            else:
                raise ValueError(f"unknown baseline {m!r}")
            e = position_errors(pred, truth)
            r = rte_detail(pred, truth, rte_interval)
            report.rows.append(SequenceMetrics(seq.sequence_id, seq.mode, m, float(np.sqrt(np.mean(e * e))), r.value, r.truncated))
            errors.setdefault(m, []).append(e)
    report.cdf = {m: cdf_from_errors(np.concatenate(es)) for m, es in errors.items()}
    return report


# -- ablation sweep ----------------------------------------------------------------

@dataclass
class VariantResult:
    variant: int
    ablation: AblationConfig
    status: str
    ate: float = float("nan")
    rte: float = float("nan")
    best_val: float = float("nan")
    message: str = ""
    result: TrainResult | None = None


def run_variants(
    cfg: TrainConfig,
    train_seqs: Sequence[SequenceData],
    val_seqs: Sequence[SequenceData],
    test_seqs: Sequence[SequenceData],
    variants: Sequence[int] = (1, 2, 3, 4, 5, 6),
    out_dir: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> list[VariantResult]:
    """Train and test each ablation variant with the same seed, data and settings."""
    tr = stack_windows(flatten([s.windows for s in train_seqs]))
    va = stack_windows(flatten([s.windows for s in val_seqs]))
    rows = []
    for k in variants:
        vcfg = replace(cfg, ablation=AblationConfig.from_variant(k))
        ckpt = None
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            ckpt = Path(out_dir) / f"variant{k}.ckpt"
        try:
            res = train(vcfg, tr, va, checkpoint_path=ckpt, log=log)
        except DivergenceError as exc:
            rows.append(VariantResult(k, vcfg.ablation, "failed", message=str(exc)))
            continue
        rep = evaluate(res.params, vcfg, test_seqs)
        overall = rep.overall("model")
        rows.append(VariantResult(k, vcfg.ablation, "ok", overall["ate"], overall["rte"], res.report.best_val, result=res))
    return rows


def write_variant_table(path: str | Path, rows: Sequence[VariantResult]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "contrast_fe", "weighted_gf", "attentive_la", "status", "ate", "rte", "best_val_vel"])
        for r in rows:
            a = r.ablation
            w.writerow([r.variant, int(a.contrast_fe), int(a.weighted_gf), int(a.attentive_la), r.status,
                        repr(r.ate), repr(r.rte), repr(r.best_val)])
