"""Seeded training loop, dataset splitting, configuration files and checkpoints.

Configuration is a JSON document with the sections ``train``, ``data``,
``model``, ``loss`` and ``ablation`` plus a top-level ``seed``; every key is
optional (defaults below) and unknown keys are rejected.  See
``docs/formats.md`` for the full key list.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .dataio import DeviceWindow, stack_windows
from .diffnet.optim import Adam
from .diffnet.params import ParameterSet, canonical_json
from .model import AblationConfig, LossWeights, ModelConfig, forward, init_model, total_loss


class ConfigError(ValueError):
    """Invalid, unknown or ill-typed configuration key."""


class DivergenceError(RuntimeError):
    def __init__(self, component: str, value: float, epoch: int, step: int):
        super().__init__(
            f"non-finite loss component {component!r} ({value}) at epoch {epoch}, step {step}"
        )
        self.component = component
        self.value = value
        self.epoch = epoch
        self.step = step


# -- configuration -----------------------------------------------------------------

@dataclass
class TrainSection:
    lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    max_steps: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    eval_batch: int = 256


@dataclass
class DataSection:
    path: str | None = None
    rate_hz: float = 25.0
    window: int = 100
    stride: int = 10
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)


@dataclass
class TrainConfig:
    seed: int = 0
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> None:
        t, d = self.train, self.data
        if t.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if t.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if t.max_steps is not None and t.max_steps < 1:
            raise ConfigError("train.max_steps must be >= 1 or null")
        if not (t.lr > 0 and math.isfinite(t.lr)):
            raise ConfigError("train.lr must be positive")
        if len(d.split) != 3 or min(d.split) < 0 or abs(sum(d.split) - 1.0) > 1e-9:
            raise ConfigError(f"data.split must be three ratios summing to 1, got {d.split}")
        if d.window != self.model.window:
            raise ConfigError("data.window and model.window differ")
        try:
            self.loss.validate()
            self.model.feature_length()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "train": asdict(self.train),
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "loss": asdict(self.loss),
            "ablation": asdict(self.ablation),
        }
        out["train"]["betas"] = list(self.train.betas)
        out["data"]["split"] = list(self.data.split)
        out["model"].pop("window")  # single source of truth: data.window
        return out

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]

    @property
    def variant_tag(self) -> str:
        return f"({self.ablation.variant}) {self.ablation.tag}"


_SECTIONS = {
    "train": TrainSection,
    "data": DataSection,
    "model": ModelConfig,
    "loss": LossWeights,
    "ablation": AblationConfig,
}


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false, got {value!r}")
        return value
    if isinstance(default, int) and default is not None and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)
    return value


def config_from_dict(doc: dict) -> TrainConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - {"seed", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    kwargs = {}
    if "seed" in doc:
        kwargs["seed"] = _coerce("", "seed", doc["seed"], 0)
    for name, cls in _SECTIONS.items():
        sec = doc.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"section {name!r} must be an object")
        defaults = cls()
        allowed = {f.name for f in fields(cls)} - ({"window"} if name == "model" else set())
        bad = set(sec) - allowed
        if bad:
            raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(bad)}")
        values = {k: _coerce(name, k, v, getattr(defaults, k)) for k, v in sec.items()}
        try:
            kwargs[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {name!r}: {exc}") from exc
    cfg = TrainConfig(**kwargs)
    cfg.model.window = cfg.data.window
    cfg.validate()
    return cfg


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.strip().split(".")
        if len(parts) == 1:
            doc[parts[0]] = value
        elif len(parts) == 2:
            doc.setdefault(parts[0], {})
            if not isinstance(doc[parts[0]], dict):
                raise ConfigError(f"override {key!r}: {parts[0]!r} is not a section")
            doc[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"override key {key!r} nests too deeply")
    return doc


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> TrainConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(apply_overrides(doc, overrides))


# -- dataset split -----------------------------------------------------------------

def split_dataset(
    groups: Sequence[Sequence[DeviceWindow]],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> tuple[list[list[DeviceWindow]], list[list[DeviceWindow]], list[list[DeviceWindow]]]:
    """Split whole sequences (one group of windows each) into train/val/test.

    Sequences are shuffled within each walking mode and interleaved across
    modes before dealing validation, test and then training sequences, so
    every split sees every mode whenever the counts allow it.
    """
    n = len(groups)
    if n < 3:
        raise ValueError(f"need at least 3 sequences to split, got {n}")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_val = max(1, int(round(ratios[1] * n)))
    n_test = max(1, int(round(ratios[2] * n)))
    if n - n_val - n_test < 1:
        raise ValueError("too few sequences for a non-empty training split")
    rng = np.random.default_rng([seed, 11])
    by_mode: dict[str, list[int]] = {}
    for i, g in enumerate(groups):
        mode = g[0].mode if g else ""
        by_mode.setdefault(mode, []).append(i)
    queues = []
    for mode in sorted(by_mode):
        idx = by_mode[mode]
        queues.append([idx[k] for k in rng.permutation(len(idx))])
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(q.pop(0))
    val = [groups[i] for i in order[:n_val]]
    test = [groups[i] for i in order[n_val : n_val + n_test]]
    train = [groups[i] for i in order[n_val + n_test :]]
    return [list(g) for g in train], [list(g) for g in val], [list(g) for g in test]


def flatten(groups: Sequence[Sequence[DeviceWindow]]) -> list[DeviceWindow]:
    return [w for g in groups for w in g]


# -- training ----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train: dict[str, float]
    val: dict[str, float]


@dataclass
class TrainReport:
    config_digest: str
    variant: str
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    selection_metric: str = "vel"
    checkpoint_path: str | None = None
    wall_clock_s: float = 0.0  # kept out of the JSONL file so reports stay reproducible

    def records(self) -> list[dict]:
        out = [{"type": "epoch", **asdict(e)} for e in self.epochs]
        out.append({
            "type": "summary",
            "config_digest": self.config_digest,
            "variant": self.variant,
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "selection_metric": self.selection_metric,
            # file name only, so runs written to different directories match
            "checkpoint": Path(self.checkpoint_path).name if self.checkpoint_path else None,
        })
        return out

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for r in self.records():
                f.write(json.dumps(r, sort_keys=True, allow_nan=False) + "\n")


@dataclass
class TrainResult:
    report: TrainReport
    params: ParameterSet  # best-by-validation parameters
    final_params: ParameterSet


def _check_finite(components: dict[str, float], epoch: int, step: int) -> None:
    for name, value in components.items():
        if not math.isfinite(value):
            raise DivergenceError(name, value, epoch, step)


def evaluate_loss(
    params: ParameterSet, cfg: TrainConfig, x: np.ndarray, y: np.ndarray
) -> dict[str, float]:
    """Inference-mode loss components averaged over ``x`` (weighted by batch size)."""
    sums: dict[str, float] = {}
    for i in range(0, len(x), cfg.train.eval_batch):
        xb, yb = x[i : i + cfg.train.eval_batch], y[i : i + cfg.train.eval_batch]
        state, bundle = forward(xb, params, cfg.model, cfg.ablation, cfg.loss, training=False)
        _, comps = total_loss(state, bundle, yb, cfg.loss, cfg.ablation)
        for k, v in comps.items():
            sums[k] = sums.get(k, 0.0) + v * len(xb)
    return {k: v / len(x) for k, v in sums.items()}


def train(
    cfg: TrainConfig,
    train_windows: Sequence[DeviceWindow] | tuple[np.ndarray, np.ndarray],
    val_windows: Sequence[DeviceWindow] | tuple[np.ndarray, np.ndarray],
    checkpoint_path: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam training with per-epoch reshuffling; keeps the best validation epoch.

    Every random draw (initialization, batch order, dropout masks) comes
    from generators derived from ``cfg.seed``, so identical inputs give
    bit-identical parameters and reports.
    """
    cfg.validate()
    start = time.perf_counter()
    x_tr, y_tr = train_windows if isinstance(train_windows, tuple) else stack_windows(train_windows)
    x_va, y_va = val_windows if isinstance(val_windows, tuple) else stack_windows(val_windows)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation sets must be non-empty")
    params = init_model(cfg.model, cfg.ablation, cfg.seed)
    opt = Adam(params, lr=cfg.train.lr, betas=tuple(cfg.train.betas), eps=cfg.train.eps)
    report = TrainReport(cfg.digest(), cfg.variant_tag)
    best = params.copy()
    step = 0
    bs = cfg.train.batch_size
    for epoch in range(cfg.train.epochs):
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(x_tr))
        drop_rng = np.random.default_rng([cfg.seed, 2, epoch])
        sums: dict[str, float] = {}
        seen = 0
        for b0 in range(0, len(order), bs):
            if cfg.train.max_steps is not None and step >= cfg.train.max_steps:
                break
            idx = order[b0 : b0 + bs]
            state, bundle = forward(x_tr[idx], params, cfg.model, cfg.ablation, cfg.loss, True, drop_rng)
            loss, comps = total_loss(state, bundle, y_tr[idx], cfg.loss, cfg.ablation)
            _check_finite(comps, epoch, step)
            params.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            seen += len(idx)
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        if seen == 0:
            break
        val = evaluate_loss(params, cfg, x_va, y_va)
        _check_finite({f"val.{k}": v for k, v in val.items()}, epoch, step)
        rec = EpochRecord(epoch, step, {k: v / seen for k, v in sums.items()}, val)
        report.epochs.append(rec)
        if val[report.selection_metric] < report.best_val:
            report.best_val = val[report.selection_metric]
            report.best_epoch = epoch
            best = params.copy()
        if log:
            log(f"epoch {epoch} step {step} train {rec.train['total']:.5f} val_vel {val['vel']:.5f}")
        if cfg.train.max_steps is not None and step >= cfg.train.max_steps:
            break
    if checkpoint_path is not None:
        save_checkpoint(best, cfg, checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    report.wall_clock_s = time.perf_counter() - start
    return TrainResult(report, best, params)


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(params: ParameterSet, cfg: TrainConfig, path: str | Path) -> None:
    """Write parameters plus the resolved config; contains no timestamps, so files are reproducible."""
    meta = {
        "created_by": f"bodynet {__version__}",
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
    }
    Path(path).write_bytes(params.to_bytes(meta))


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, TrainConfig]:
    params, meta = ParameterSet.from_bytes(Path(path).read_bytes())
    cfg = config_from_dict(meta.get("config", {}))
    return params, cfg


def check_compatible(params: ParameterSet, cfg: TrainConfig) -> None:
    """Raise ``ValueError`` when ``params`` do not fit the network ``cfg`` describes."""
    expected = init_model(cfg.model, cfg.ablation, 0).signature()
    if params.signature() != expected:
        names = {n for n, _ in expected} ^ {n for n, _ in params.signature()}
        detail = f"differing names {sorted(names)[:5]}" if names else "shape mismatch"
        raise ValueError(f"checkpoint does not match the configured network ({detail})")
