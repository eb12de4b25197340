"""Command-line entry point: ``bodynet {simulate,ingest,train,eval,trace,gradcheck,ablate}``.

Exit codes: 0 success, 1 unwritable output, 2 usage/config/missing data,
3 training divergence, 4 checkpoint mismatch or corruption, 5 gradient check
failure.  Every subcommand prints the digest of its resolved configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataio import DataFormatError, SyncError, load_sequence, prepare_windows, stack_windows
from .diffnet.params import CheckpointError
from .evaluator import sequence_trajectories
from .experiment import (
    SequenceData,
    evaluate,
    load_dataset,
    run_variants,
    simulate_dataset,
    split_sequences,
    write_variant_table,
)
from .gradsuite import run_suite
from .model import predict
from .synthgen import PRESET_MODES, generate, preset
from .trainer import (
    ConfigError,
    DivergenceError,
    TrainConfig,
    check_compatible,
    flatten,
    load_checkpoint,
    load_config,
    train,
)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4
EXIT_GRADCHECK = 5

CONFIG_DIR_ENV = "BODYNET_CONFIG_DIR"
DEFAULT_CONFIG_NAME = "default.json"

log = logging.getLogger("bodynet")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- configuration -----------------------------------------------------------------

def resolve_config_path(name: str | None) -> Path | None:
    """Explicit path, else a file inside ``$BODYNET_CONFIG_DIR``, else that directory's default."""
    cfg_dir = os.environ.get(CONFIG_DIR_ENV)
    if name is None:
        if cfg_dir and (Path(cfg_dir) / DEFAULT_CONFIG_NAME).is_file():
            return Path(cfg_dir) / DEFAULT_CONFIG_NAME
        return None
    path = Path(name)
    if path.is_file() or not cfg_dir:
        return path
    candidate = Path(cfg_dir) / name
    return candidate if candidate.is_file() else path


def resolve_config(args: argparse.Namespace, extra: Sequence[str] = ()) -> TrainConfig:
    overrides = list(extra) + list(getattr(args, "override", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "data", None) is not None:
        overrides.append(f"data.path={json.dumps(str(args.data))}")
    cfg = load_config(resolve_config_path(getattr(args, "config", None)), overrides)
    cfg.validate()
    return cfg


def announce(cfg: TrainConfig) -> None:
    print(f"config digest: {cfg.digest()}")


def _ensure_dir(path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}", EXIT_IO) from exc
    return path


def _dataset(cfg: TrainConfig) -> list[SequenceData]:
    if cfg.data.path is None:
        raise CliError("no data path given (use --data or data.path in the config)", EXIT_USAGE)
    data = load_dataset(cfg.data.path, cfg)
    if not data:
        raise CliError(f"no usable windows in {cfg.data.path}", EXIT_USAGE)
    return data


def _load_model(path: str | Path, args: argparse.Namespace):
    """Checkpoint parameters and config; a given config/overrides must describe the same network."""
    if not Path(path).is_file():
        raise CliError(f"checkpoint {path} does not exist", EXIT_USAGE)
    try:
        params, cfg = load_checkpoint(path)
    except (CheckpointError, ConfigError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_MISMATCH) from exc
    if getattr(args, "config", None) is not None or getattr(args, "override", None):
        cfg = resolve_config(args)
    elif getattr(args, "data", None) is not None:
        cfg.data.path = str(args.data)
    try:
        check_compatible(params, cfg)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from exc
    return params, cfg


# -- subcommands -------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    announce(cfg)
    out = _ensure_dir(args.out)
    try:
        if args.count is not None:
            modes = PRESET_MODES if args.mode == "MIXED" else (args.mode,)
            paths = simulate_dataset(out, args.count, args.duration, cfg.seed, modes, args.sync_jumps)
        else:
            mode = PRESET_MODES[0] if args.mode == "MIXED" else args.mode
            script = preset(mode, args.duration, cfg.seed, sync_jumps=args.sync_jumps)
            paths = [generate(script, cfg.seed).write(out)]
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}", EXIT_IO) from exc
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    announce(cfg)
    data = _dataset(cfg)
    x, y = stack_windows(flatten([d.windows for d in data]))
    ids = np.array([w.sequence_id for d in data for w in d.windows])
    t0 = np.array([w.t_start for d in data for w in d.windows])
    for d in data:
        print(f"{d.sequence_id}\t{d.mode}\t{len(d.windows)} windows")
    if args.out is not None:
        _ensure_dir(Path(args.out).parent)
        try:
            with open(args.out, "wb") as f:
                np.savez(f, x=x, y=y, sequence_id=ids, t_start=t0, config_digest=np.array(cfg.digest()))
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    print(f"total {len(x)} windows from {len(data)} sequences")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    announce(cfg)
    print(f"variant: {cfg.variant_tag}")
    out = _ensure_dir(args.out)
    data = _dataset(cfg)
    tr, va, te = split_sequences(data, cfg)
    split = {name: [s.sequence_id for s in part] for name, part in zip(("train", "val", "test"), (tr, va, te))}
    (out / "split.json").write_text(json.dumps(split, indent=2) + "\n")
    try:
        res = train(
            cfg,
            flatten([s.windows for s in tr]),
            flatten([s.windows for s in va]),
            checkpoint_path=out / "checkpoint.bin",
            log=log.info,
        )
    except DivergenceError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from exc
    res.report.write_jsonl(out / "report.jsonl")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"best epoch {res.report.best_epoch} val vel {res.report.best_val:.6g}")
    print(f"wall clock {res.report.wall_clock_s:.1f} s")
    print(out / "checkpoint.bin")
    return EXIT_OK


def _select(data: list[SequenceData], cfg: TrainConfig, split: str) -> list[SequenceData]:
    if split == "all":
        return data
    parts = dict(zip(("train", "val", "test"), split_sequences(data, cfg)))
    return parts[split]


def cmd_eval(args: argparse.Namespace) -> int:
    params, cfg = _load_model(args.checkpoint, args)
    announce(cfg)
    seqs = _select(_dataset(cfg), cfg, args.split)
    report = evaluate(params, cfg, seqs, baselines=args.baseline or (), rte_interval=args.rte_interval)
    out = _ensure_dir(args.out)
    report.write_json(out / "metrics.json")
    report.write_csv(out / "metrics.csv")
    if args.cdf is not None:
        report.write_cdf_csv(args.cdf, "model")
    for s in report.summary():
        print(f"{s['method']:>6} {s['mode']:>8} n={s['n']:<3} ATE {s['ate']:.3f} m  RTE {s['rte']:.3f} m")
    return EXIT_OK


def cmd_trace(args: argparse.Namespace) -> int:
    params, cfg = _load_model(args.checkpoint, args)
    announce(cfg)
    try:
        seq = load_sequence(args.sequence)
    except OSError as exc:
        raise CliError(f"cannot read sequence {args.sequence}: {exc}", EXIT_USAGE) from exc
    windows = sorted(prepare_windows(seq, cfg.data.rate_hz, cfg.data.window, cfg.data.stride), key=lambda w: w.t_start)
    if not windows:
        raise CliError(f"sequence {args.sequence} yields no windows", EXIT_USAGE)
    x, _ = stack_windows(windows)
    v = predict(x, params, cfg.model, cfg.ablation, cfg.loss)
    pred, truth = sequence_trajectories(windows, v, seq.truth)
    _ensure_dir(Path(args.out).parent)
    try:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["t", "pred_x", "pred_y", "true_x", "true_y"])
            for t, p, g in zip(pred.t, pred.positions, truth.positions):
                w.writerow([repr(float(t)), repr(float(p[0])), repr(float(p[1])), repr(float(g[0])), repr(float(g[1]))])
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    print(args.out)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    announce(cfg)
    rows = run_suite(seed=cfg.seed, corrupt=args.corrupt, per_tensor=args.per_tensor)
    print(f"{'component':<24} {'max rel error':>14} {'threshold':>10} {'seconds':>8}  status")
    for r in rows:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.component:<24} {r.max_rel_error:>14.3e} {r.threshold:>10.0e} {r.seconds:>8.2f}  {status}")
    failed = [r.component for r in rows if not r.passed]
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    announce(cfg)
    out = _ensure_dir(args.out)
    tr, va, te = split_sequences(_dataset(cfg), cfg)
    rows = run_variants(cfg, tr, va, te, args.variants, out_dir=out, log=log.info)
    write_variant_table(out / "ablation.csv", rows)
    for r in rows:
        if r.status != "ok":
            print(f"warning: variant {r.variant} failed: {r.message}", file=sys.stderr)
        print(f"({r.variant}) {r.ablation.tag:<28} {r.status:<6} ATE {r.ate:.3f} m  RTE {r.rte:.3f} m")
    print(out / "ablation.csv")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help=f"JSON config (bare names are also looked up in ${CONFIG_DIR_ENV})")
    p.add_argument("--override", action="append", metavar="KEY=VALUE", help="e.g. train.lr=1e-3 (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --override seed=N")
    if data:
        p.add_argument("--data", help="dataset directory or manifest (sets data.path)")


def _variant_list(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated variant numbers, got {text!r}") from None
    if any(v not in range(1, 7) for v in out):
        raise argparse.ArgumentTypeError("variants are numbered 1 to 6")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bodynet", description="Multi-device inertial localization pipeline.")
    parser.add_argument("--version", action="version", version=f"bodynet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write synthetic sequences")
    _add_config_flags(p, data=False)
    p.add_argument("--mode", default="STW", choices=[*PRESET_MODES, "MIXED"])
    p.add_argument("--duration", type=float, default=60.0, help="seconds")
    p.add_argument("--count", type=int, help="write a dataset of COUNT sequences in subdirectories")
    p.add_argument("--sync-jumps", action="store_true", help="add clock offsets and alignment jumps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="validate and window a dataset")
    _add_config_flags(p)
    p.add_argument("--out", help="write windows and labels to this .npz file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model on the training split")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="directory for checkpoint.bin and report.jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ATE/RTE of a checkpoint and baselines")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="directory for metrics.json and metrics.csv")
    p.add_argument("--baseline", action="append", choices=["zero", "pdr"])
    p.add_argument("--cdf", help="write the model's error CDF to this CSV file")
    p.add_argument("--rte-interval", type=float, default=60.0, help="seconds")
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="predicted and true trajectory of one sequence as CSV")
    _add_config_flags(p, data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="manifest.json of the sequence")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_config_flags(p, data=False)
    p.add_argument("--per-tensor", type=int, default=5, help="entries sampled per parameter tensor in the objective checks")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook: component whose gradient is corrupted
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and test the six ablation variants")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", type=_variant_list, default=[1, 2, 3, 4, 5, 6], help="e.g. 1,6")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataFormatError, SyncError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
