"""Command-line interface: generate | train | evaluate | predict | audit.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.

Options can also come from a ``--config`` file of ``key = value`` lines
(``#`` starts a comment). Precedence: command-line flag, then config file,
then built-in default. The fully resolved configuration is written next to
the outputs as ``manifest.json``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    CADENCE,
    SyntheticProfile,
    build_datasets,
    default_boundary,
    format_timestamp,
    generate_synthetic,
    impute,
    load_csv,
    parse_timestamp,
    save_csv,
)
from .errors import CapsTrafficError
from .evaluation import dump_comparison, evaluate_model, persistence_baseline, persistence_predictions
from .models import ModelSpec, TrainConfig, audit_parameters, build_model, predict, train
from .tasks import TaskSpec, parse_task

logger = logging.getLogger("capstraffic")

THREADS_ENV = "CAPSTRAFFIC_THREADS"


class UsageError(Exception):
    pass


def _channels(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(c) for c in text)
    return tuple(int(c) for c in str(text).split(",") if c.strip())


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# Per-command defaults and converters for config-file values.
DEFAULTS = {
    "generate": {
        "sensors": 20, "days": 60, "seed": 0, "missing_rate": 0.0, "noise": 4.0,
        "start": "2016-01-01T00:00:00", "output": "data.csv",
    },
    "train": {
        "data": None, "model": "capsnet", "task": "task1", "lr0": 5e-4, "decay": 0.9999,
        "epochs": 50, "batch": 32, "seed": 0, "split": None, "output": "run",
        "conv_channels": None, "primary_channels": 128, "capsule_dim": 8, "traffic_dim": 16,
        "routing_iterations": 3, "max_missing_day": 0.5,
    },
    "evaluate": {
        "checkpoint": None, "data": None, "split": None, "output": "eval",
        "baseline_only": False, "task": None, "max_missing_day": 0.5,
    },
    "predict": {"checkpoint": None, "data": None, "end": None, "output": None},
    "audit": {"json": False},
}
CONVERTERS = {
    "sensors": int, "days": int, "seed": int, "missing_rate": float, "noise": float,
    "lr0": float, "decay": float, "epochs": int, "batch": int, "primary_channels": int,
    "capsule_dim": int, "traffic_dim": int, "routing_iterations": int,
    "max_missing_day": float, "conv_channels": _channels, "baseline_only": _flag, "json": _flag,
}


def read_config(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve(command: str, args: argparse.Namespace) -> dict:
    resolved = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            file_values = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        unknown = sorted(set(file_values) - set(resolved))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in file_values.items():
            try:
                resolved[key] = CONVERTERS.get(key, str)(value)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from None
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _require_positive(cfg: dict, *keys):
    for key in keys:
        if cfg[key] is None or cfg[key] <= 0:
            raise UsageError(f"--{key.replace('_', '-')} must be positive, got {cfg[key]}")


def _write_manifest(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict) -> int:
    _require_positive(cfg, "sensors", "days")
    if not 0 <= cfg["missing_rate"] < 1:
        raise UsageError("--missing-rate must lie in [0, 1)")
    if cfg["noise"] < 0:
        raise UsageError("--noise must be non-negative")
    try:
        parse_timestamp(cfg["start"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    profile = SyntheticProfile(start=cfg["start"], noise=cfg["noise"], missing_rate=cfg["missing_rate"])
    matrix = generate_synthetic(cfg["sensors"], cfg["days"], cfg["seed"], profile)
    out = Path(cfg["output"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(matrix, out)
    _write_manifest(out.with_name(out.stem + ".manifest.json"), {"command": "generate", **cfg})
    rows, cols = matrix.shape
    print(f"wrote {rows} rows x {cols} sensors to {out}")
    return 0


MODEL_CHOICES = ("cnn", "capsnet", "capsnet-reduced")


def _model_spec(cfg: dict) -> ModelSpec:
    if cfg["model"] not in MODEL_CHOICES:
        raise UsageError(f"--model must be one of {', '.join(MODEL_CHOICES)}, not {cfg['model']!r}")
    if cfg["model"] == "capsnet-reduced":
        base = ModelSpec.capsnet_reduced()
        return ModelSpec.capsnet(
            conv_channels=cfg["conv_channels"] or base.conv_channels,
            primary_channels=base.primary_channels,
            capsule_dim=cfg["capsule_dim"],
            traffic_dim=cfg["traffic_dim"],
            routing_iterations=cfg["routing_iterations"],
            seed=cfg["seed"],
        )
    if cfg["model"] == "cnn":
        return ModelSpec.cnn(cfg["conv_channels"] or (256, 128, 64), seed=cfg["seed"])
    return ModelSpec.capsnet(
        conv_channels=cfg["conv_channels"] or (32, 32),
        primary_channels=cfg["primary_channels"],
        capsule_dim=cfg["capsule_dim"],
        traffic_dim=cfg["traffic_dim"],
        routing_iterations=cfg["routing_iterations"],
        seed=cfg["seed"],
    )


def _task(text) -> TaskSpec:
    try:
        return parse_task(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(cfg: dict) -> int:
    if not cfg["data"]:
        raise UsageError("--data is required")
    _require_positive(cfg, "lr0", "decay", "batch", "primary_channels", "capsule_dim",
                      "traffic_dim", "routing_iterations")
    if cfg["epochs"] < 0:
        raise UsageError("--epochs must be >= 0")
    if cfg["decay"] > 1:
        raise UsageError("--decay must lie in (0, 1]")
    task = _task(cfg["task"])
    try:
        spec = _model_spec(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    matrix = load_csv(cfg["data"]).select_sensors(task.N)
    boundary = parse_timestamp(cfg["split"]) if cfg["split"] else default_boundary(matrix)
    train_set, eval_set = build_datasets(matrix, task, boundary, cfg["max_missing_day"])
    model = build_model(spec, task)
    print(f"optimizer: adam lr0={cfg['lr0']!r} decay={cfg['decay']!r} batch={cfg['batch']} epochs={cfg['epochs']}")
    logger.info("training %s on %s: %d parameters, %d train / %d eval windows",
                spec.kind, task.name, model.count_parameters(), len(train_set), len(eval_set))
    meta = {"split": format_timestamp(boundary), "sensor_ids": matrix.sensor_ids}
    config = TrainConfig(cfg["lr0"], cfg["decay"], cfg["epochs"], cfg["batch"], cfg["seed"])
    result = train(model, train_set, config, meta=meta)

    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "checkpoint.bin")
    with (out / "loss.csv").open("w") as fh:
        fh.write("epoch,train_mse\n")
        for epoch, loss in enumerate(result.epoch_losses, start=1):
            fh.write(f"{epoch},{loss!r}\n")
    _write_manifest(out / "manifest.json", {
        "command": "train",
        **cfg,
        "task_spec": task.to_dict(),
        "model_spec": spec.to_dict(),
        "parameters": model.count_parameters(),
        "split": meta["split"],
        "train_windows": len(train_set),
        "eval_windows": len(eval_set),
        "scaling": train_set.stats.to_dict(),
        "steps": result.checkpoint.step,
    })
    final = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(f"trained {spec.kind} on {task.name}: {result.checkpoint.step} steps, "
          f"final train mse {final:.6g}; wrote {out / 'checkpoint.bin'}")
    return 0


def _report_line(label: str, report) -> str:
    return (f"{label:<12} MRE {100 * report.mre:8.3f} %  MAE {report.mae:8.4f} km/h  "
            f"RMSE {report.rmse:8.4f} km/h  I={report.sample_count}  "
            f"excluded_zero_targets={report.excluded_zero_targets}")


def cmd_evaluate(cfg: dict) -> int:
    if not cfg["data"]:
        raise UsageError("--data is required")
    out = Path(cfg["output"])
    if cfg["baseline_only"]:
        if not cfg["task"]:
            raise UsageError("--baseline-only needs --task")
        task = _task(cfg["task"])
        ckpt = None
        stats = None
        split = cfg["split"]
    else:
        if not cfg["checkpoint"]:
            raise UsageError("--checkpoint is required unless --baseline-only is given")
        ckpt = load_checkpoint(cfg["checkpoint"])
        task = ckpt.task
        if cfg["task"] and not _task(cfg["task"]).same_geometry(task):
            raise CapsTrafficError(f"checkpoint task {task} does not match --task {cfg['task']}")
        stats = ckpt.stats
        split = cfg["split"] or ckpt.meta.get("split")

    matrix = load_csv(cfg["data"]).select_sensors(task.N)
    boundary = parse_timestamp(split) if split else default_boundary(matrix)
    _, eval_set = build_datasets(matrix, task, boundary, cfg["max_missing_day"], stats=stats)
    baseline = persistence_baseline(eval_set)
    results = {"task": task.to_dict(), "split": format_timestamp(boundary), "persistence": baseline.to_dict()}
    lines = [_report_line("persistence", baseline)]
    if ckpt is None:
        pred, truth = persistence_predictions(eval_set)
    else:
        report, pred, truth = evaluate_model(ckpt.to_model(), eval_set)
        results["model"] = {"kind": ckpt.model_spec.kind, **report.to_dict()}
        lines.insert(0, _report_line(ckpt.model_spec.kind, report))
    for line in lines:
        print(line)

    out.mkdir(parents=True, exist_ok=True)
    # first horizon step of every evaluation window: one row per time step
    paths = dump_comparison(truth[:, : task.N], pred[:, : task.N], out / "eval")
    results["dumps"] = {k: str(v) for k, v in paths.items()}
    (out / "metrics.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    _write_manifest(out / "manifest.json", {"command": "evaluate", **cfg, "split": results["split"]})
    return 0


def cmd_predict(cfg: dict) -> int:
    if not cfg["checkpoint"] or not cfg["data"]:
        raise UsageError("--checkpoint and --data are required")
    ckpt = load_checkpoint(cfg["checkpoint"])
    task = ckpt.task
    matrix = load_csv(cfg["data"]).select_sensors(task.N)
    if cfg["end"]:
        end = parse_timestamp(cfg["end"])
        hits = np.flatnonzero(matrix.timestamps == end)
        if not hits.size:
            raise CapsTrafficError(f"timestamp {cfg['end']} is not in the data")
        stop = int(hits[0]) + 1
    else:
        stop = len(matrix.timestamps)
    if stop < task.M:
        raise CapsTrafficError(f"need {task.M} rows up to the window end, found {stop}")
    # gaps are filled from history up to the window end only
    window = impute(matrix.rows(slice(stop - task.M, stop)), matrix.rows(slice(0, stop)))
    speeds = predict(ckpt, window.values).reshape(task.L, task.N)
    last = window.timestamps[-1]
    rows = ["horizon_step,timestamp,sensor,speed_kmh"]
    for step in range(task.L):
        ts = format_timestamp(last + (step + 1) * CADENCE)
        for sensor, speed in zip(window.sensor_ids, speeds[step]):
            rows.append(f"{step + 1},{ts},{sensor},{speed:.4f}")
    text = "\n".join(rows) + "\n"
    if cfg["output"]:
        Path(cfg["output"]).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_audit(cfg: dict) -> int:
    rows = audit_parameters()
    ok = True
    if cfg["json"]:
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'model':<8} {'task':<6} {'count':>13} {'expected':>13} {'reported':>10} {'diff':>8}")
    for row in rows:
        exact = row["count"] == row["expected"]
        close = row["relative_diff"] is None or row["relative_diff"] <= 0.01
        ok = ok and exact and close
        if not cfg["json"]:
            reported = "-" if row["reported"] is None else f"{row['reported'] / 1e6:#.3g}".rstrip(".") + "e6"
            diff = "-" if row["relative_diff"] is None else f"{100 * row['relative_diff']:.3f}%"
            flag = "" if exact and close else "  MISMATCH"
            print(f"{row['model']:<8} {row['task']:<6} {row['count']:>13,} {row['expected']:>13,} "
                  f"{reported:>10} {diff:>8}{flag}")
    return 0 if ok else 1


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "audit": cmd_audit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capstraffic", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        return p

    p = command("generate", "write a synthetic speed CSV")
    p.add_argument("--sensors", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--missing-rate", type=float)
    p.add_argument("--noise", type=float, help="noise amplitude in km/h")
    p.add_argument("--start", help="first timestamp (ISO-8601)")
    p.add_argument("-o", "--output")

    p = command("train", "train a CNN or CapsNet forecaster")
    p.add_argument("--data")
    p.add_argument("--model", choices=MODEL_CHOICES,
                   help="capsnet-reduced = conv 16,16 and 32 primary channels")
    p.add_argument("--task", help="task1..task4 or L,M,N")
    p.add_argument("--lr0", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", help="first evaluation timestamp; default: midnight near 75%% of the data")
    p.add_argument("--conv-channels", type=_channels, help="comma-separated, e.g. 32,32")
    p.add_argument("--primary-channels", type=int)
    p.add_argument("--capsule-dim", type=int)
    p.add_argument("--traffic-dim", type=int)
    p.add_argument("--routing-iterations", type=int)
    p.add_argument("--max-missing-day", type=float)
    p.add_argument("-o", "--output")

    p = command("evaluate", "score a checkpoint and the persistence baseline")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--task")
    p.add_argument("--baseline-only", action="store_true", default=None)
    p.add_argument("--max-missing-day", type=float)
    p.add_argument("-o", "--output")

    p = command("predict", "forecast from the window ending at --end")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--end", help="timestamp of the last input row (default: last row)")
    p.add_argument("-o", "--output")

    p = command("audit", "trainable-parameter counts for all tasks")
    p.add_argument("--json", action="store_true", default=None)
    return parser


@contextlib.contextmanager
def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=max(1, int(value))):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        with _thread_limit():
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"capstraffic {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (CapsTrafficError, OSError, ValueError) as exc:
        print(f"capstraffic {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
