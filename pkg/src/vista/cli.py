"""Command line entry points: simulate, pretrain, adapt, evaluate, bench.

Exit codes: 0 success, 2 usage/config/input errors, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import subprocess
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, backbone, engine, metrics, phantom
from .config import ConfigError, ModelConfig, VistaConfig, read_config_file
from .errors import CheckpointMismatch, DivergenceError, FormatError, NonFiniteLoss, ShapeError, SpecError
from .isig import dump_viewset, generate_views
from .volume import load_probabilities, save_probabilities

log = logging.getLogger("vista")

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, cwd=Path(__file__).parent, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, config: dict, seeds: dict, started: float, name: str = "run_manifest.json") -> Path:
    body = {
        "command": command,
        "argv": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "config": config,
        "seeds": seeds,
        "version": _version(),
        "wall_clock_seconds": round(time.time() - started, 3),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _coerce(default: Any, value: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, tuple):
        items = value if isinstance(value, list) else [value]
        if key.endswith("remap"):
            out = []
            for item in items:
                parts = str(item).split(":")
                if len(parts) != 3:
                    raise ConfigError(f"{key}: entries must look like seq:tissue:value, got {item!r}")
                out.append((int(parts[0]), int(parts[1]), float(parts[2])))
            return tuple(out)
        return tuple(items)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, int):
        return int(value)
    return value


def build_dataclass(cls, values: dict[str, Any], prefix: str, required: tuple[str, ...] = ()):
    """Instantiate ``cls`` from ``prefix``-keyed entries, coercing by the field defaults."""
    defaults = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in values:
            kwargs[f.name] = _coerce(getattr(defaults, f.name), values[key], key)
        elif key in required:
            raise ConfigError(f"missing config key {key!r}")
    return cls(**kwargs)


def _check_keys(values: dict[str, Any], allowed: set[str], path) -> None:
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")


def _keys(cls, prefix: str) -> set[str]:
    return {prefix + f.name for f in dataclasses.fields(cls)}


def _load_config(path: Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    if not Path(path).is_file():
        raise UsageError(f"config file {path} not found")
    return read_config_file(path)


# ---------------------------------------------------------------------------
# commands


SIMULATE_REQUIRED = ("cohort_size", "phantom_seed", "phantom_shape")


def cmd_simulate(args) -> int:
    started = time.time()
    if args.config is None:
        raise UsageError("--config is required")
    values = _load_config(args.config)
    for key in SIMULATE_REQUIRED:
        if key not in values:
            raise ConfigError(f"missing config key {key!r}")
    _check_keys(values, {"cohort_size", "prefix", "start_index"} | _keys(phantom.PhantomSpec, "phantom_") | _keys(phantom.ShiftSpec, "shift_"), args.config)
    spec = build_dataclass(phantom.PhantomSpec, values, "phantom_")
    shift = build_dataclass(phantom.ShiftSpec, values, "shift_")
    n = int(values["cohort_size"])
    prefix = str(values.get("prefix", "case"))
    cases = phantom.make_cohort(n, spec, phantom.ContrastTable.default(), shift, prefix=prefix, start=int(values.get("start_index", 0)))
    out = Path(args.out)
    phantom.save_cohort(cases, out, {"phantom": spec.to_dict(), "shift": shift.to_dict(), "case_seeds": [[spec.seed, i] for i in range(n)]})
    write_manifest(out, "simulate", args, values, {"phantom_seed": spec.seed, "shift_seed": shift.seed}, started)
    print(f"wrote {n} cases to {out}")
    return 0


def _load_cases(directory, with_labels=True):
    directory = Path(directory)
    if not (directory / "manifest.json").is_file():
        raise UsageError(f"no cohort manifest in {directory}")
    return phantom.load_cohort(directory, with_labels=with_labels)


def cmd_pretrain(args) -> int:
    started = time.time()
    values = _load_config(args.config)
    _check_keys(values, _keys(ModelConfig, "model_") | {"epochs", "lr", "batch_size", "train_seed"}, args.config)
    cases = _load_cases(args.cohort)
    epochs = int(args.epochs if args.epochs is not None else values.get("epochs", 30))
    lr = float(args.lr if args.lr is not None else values.get("lr", 3e-3))
    batch_size = int(values.get("batch_size", 2))
    train_seed = int(values.get("train_seed", 0))
    done = 0
    if args.resume:
        model, meta = backbone.load_checkpoint(args.resume)
        done = int(meta.get("epochs_done", 0))
    else:
        in_ch = cases[0].volume.num_sequences
        out_ch = cases[0].labels.data.shape[0]
        model_cfg = build_dataclass(ModelConfig, {"model_in_channels": in_ch, "model_out_channels": out_ch, **values}, "model_")
        model = backbone.build_model(model_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    curve_path = out.with_suffix(".curve.jsonl")
    mode = "a" if args.resume else "w"
    with open(curve_path, mode) as curve:
        def on_epoch(epoch, loss):
            curve.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")

        model, history = backbone.pretrain_source(
            model, [(c.volume, c.labels) for c in cases], epochs=epochs, lr=lr,
            batch_size=batch_size, seed=train_seed + done, start_epoch=done, on_epoch=on_epoch,
        )
    backbone.save_checkpoint(model, out, epochs_done=done + epochs, lr=lr)
    write_manifest(out.parent, "pretrain", args, {**values, "epochs": epochs, "lr": lr, "model": model.cfg.to_dict()},
                   {"model_seed": model.cfg.seed, "train_seed": train_seed}, started, name=out.stem + ".manifest.json")
    if history:
        print(f"epochs {done}..{done + epochs - 1}: loss {history[0]:.4f} -> {history[-1]:.4f}")
    return 0


def cmd_adapt(args) -> int:
    started = time.time()
    values = _load_config(args.config)
    _check_keys(values, _keys(VistaConfig, ""), args.config)
    cfg = build_dataclass(VistaConfig, values, "")
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg = engine.ablation_variant(cfg, args.variant)
    cases = _load_cases(args.cohort, with_labels=False)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    source, _ = backbone.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vols = [c.volume for c in cases]
    ids = [c.case_id for c in cases]

    if args.method == "none":
        preds = engine.run_no_tta(source, vols)
        results = [engine.CaseResult(cid, p) for cid, p in zip(ids, preds)]
    else:
        state = engine.init_state(source, cfg)
        if args.method == "tent":
            results = engine.run_tent_baseline(state, vols, ids)
        else:
            def dump(res):
                if args.dump_views:
                    anchor = res.prediction.data
                    rng = np.random.default_rng([cfg.seed, len(ids)])
                    views = generate_views(vols[ids.index(res.case_id)], anchor, cfg, rng)
                    dump_viewset(views, out / "views", stem=res.case_id)
            results = engine.run_stream(state, vols, ids, on_case=dump)
    for res in results:
        save_probabilities(res.prediction, out / f"{res.case_id}_prob.msvol")
    engine.write_step_log(results, out / "steps.jsonl")
    skipped = [r.case_id for r in results if r.skipped]
    (out / "cases.json").write_text(json.dumps({"cases": ids, "skipped": skipped}, indent=2) + "\n")
    write_manifest(out, "adapt", args, {**cfg.to_dict(), "method": args.method, "variant": args.variant},
                   {"adaptation_seed": cfg.seed}, started)
    print(f"{args.method}/{args.variant}: {len(results)} cases, {len(skipped)} skipped")
    return 0


def cmd_evaluate(args) -> int:
    started = time.time()
    cases = _load_cases(args.cohort)
    runs = []
    for pred_dir in args.predictions:
        pred_dir = Path(pred_dir)
        files = sorted(pred_dir.glob("*_prob.msvol")) if pred_dir.is_dir() else []
        if not files:
            raise UsageError(f"no predictions in {pred_dir}")
        run = []
        for case in cases:
            path = pred_dir / f"{case.case_id}_prob.msvol"
            if not path.is_file():
                raise UsageError(f"missing prediction for {case.case_id} in {pred_dir}")
            prob = load_probabilities(path)
            if prob.data.shape != case.labels.data.shape:
                raise ShapeError(f"{path}: prediction shape {prob.data.shape} != label shape {case.labels.data.shape}")
            run.append(metrics.case_metrics(metrics.binarize(prob), case.labels, case.volume.spacing))
        runs.append(run)
    report = metrics.macro_report(runs if len(runs) > 1 else runs[0])
    table = report.table(args.name)
    print(table)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table + "\n")
        write_manifest(out.parent, "evaluate", args, {}, {}, started, name=out.stem + ".manifest.json")
    return 0


def cmd_bench(args) -> int:
    from .benchmark import BenchmarkSetup, run_benchmark

    setup = BenchmarkSetup()
    seeds = list(range(args.seeds))
    report = run_benchmark(setup, seeds=seeds, variants=args.variants, log=print)
    print(report.summary())
    if args.out:
        Path(args.out).write_text(report.summary() + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vista", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a phantom cohort")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain", help="supervised source training")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--config", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", type=Path, help="continue training from this checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="run test-time adaptation over a cohort stream")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--method", choices=("vista", "tent", "none"), default="vista")
    p.add_argument("--variant", choices=engine.VARIANTS, default="full")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-views", action="store_true", help="write one view set per case for inspection")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="Dice / sensitivity / HD95 table")
    p.add_argument("--predictions", type=Path, nargs="+", required=True, help="one directory per run")
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--name", default="method")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="desk-scale phantom benchmark")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--variants", nargs="+", default=["full", "no_gate", "pl_only"])
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, CheckpointMismatch, ConfigError, SpecError, ShapeError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteLoss) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
