"""Command-line entry point.

Subcommands: synth, split, train, eval, grid, weights, emd, report. Every
run writes a run_manifest.json (command line, config hash, seeds, package
versions, wall-clock timings) into the output directory. Relative paths in
config files resolve against --out. PPGBENCH_SEED serves as the seed when
neither a flag nor a config value provides one. Exit codes: 0 success,
1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .adaptation import (
    HistogramBinning,
    LabelHistogram,
    WeightTable,
    build_histogram,
    compute_weights,
    emd,
    save_json,
)
from .bench import (
    GridReport,
    TestSetRef,
    TrainSetRef,
    diff_grids,
    grid_emd_scatter,
    render_report,
    run_grid,
)
from .data import SynthConfig, generate_synthetic, load_bundle, write_bundle
from .errors import PpgBenchError, TrainingError, ValidationError
from .metrics import EvalResult, median_baseline
from .models import ModelSpec, build_model, load_checkpoint, save_checkpoint
from .splits import SplitSpec, TailQuota, load_assignment, make_split, save_assignment
from .training import TrainConfig, predict_in_batches, train

VALIDATION_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors (exit 1)
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _env_seed() -> int | None:
    raw = os.environ.get("PPGBENCH_SEED")
    return int(raw) if raw is not None else None


def _resolve(path: str | None, out_dir: str) -> str | None:
    if path is None or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(out_dir, path))


def _write_manifest(out_dir, argv, config, seeds, timings):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": ["ppgbench"] + list(argv),
        "config_hash": config_hash(config),
        "seeds": seeds,
        "versions": {
            "ppgbench": __version__,
            "numpy": np.__version__,
            "torch": __import__("torch").__version__,
        },
        "timings_seconds": timings,
        "written_at_unix": time.time(),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)


def _load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _histogram_from_arg(path: str, label: str, binning: HistogramBinning) -> LabelHistogram:
    """Accept either a histogram JSON file or a bundle directory."""
    if os.path.isdir(path):
        bundle = load_bundle(path)
        values = [getattr(r, label) for r in bundle.records]
        return build_histogram(values, binning)
    with open(path, "r", encoding="utf-8") as f:
        return LabelHistogram.from_json(f.read())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    t0 = time.time()
    cfg_dict = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    elif "seed" not in cfg_dict and _env_seed() is not None:
        cfg_dict["seed"] = _env_seed()
    if "heart_rate_range" in cfg_dict:
        cfg_dict["heart_rate_range"] = tuple(cfg_dict["heart_rate_range"])
    config = SynthConfig(**cfg_dict)
    bundle = generate_synthetic(config, name=args.name)
    write_bundle(bundle, args.out)
    _write_manifest(args.out, argv, asdict(config), {"synth": config.seed}, {"total": time.time() - t0})
    print(f"wrote bundle {bundle.name!r}: {len(bundle)} segments -> {args.out}")
    return 0


def cmd_split(args, argv) -> int:
    t0 = time.time()
    bundle = load_bundle(args.bundle)
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    spec = SplitSpec(
        scenario=args.scenario,
        test_fraction=args.test_fraction,
        val_fraction=args.val_fraction,
        calib_fraction=args.calib_fraction,
        aami_tail_quota=TailQuota(args.low_threshold, args.high_threshold, args.min_tail_fraction),
        seed=seed,
    )
    assignment = make_split(bundle, spec)
    os.makedirs(args.out, exist_ok=True)
    base = os.path.join(args.out, f"split-{args.scenario}")
    save_assignment(assignment, spec, base)
    _write_manifest(args.out, argv, asdict(spec), {"split": seed}, {"total": time.time() - t0})
    for w in assignment.warnings:
        print(f"warning: {w}", file=sys.stderr)
    counts = {}
    for role in ("train", "validation", "calibration", "test"):
        counts[role] = sum(1 for r in assignment.role_of.values() if r == role)
    print(f"wrote {base}.csv ({counts})")
    return 0


def _weight_tables_from_args(args) -> tuple[WeightTable, WeightTable] | None:
    if not args.sbp_weights and not args.dbp_weights:
        return None
    if not (args.sbp_weights and args.dbp_weights):
        raise ValidationError("provide both --sbp-weights and --dbp-weights or neither")
    with open(args.sbp_weights, "r", encoding="utf-8") as f:
        sbp = WeightTable.from_json(f.read())
    with open(args.dbp_weights, "r", encoding="utf-8") as f:
        dbp = WeightTable.from_json(f.read())
    return sbp, dbp


def cmd_train(args, argv) -> int:
    t0 = time.time()
    bundle = load_bundle(args.bundle)
    assignment = load_assignment(args.split)
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    model_spec = ModelSpec(args.arch, width_multiplier=args.width, seed=seed)
    config = TrainConfig(
        effective_batch_size=args.effective_batch,
        micro_batch_size=args.micro_batch,
        epochs=args.epochs,
        learning_rate="auto" if args.lr == "auto" else float(args.lr),
        weight_decay=args.weight_decay,
        seed=seed,
    )
    tables = _weight_tables_from_args(args)
    trained, history = train(build_model(model_spec), bundle, assignment, config, tables)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(trained, os.path.join(args.out, "checkpoint"))
    with open(os.path.join(args.out, "history.csv"), "w", encoding="utf-8") as f:
        f.write(history.to_csv())
    _write_manifest(
        args.out,
        argv,
        {"model": asdict(model_spec), "train": asdict(config), "weighted": tables is not None},
        {"model": model_spec.seed, "train": config.seed},
        {"total": time.time() - t0},
    )
    best = history.epochs[history.best_epoch]
    print(
        f"trained {args.arch}: best epoch {history.best_epoch} "
        f"(val MAE {best.val_mae_sbp:.2f}/{best.val_mae_dbp:.2f} mmHg) -> {args.out}"
    )
    return 0


def _records_for_role(bundle, assignment, role):
    if assignment is None:
        return list(bundle.records)
    return [r for r in bundle.records if assignment.role_of.get(r.segment_id) == role]


def cmd_eval(args, argv) -> int:
    t0 = time.time()
    model = load_checkpoint(args.model)
    bundle = load_bundle(args.bundle)
    assignment = load_assignment(args.split) if args.split else None
    records = _records_for_role(bundle, assignment, args.role)
    if not records:
        raise ValidationError(f"no records with role {args.role!r} to evaluate")

    base_bundle = load_bundle(args.baseline_bundle) if args.baseline_bundle else bundle
    base_assignment = (
        load_assignment(args.baseline_split) if args.baseline_split else assignment
    )
    base_records = _records_for_role(base_bundle, base_assignment, "train")
    if not base_records:
        raise ValidationError("no training records to derive the median baseline from")
    med = median_baseline(np.array([[r.sbp, r.dbp] for r in base_records]))

    refs = np.array([[r.sbp, r.dbp] for r in records])
    preds = predict_in_batches(model, np.stack([r.waveform for r in records]))
    result = EvalResult.from_predictions(preds, refs, med)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as f:
        f.write(result.to_json())
    _write_manifest(args.out, argv, {"model": asdict(model.spec)}, {}, {"total": time.time() - t0})
    print(
        f"evaluated {len(records)} segments: MAE {result.mae_sbp:.2f}/{result.mae_dbp:.2f} mmHg, "
        f"MASE {result.mase_sbp:.3f}/{result.mase_dbp:.3f}"
    )
    return 0


def cmd_weights(args, argv) -> int:
    t0 = time.time()
    binning = HistogramBinning(args.low, args.high, args.bin_width)
    h_train = _histogram_from_arg(args.train_hist, args.label, binning)
    h_test = _histogram_from_arg(args.test_hist, args.label, binning)
    table = compute_weights(h_train, h_test, args.tau)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_json(table, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _write_manifest(out_dir, argv, {"tau": args.tau, "label": args.label}, {}, {"total": time.time() - t0})
    print(f"wrote weight table ({binning.n_bins} bins, tau={args.tau}) -> {args.out}")
    return 0


def cmd_emd(args, argv) -> int:
    t0 = time.time()
    binning = HistogramBinning(args.low, args.high, args.bin_width)
    h_a = _histogram_from_arg(args.hist_a, args.label, binning)
    h_b = _histogram_from_arg(args.hist_b, args.label, binning)
    value = emd(h_a, h_b)
    print(f"{value:.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "emd.json"), "w", encoding="utf-8") as f:
            json.dump({"emd_mmhg": value, "label": args.label}, f, indent=2)
        _write_manifest(args.out, argv, {"label": args.label}, {}, {"total": time.time() - t0})
    return 0


def cmd_grid(args, argv) -> int:
    t0 = time.time()
    config = _load_json(args.config)
    out = args.out
    os.makedirs(out, exist_ok=True)

    model_cfg = dict(config.get("model", {}))
    train_cfg = dict(config.get("train", {}))
    if _env_seed() is not None:
        model_cfg.setdefault("seed", _env_seed())
        train_cfg.setdefault("seed", _env_seed())
    model_spec = ModelSpec(**model_cfg)
    train_config = TrainConfig(**train_cfg)

    rows = []
    for row in config["rows"]:
        bundle = load_bundle(_resolve(row["bundle"], out))
        assignment = load_assignment(_resolve(row["split"], out))
        rows.append(TrainSetRef(row["name"], bundle, assignment))
    cols = []
    for col in config["cols"]:
        bundle = load_bundle(_resolve(col["bundle"], out))
        ids = None
        if col.get("split"):
            assignment = load_assignment(_resolve(col["split"], out))
            ids = [sid for sid, role in assignment.role_of.items() if role == col.get("role", "test")]
        cols.append(TestSetRef(col["name"], bundle, ids))

    weighting = config.get("weighting", {})
    weighted = bool(weighting.get("enabled", False))
    report = run_grid(
        rows,
        cols,
        model_spec,
        train_config,
        weighting=weighted,
        weight_target=weighting.get("target"),
        tau=float(weighting.get("tau", 1.0)),
        jobs=args.jobs,
    )
    render_report(report, out)

    scatter_rows, pearson = grid_emd_scatter(rows, cols, report)
    lines = ["train_set,test_set,emd_mmhg,mae_sbp_mmhg"]
    lines += [f"{r},{c},{e!r},{m!r}" for r, c, e, m in scatter_rows]
    with open(os.path.join(out, "emd_scatter.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")

    if weighted:
        # unweighted twin of the same grid, for the difference view
        baseline = run_grid(rows, cols, model_spec, train_config, jobs=args.jobs)
        render_report(baseline, out, stem="grid_unweighted")
        render_report(diff_grids(report, baseline), out)

    _write_manifest(
        out,
        argv,
        config,
        {"model": model_spec.seed, "train": train_config.seed},
        {"total": time.time() - t0, **{f"row:{k}": v for k, v in report.meta["row_seconds"].items()}},
    )
    print(f"grid complete: {len(rows)}x{len(cols)} -> {out}/grid.csv")
    return 0


def cmd_report(args, argv) -> int:
    t0 = time.time()
    with open(args.grid, "r", encoding="utf-8") as f:
        report = GridReport.from_json(f.read())
    written = render_report(report, args.out, stem=args.stem)
    _write_manifest(args.out, argv, {"grid": os.path.abspath(args.grid)}, {}, {"total": time.time() - t0})
    print("wrote " + ", ".join(written))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="ppgbench", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bundle")
    p.add_argument("--config", help="JSON file of generator parameters")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="build a train/val/calibration/test assignment")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenario", required=True, choices=["calib", "calibfree", "aami"])
    p.add_argument("--test-fraction", type=float, default=0.10)
    p.add_argument("--val-fraction", type=float, default=0.10)
    p.add_argument("--calib-fraction", type=float, default=0.0125)
    p.add_argument("--low-threshold", type=float, default=100.0)
    p.add_argument("--high-threshold", type=float, default=160.0)
    p.add_argument("--min-tail-fraction", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model on a split")
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", required=True, help="assignment base path (no extension)")
    p.add_argument("--out", required=True)
    p.add_argument("--arch", required=True)
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", default="0.001")
    p.add_argument("--effective-batch", type=int, default=512)
    p.add_argument("--micro-batch", type=int, default=64)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sbp-weights", help="weight-table JSON for the SBP output")
    p.add_argument("--dbp-weights", help="weight-table JSON for the DBP output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a bundle")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--role", default="test")
    p.add_argument("--baseline-bundle", default=None)
    p.add_argument("--baseline-split", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("weights", help="emit a clipped-ratio weight table")
    p.add_argument("--train-hist", required=True, help="histogram JSON or bundle directory")
    p.add_argument("--test-hist", required=True, help="histogram JSON or bundle directory")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--label", choices=["sbp", "dbp"], default="sbp")
    p.add_argument("--low", type=float, default=40.0)
    p.add_argument("--high", type=float, default=220.0)
    p.add_argument("--bin-width", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("emd", help="Earth Mover's Distance between two label histograms")
    p.add_argument("--hist-a", required=True, help="histogram JSON or bundle directory")
    p.add_argument("--hist-b", required=True, help="histogram JSON or bundle directory")
    p.add_argument("--label", choices=["sbp", "dbp"], default="sbp")
    p.add_argument("--low", type=float, default=40.0)
    p.add_argument("--high", type=float, default=220.0)
    p.add_argument("--bin-width", type=float, default=2.0)
    p.add_argument("--out", default=None, help="also write emd.json and a run manifest here")
    p.set_defaults(func=cmd_emd)

    p = sub.add_parser("grid", help="run a train-by-test grid experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="re-render a saved grid report")
    p.add_argument("--grid", required=True, help="grid.json produced by the grid command")
    p.add_argument("--out", required=True)
    p.add_argument("--stem", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def dispatch(argv) -> int:
    """Parse and run one command, mapping errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_EXIT
    except PpgBenchError as exc:
        kind = "runtime" if isinstance(exc, TrainingError) else "validation"
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT if kind == "runtime" else VALIDATION_EXIT
    except FileNotFoundError as exc:
        # missing inputs are invalid invocations, like corrupt ones
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_EXIT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
