"""Command-line pipeline: synth, preprocess, train, detect, evaluate, map.

Every artifact-producing run writes exactly one JSON manifest next to its
primary output.  Outputs are byte-identical across runs with the same seed
and inputs; only the manifest's timestamp differs.

Exit codes: 0 success, 2 usage, 3 missing input, 4 schema/parse error,
5 data error, 6 configuration error, 7 model file error, 1 unexpected.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import DEFAULTS, ENV_PREFIX, resolve
from .core import (
    CANONICAL_WINDOW_SIZES,
    ConfigError,
    DegenerateScaleError,
    DivergenceError,
    EmptyInputError,
    ForestWatchError,
    GridAlignmentError,
    InsufficientDataError,
    IntegrityError,
    ModelFormatError,
    SchemaError,
    TimeAxis,
    WindowSpec,
)
from .dataset import (
    WeeklyDataset,
    load_weekly_dataset,
    read_detections_csv,
    save_weekly_dataset,
    write_detections_csv,
)
from .evaluation import (
    ScoreConfig,
    aggregate,
    baseline_break_scores,
    classify,
    label_defoliation,
    read_records_csv,
    write_records_csv,
    write_report_json,
)
from .ingest import RAW_STEP_DAYS, SclPolicy, apply_scl_filter, group_by_pixel, read_observations
from .maps import render_score_map, render_week_map, write_ppm, write_value_grid
from .model import (
    ERROR_VARIANTS,
    PRESETS,
    TrainConfig,
    build_model,
    calibrate_threshold,
    detect,
    load_model,
    save_model,
    train,
)
from .preprocess import (
    PreprocessConfig,
    SgfConfig,
    apply_scaling,
    fit_scaling,
    make_windows,
    preprocess_series,
)
from .synthgen import SceneSpec, generate_scene, read_truth_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_SCHEMA = 4
EXIT_DATA = 5
EXIT_CONFIG = 6
EXIT_MODEL = 7
EXIT_UNEXPECTED = 1

_DATA_ERRORS = (
    IntegrityError,
    EmptyInputError,
    InsufficientDataError,
    DegenerateScaleError,
    GridAlignmentError,
    DivergenceError,
)


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    return value


def write_manifest(primary_output: Path, command: str, cfg: dict,
                   seed: int, inputs: dict, outputs: dict, timings: dict) -> Path:
    path = Path(str(primary_output) + ".manifest.json")
    payload = {
        "tool": "forestwatch",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items())},
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "created_utc": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _score_config(cfg: dict) -> ScoreConfig:
    return ScoreConfig(
        anomaly_window=int(cfg["score.window"]),
        zero_lag=float(cfg["score.zero_lag"]),
        tn_reward=float(cfg["score.tn_reward"]),
        early_threshold=float(cfg["score.early_threshold"]),
    )


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(args, cfg) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = SceneSpec(
        nx=args.nx, ny=args.ny, years=args.years,
        gap_probability=args.gap_probability,
        drift_weeks=args.drift_weeks,
        onset_week_min=args.onset_min, onset_week_max=args.onset_max,
    )
    obs_path = out_dir / "observations.csv"
    truth_path = out_dir / "ground_truth.csv"
    t0 = time.perf_counter()
    summary = generate_scene(spec, args.disturbed_fraction, args.seed, obs_path, truth_path)
    timings = {"total": time.perf_counter() - t0}
    write_manifest(obs_path, "synth", cfg, args.seed,
                   inputs={}, outputs={"observations": obs_path, "ground_truth": truth_path},
                   timings=timings)
    print(f"synth: {summary['pixels']} pixels ({summary['disturbed']} disturbed), "
          f"{summary['steps']} steps -> {obs_path}")
    return EXIT_OK


def cmd_preprocess(args, cfg) -> int:
    in_path = _require_file(args.input)
    t0 = time.perf_counter()
    observations = read_observations(in_path)
    groups = group_by_pixel(observations)
    if not groups:
        raise EmptyInputError("no observations in input")

    first = min(o.date for o in observations)
    last = max(o.date for o in observations)
    length = (last - first).days // RAW_STEP_DAYS + 1
    axis = TimeAxis(epoch=first, step_days=RAW_STEP_DAYS, length=length)

    policy = SclPolicy(keep_classes=frozenset(cfg["scl.keep"]))
    pre_cfg = PreprocessConfig(
        tukey_k=float(cfg["tukey.k"]),
        sgf=SgfConfig(half_width=int(cfg["sgf.half_width"]), order=int(cfg["sgf.order"])),
        ewma_horizon=int(cfg["ewma.horizon"]),
    )

    pixel_ids = sorted(groups, key=lambda p: (p[1], p[0]))
    weekly_list = []
    for pixel_id in pixel_ids:
        raw = apply_scl_filter(groups[pixel_id], policy, axis=axis)
        weekly_list.append(preprocess_series(raw, pre_cfg))
    ds = WeeklyDataset(
        pixel_ids=pixel_ids,
        axis=weekly_list[0].axis,
        values=np.stack([w.values for w in weekly_list]),
    )
    save_weekly_dataset(ds, args.out)
    timings = {"total": time.perf_counter() - t0}
    write_manifest(Path(args.out), "preprocess", cfg, args.seed,
                   inputs={"observations": in_path}, outputs={"weekly": args.out},
                   timings=timings)
    print(f"preprocess: {len(pixel_ids)} pixels x {ds.axis.length} weeks -> {args.out}")
    return EXIT_OK


def _healthy_indices(ds, truth_path) -> list[int]:
    if truth_path is None:
        return list(range(len(ds.pixel_ids)))
    truth = read_truth_csv(_require_file(truth_path))
    return [i for i, p in enumerate(ds.pixel_ids) if truth.get(p, (None, None))[1] is None]


def cmd_train(args, cfg) -> int:
    ds = load_weekly_dataset(_require_file(args.input))
    window = int(args.window or cfg["window.size"])
    if window not in CANONICAL_WINDOW_SIZES and not args.any_window:
        raise ConfigError(
            f"window size {window} not in {CANONICAL_WINDOW_SIZES} (use --any-window to override)"
        )
    preset = args.preset or str(cfg["train.preset"])
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    epochs = int(args.epochs or cfg["train.epochs"]) or PRESETS[preset]["epochs"]

    healthy = _healthy_indices(ds, args.truth)
    if not healthy:
        raise EmptyInputError("no healthy pixels available for training")
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(healthy))
    n_calib = int(round(len(healthy) * float(cfg["train.calib_fraction"])))
    n_calib = min(max(n_calib, 1), len(healthy) - 1) if len(healthy) > 1 else 0
    calib_idx = [healthy[i] for i in order[:n_calib]]
    train_idx = [healthy[i] for i in order[n_calib:]]

    t0 = time.perf_counter()
    train_series = [ds.series(i) for i in train_idx]
    scaling = fit_scaling(train_series)

    train_windows = []
    for series in train_series:
        scaled = apply_scaling(series, scaling)
        train_windows.extend(make_windows(scaled, WindowSpec(size=window, stride=window)))
    model = build_model(window, preset=preset, seed=args.seed, allow_any_window=True)
    train_cfg = TrainConfig(
        batch_size=int(cfg["train.batch_size"]),
        epochs=epochs,
        validation_split=float(cfg["train.validation_split"]),
        seed=args.seed,
        learning_rate=float(cfg["train.learning_rate"]),
    )
    history = train(model, train_windows, train_cfg)
    model.scaling = scaling
    t_train = time.perf_counter() - t0

    calib_windows = []
    for i in calib_idx:
        scaled = apply_scaling(ds.series(i), scaling)
        calib_windows.extend(make_windows(scaled, WindowSpec(size=window, stride=1)))
    if calib_windows:
        # Online detection scores each week by the error at its window's final
        # step, so thresholds are calibrated on that same statistic.
        stacked = np.stack([w.values for w in calib_windows])
        for variant in ERROR_VARIANTS:
            model.thresholds[variant] = calibrate_threshold(
                model, stacked, variant, quantile=float(cfg["detect.quantile"]),
                positions="last",
            )
    save_model(model, args.out)
    timings = {"train": t_train, "total": time.perf_counter() - t0}
    write_manifest(Path(args.out), "train", cfg, args.seed,
                   inputs={"weekly": args.input, "truth": args.truth or ""},
                   outputs={"model": args.out}, timings=timings)
    tau = model.thresholds.get(str(cfg["detect.variant"]))
    print(f"train: window={window} preset={preset} epochs={epochs} "
          f"windows={len(train_windows)} best_val={min(history.val_loss):.3e} "
          f"tau[{cfg['detect.variant']}]={tau if tau is None else format(tau, '.4g')} -> {args.out}")
    return EXIT_OK


def cmd_detect(args, cfg) -> int:
    ds = load_weekly_dataset(_require_file(args.input))
    t0 = time.perf_counter()
    rows = []
    if args.baseline:
        vi = args.vi or str(cfg["baseline.index"])
        train_weeks = int(args.train_weeks or cfg["baseline.train_weeks"])
        sigma_factor = float(cfg["baseline.sigma_factor"])
        run_weeks = int(cfg["baseline.run_weeks"])
        for i, pixel_id in enumerate(ds.pixel_ids):
            z, break_week = baseline_break_scores(
                ds.series(i), train_weeks, vi=vi,
                sigma_factor=sigma_factor, run_weeks=run_weeks,
            )
            for offset, score in enumerate(z):
                week = train_weeks + offset
                flagged = break_week is not None and week >= break_week
                rows.append((pixel_id, week, score, flagged))
        source = f"baseline[{vi}]"
    else:
        if not args.model:
            raise ConfigError("detect needs --model or --baseline")
        model = load_model(_require_file(args.model))
        if model.scaling is None:
            raise ModelFormatError(f"{args.model}: model carries no scaling parameters")
        if ds.axis.length < model.window_size:
            raise InsufficientDataError(
                f"series of {ds.axis.length} weeks shorter than model window {model.window_size}"
            )
        variant = args.variant or str(cfg["detect.variant"])
        if variant not in ERROR_VARIANTS:
            raise ConfigError(f"unknown error variant {variant!r}")
        if args.tau is not None:
            tau = float(args.tau)
        elif variant in model.thresholds:
            tau = model.thresholds[variant]
        else:
            raise ConfigError(f"model has no calibrated threshold for {variant!r}; pass --tau")
        stride = int(args.stride or cfg["window.stride"])
        for i, pixel_id in enumerate(ds.pixel_ids):
            scaled = model.scaling.transform(ds.values[i])
            result = detect(model, scaled, variant, tau, stride=stride)
            for week in np.flatnonzero(~np.isnan(result.errors)):
                rows.append((pixel_id, int(week), result.errors[week], bool(result.flags[week])))
        source = f"model[{args.model}:{variant}]"
    write_detections_csv(args.out, rows)
    timings = {"total": time.perf_counter() - t0}
    write_manifest(Path(args.out), "detect", cfg, args.seed,
                   inputs={"weekly": args.input, "model": args.model or ""},
                   outputs={"detections": args.out}, timings=timings)
    n_flags = sum(1 for r in rows if r[3])
    print(f"detect: {source} scored {len(rows)} pixel-weeks, {n_flags} flagged -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    ds = load_weekly_dataset(_require_file(args.input))
    detections = read_detections_csv(_require_file(args.detections))
    score_cfg = _score_config(cfg)
    t0 = time.perf_counter()

    truth = None
    if args.labels == "truth":
        if not args.truth:
            raise ConfigError("--labels truth requires --truth")
        truth = read_truth_csv(_require_file(args.truth))

    records = []
    for i, pixel_id in enumerate(ds.pixel_ids):
        entry = detections.get(pixel_id)
        first_anomaly = entry["first_anomaly"] if entry else None
        if truth is not None:
            defoliation = truth.get(pixel_id, (None, None))[1]
        else:
            defoliation = label_defoliation(
                ds.series(i),
                ndvi_threshold=float(cfg["defoliation.ndvi_threshold"]),
                tcw_threshold=float(cfg["defoliation.tcw_threshold"]),
                run_weeks=int(cfg["defoliation.run_weeks"]),
                combinator=str(cfg["defoliation.combinator"]),
            )
        records.append(classify(first_anomaly, defoliation, score_cfg, pixel_id=pixel_id))

    report = aggregate(records, score_cfg)
    write_records_csv(records, args.out_records)
    write_report_json(report, args.out_report)
    timings = {"total": time.perf_counter() - t0}
    write_manifest(Path(args.out_report), "evaluate", cfg, args.seed,
                   inputs={"weekly": args.input, "detections": args.detections,
                           "truth": args.truth or ""},
                   outputs={"records": args.out_records, "report": args.out_report},
                   timings=timings)
    acc = "n/a" if report.accuracy is None else f"{report.accuracy:.3f}"
    prec = "n/a" if report.precision is None else f"{report.precision:.3f}"
    mpds = "n/a" if report.mean_pds_excl_tn is None else f"{report.mean_pds_excl_tn:.3f}"
    print(f"evaluate: TP={report.tp} FP={report.fp} FN={report.fn} TN={report.tn} "
          f"accuracy={acc} precision={prec} mean_pds_excl_tn={mpds} -> {args.out_report}")
    return EXIT_OK


def _grid_dims(keys, nx_arg, ny_arg) -> tuple[int, int]:
    if nx_arg and ny_arg:
        return nx_arg, ny_arg
    if not keys:
        raise EmptyInputError("no pixels to map")
    nx = max(x for x, _ in keys) + 1
    ny = max(y for _, y in keys) + 1
    return nx_arg or nx, ny_arg or ny


def cmd_map(args, cfg) -> int:
    t0 = time.perf_counter()
    out_base = Path(args.out)
    ppm_path = out_base.with_suffix(".ppm")
    csv_path = out_base.with_suffix(".csv")
    if args.mode == "score":
        if not args.records:
            raise ConfigError("--mode score requires --records")
        records = read_records_csv(_require_file(args.records))
        scores = {r.pixel_id: r.score for r in records}
        nx, ny = _grid_dims(scores.keys(), args.nx, args.ny)
        grid = render_score_map(scores, nx, ny)
        write_ppm(grid, ppm_path)
        write_value_grid(scores, nx, ny, csv_path)
        inputs = {"records": args.records}
    else:
        if not args.detections:
            raise ConfigError("--mode week requires --detections")
        detections = read_detections_csv(_require_file(args.detections))
        weeks = {pid: entry["first_anomaly"] for pid, entry in detections.items()}
        nx, ny = _grid_dims(weeks.keys(), args.nx, args.ny)
        grid = render_week_map(weeks, nx, ny)
        write_ppm(grid, ppm_path)
        write_value_grid(weeks, nx, ny, csv_path)
        inputs = {"detections": args.detections}
    timings = {"total": time.perf_counter() - t0}
    write_manifest(ppm_path, "map", cfg, args.seed,
                   inputs=inputs, outputs={"ppm": ppm_path, "csv": csv_path},
                   timings=timings)
    print(f"map: {args.mode} {nx}x{ny} -> {ppm_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forestwatch",
        description="Early forest-health anomaly detection from satellite pixel time series.",
        epilog=(
            "Config precedence: flags > environment > --config file > defaults. "
            f"Environment overrides use the prefix {ENV_PREFIX} with dots as underscores, "
            f"e.g. {ENV_PREFIX}WINDOW_SIZE=26. Documented keys: " + ", ".join(sorted(DEFAULTS))
        ),
    )
    parser.add_argument("--config", default=None, metavar="PATH", help="key=value config file")
    parser.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads (accepted for interface stability; results are "
                             "deterministic and independent of this value)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a ground-truthed synthetic scene")
    p.add_argument("--out-dir", required=True, help="directory for observations.csv + ground_truth.csv")
    p.add_argument("--nx", type=int, default=10)
    p.add_argument("--ny", type=int, default=10)
    p.add_argument("--years", type=int, default=5)
    p.add_argument("--disturbed-fraction", type=float, default=0.3)
    p.add_argument("--gap-probability", type=float, default=0.12)
    p.add_argument("--drift-weeks", type=int, default=40)
    p.add_argument("--onset-min", type=int, default=110)
    p.add_argument("--onset-max", type=int, default=190)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="raw observations to gap-free weekly series")
    p.add_argument("--input", required=True, help="observations CSV/NDJSON")
    p.add_argument("--out", required=True, help="weekly dataset (.npz)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="fit the autoencoder on healthy pixels and calibrate thresholds")
    p.add_argument("--input", required=True, help="weekly dataset (.npz)")
    p.add_argument("--truth", default=None,
                   help="ground-truth CSV; only pixels without defoliation are used")
    p.add_argument("--window", type=int, default=None, help="window size in weeks")
    p.add_argument("--any-window", action="store_true", help="allow non-canonical window sizes")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True, help="model file (.lsae)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="flag anomalous weeks per pixel")
    p.add_argument("--input", required=True, help="weekly dataset (.npz)")
    p.add_argument("--model", default=None, help="trained model file")
    p.add_argument("--variant", default=None, choices=sorted(ERROR_VARIANTS),
                   help="reconstruction-error band subset")
    p.add_argument("--tau", type=float, default=None, help="override the calibrated threshold")
    p.add_argument("--stride", type=int, default=None, help="window stride (default 1, online)")
    p.add_argument("--baseline", action="store_true",
                   help="use the harmonic break-detection baseline instead of a model")
    p.add_argument("--vi", choices=("ndvi", "tcw"), default=None, help="baseline vegetation index")
    p.add_argument("--train-weeks", type=int, default=None, help="baseline reference period length")
    p.add_argument("--out", required=True, help="detections CSV")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score detections against defoliation labels")
    p.add_argument("--input", required=True, help="weekly dataset (.npz)")
    p.add_argument("--detections", required=True, help="detections CSV from the detect step")
    p.add_argument("--labels", choices=("derived", "truth"), default="derived",
                   help="defoliation labels: derived from the series (default) or ground truth")
    p.add_argument("--truth", default=None, help="ground-truth CSV (for --labels truth)")
    p.add_argument("--out-records", required=True, help="per-pixel records CSV")
    p.add_argument("--out-report", required=True, help="summary report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("map", help="render per-pixel scores or first-anomaly weeks")
    p.add_argument("--mode", choices=("score", "week"), required=True)
    p.add_argument("--records", default=None, help="records CSV (score mode)")
    p.add_argument("--detections", default=None, help="detections CSV (week mode)")
    p.add_argument("--nx", type=int, default=None)
    p.add_argument("--ny", type=int, default=None)
    p.add_argument("--out", required=True, help="output basename (.ppm and .csv are written)")
    p.set_defaults(func=cmd_map)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = resolve(args.config)
        return args.func(args, cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelFormatError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ForestWatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
