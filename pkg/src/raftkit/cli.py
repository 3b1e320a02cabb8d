"""Command-line pipeline: synth -> train-emos -> train-raft -> replay -> verify.

Each subcommand reads the previous stage's files and writes its own,
plus a config echo for reproducibility. Exit codes: 0 success, 2 config
error, 3 missing upstream artifact, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import figures, reports
from .core import ConfigError, DataError, MissingDataError, RaftkitError
from .cycle import CyclePolicy, read_ledger_csv, replay
from .emos import EmosParamStore, train_rolling_emos
from .ingest import (
    FORECAST_FILE,
    MANIFEST_FILE,
    SyntheticConfig,
    generate_synthetic,
    read_dataset,
    write_dataset,
)
from .raft import RaftModel, compute_errors, train_raft
from .verify import ScoreSlice, build_case_table, write_reports, aggregate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_UPSTREAM = 3
EXIT_DATA = 4

EMOS_PARAMS_FILE = "emos_params.json"
RAFT_MODEL_FILE = "raft_model.json"
LEDGER_FILE = "ledger.csv"


def _echo_config(out_dir: str, command: str, args: argparse.Namespace):
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    payload["command"] = command
    path = os.path.join(out_dir, f"{command.replace('-', '_')}.config.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def _require(path: str, produced_by: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"missing {path}; run `raftkit {produced_by}` first"
        )
    return path


def _parse_init_hours(text):
    if not text:
        return None
    try:
        hours = tuple(int(h) for h in text.split(","))
    except ValueError:
        raise ConfigError(f"bad --init-hours {text!r}") from None
    for h in hours:
        if h not in (3, 9, 15, 21):
            raise ConfigError(f"init hour {h} not in (3, 9, 15, 21)")
    return hours


def _parse_slice(text) -> ScoreSlice:
    if not text:
        return ScoreSlice()
    kwargs = {}
    for part in text.split(","):
        if "=" not in part:
            raise ConfigError(f"bad --slice fragment {part!r}")
        key, value = part.split("=", 1)
        key = key.strip()
        if key == "station":
            kwargs["stations"] = tuple(value.split("+"))
        elif key == "site_type":
            kwargs["site_types"] = tuple(value.split("+"))
        elif key == "init_hour":
            kwargs["init_hours"] = tuple(int(v) for v in value.split("+"))
        elif key == "leads":
            lo, _, hi = value.partition("-")
            kwargs["lead_range"] = (int(lo), int(hi or lo))
        elif key == "season":
            kwargs["seasons"] = tuple(value.split("+"))
        elif key == "tod":
            kwargs["times_of_day"] = tuple(int(v) for v in value.split("+"))
        else:
            raise ConfigError(f"unknown slice key {key!r}")
    return ScoreSlice(**kwargs)


def cmd_synth(args) -> int:
    config = SyntheticConfig(
        seed=args.seed,
        n_stations=args.stations,
        n_days=args.days,
        diurnal_amplitude=args.diurnal_amplitude,
        truth_ar1_coeff=args.truth_ar1,
        forecast_bias=args.bias,
        spread_deflation=args.spread_deflation,
        error_ar1_coeff=args.error_ar1,
        obs_noise_sd=args.obs_noise,
    )
    dataset, _ = generate_synthetic(config)
    os.makedirs(args.data_dir, exist_ok=True)
    paths = write_dataset(dataset, args.data_dir)
    _echo_config(args.data_dir, "synth", args)
    print(f"wrote {paths['forecasts']}")
    print(f"wrote {paths['observations']}")
    print(f"wrote {paths['manifest']}")
    return EXIT_OK


def cmd_train_emos(args) -> int:
    _require(os.path.join(args.data_dir, FORECAST_FILE), "synth")
    dataset = read_dataset(args.data_dir)
    manifest = dataset.manifest
    if manifest is None:
        raise FileNotFoundError(
            f"missing {os.path.join(args.data_dir, MANIFEST_FILE)}; run `raftkit synth` first"
        )
    init_hours = _parse_init_hours(args.init_hours) or manifest.init_hours
    dates = manifest.dates_in((manifest.training_range[0], manifest.test_range[1]))
    store = train_rolling_emos(
        dataset, dates, init_hours=init_hours, workers=args.workers
    )
    os.makedirs(args.model_dir, exist_ok=True)
    out = os.path.join(args.model_dir, EMOS_PARAMS_FILE)
    store.to_json(out)
    _echo_config(args.model_dir, "train-emos", args)
    print(f"wrote {out} ({len(store)} cell fits)")
    return EXIT_OK


def cmd_train_raft(args) -> int:
    _require(os.path.join(args.data_dir, FORECAST_FILE), "synth")
    params_path = _require(
        os.path.join(args.model_dir, EMOS_PARAMS_FILE), "train-emos"
    )
    dataset = read_dataset(args.data_dir)
    manifest = dataset.manifest
    store = EmosParamStore.from_json(params_path)
    init_hours = _parse_init_hours(args.init_hours) or manifest.init_hours
    train_dates = manifest.dates_in(manifest.training_range)
    panels = [
        compute_errors(dataset, store, station, init_hour, train_dates)
        for station in dataset.station_ids()
        for init_hour in init_hours
    ]
    model = train_raft(panels)
    out = os.path.join(args.model_dir, RAFT_MODEL_FILE)
    model.to_json(out)
    _echo_config(args.model_dir, "train-raft", args)
    print(f"wrote {out} ({len(model)} adjustment plans)")
    return EXIT_OK


def _policy_from_args(args) -> CyclePolicy:
    mode = args.policy.replace("-", "_")
    return CyclePolicy(
        mode=mode,
        until_lead=args.until_lead if mode == "raft_until" else None,
    )


def cmd_replay(args) -> int:
    _require(os.path.join(args.data_dir, FORECAST_FILE), "synth")
    params_path = _require(
        os.path.join(args.model_dir, EMOS_PARAMS_FILE), "train-emos"
    )
    policy = _policy_from_args(args)
    raft_model = None
    if policy.mode != "emos_only":
        raft_path = _require(
            os.path.join(args.model_dir, RAFT_MODEL_FILE), "train-raft"
        )
        raft_model = RaftModel.from_json(raft_path)
    dataset = read_dataset(args.data_dir)
    manifest = dataset.manifest
    store = EmosParamStore.from_json(params_path)
    init_hours = _parse_init_hours(args.init_hours)
    ledger = replay(
        dataset,
        store,
        raft_model,
        policy,
        date_range=manifest.test_range if manifest else None,
        init_hours=init_hours,
        workers=args.workers,
    )
    out = os.path.join(args.model_dir, LEDGER_FILE)
    ledger.write_csv(out, dataset=dataset)
    _echo_config(args.model_dir, "replay", args)
    print(f"wrote {out} ({len(ledger)} trajectories)")
    return EXIT_OK


def cmd_verify(args) -> int:
    _require(os.path.join(args.data_dir, FORECAST_FILE), "synth")
    ledger_path = _require(os.path.join(args.model_dir, LEDGER_FILE), "replay")
    dataset = read_dataset(args.data_dir)
    ledger = read_ledger_csv(ledger_path)
    table = build_case_table(ledger, dataset)
    spec = _parse_slice(args.slice)
    os.makedirs(args.report_dir, exist_ok=True)

    rng = np.random.default_rng(args.seed)
    summary = []
    for source in ("raw", "emos", "raft"):
        for metric in ("rmse", "crps"):
            summary.append(
                aggregate(table, spec, metric=metric, source=source,
                          ci=True, rng=rng)
            )
    write_reports(
        summary,
        os.path.join(args.report_dir, "report.json"),
        os.path.join(args.report_dir, "report.csv"),
    )

    figure_names = []
    if args.figure:
        if args.figure == "all":
            figure_names = list(reports.FIGURES)
        else:
            figure_names = [args.figure]
    for name in figure_names:
        rows = reports.build_figure_frame(
            name, table, ledger, dataset, spec=spec, seed=args.seed
        )
        csv_path = os.path.join(args.report_dir, f"{name}.csv")
        png_path = os.path.join(args.report_dir, f"{name}.png")
        reports.write_frame_csv(rows, csv_path)
        figures.render(name, rows, png_path)
        print(f"wrote {csv_path}")
        print(f"wrote {png_path}")
    _echo_config(args.report_dir, "verify", args)
    print(f"wrote {os.path.join(args.report_dir, 'report.json')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raftkit",
        description="Post-process ensemble temperature trajectories and "
        "rapidly adjust them as observations arrive.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stations", type=int, default=4)
    p.add_argument("--days", type=int, default=160)
    p.add_argument("--bias", type=float, default=0.5)
    p.add_argument("--spread-deflation", type=float, default=0.7)
    p.add_argument("--error-ar1", type=float, default=0.6)
    p.add_argument("--truth-ar1", type=float, default=0.97)
    p.add_argument("--obs-noise", type=float, default=0.8)
    p.add_argument("--diurnal-amplitude", type=float, default=5.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-emos", help="rolling minimum-CRPS fits per cell")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--init-hours", default="")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_train_emos)

    p = sub.add_parser("train-raft", help="fit error links and adjustment periods")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--init-hours", default="")
    p.set_defaults(func=cmd_train_raft)

    p = sub.add_parser("replay", help="replay the forecast cycle over the test range")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument(
        "--policy", default="raft-full",
        choices=["emos-only", "raft-full", "raft-until"],
    )
    p.add_argument("--until-lead", type=int, default=None)
    p.add_argument("--init-hours", default="")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("verify", help="score a replay and export figure data")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--report-dir", required=True)
    p.add_argument("--figure", default="", help="fig7|fig8|fig9|fig10|fig11|fig12|table1|all")
    p.add_argument("--slice", default="", help="e.g. station=S01,leads=1-12,season=DJF")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_UPSTREAM
    except (DataError, MissingDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RaftkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
