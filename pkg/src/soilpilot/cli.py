"""Operator-facing command line.

Subcommands wrap the module operations one-to-one: ``ingest``, ``screen``,
``mi-graph``, ``backup-sim``, ``forecast``, ``evaluate``, ``schedule``,
``run-daily`` and ``commit``. Every command is deterministic given its input
files, config and seed, and every artifact embeds the config hash and seed.
Partial failures exit with a stage-specific nonzero code (see EXIT_CODES).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import date, datetime

import numpy as np

from . import backup as vs
from .config import PipelineConfig, load_config
from .data import (
    WindowSpec,
    atomic_write_text,
    infer_grid,
    load_raw_csv,
    resample_hourly,
    trailing_window,
    write_hourly_csv,
)
from .errors import ForecastError, InsufficientDataError, SoilPilotError
from .forecast import (
    default_models,
    fit_knn,
    forecast_knn,
    rolling_origin_evaluate,
    svg_forecast_chart,
)
from .mutual_info import export_graph, mi_matrix, top1_neighbours
from .pipeline import load_dataset, run_daily
from .rng import substream
from .rules import screen, write_fault_log
from .scheduler import (
    Proposal,
    compute_deficit,
    minutes_from_deficit,
    night_span,
    rain_credit,
    sequence_zones,
    load_precip,
    load_zones,
)

logger = logging.getLogger(__name__)

EXIT_CODES = {
    "ok": 0,
    "config": 2,
    "ingest": 3,
    "screen": 4,
    "mi-graph": 5,
    "backup-sim": 6,
    "forecast": 7,
    "evaluate": 8,
    "schedule": 9,
    "run-daily": 10,
    "commit": 11,
}


def _out_path(config: PipelineConfig, name: str) -> str:
    os.makedirs(config.out_dir, exist_ok=True)
    return os.path.join(config.out_dir, name)


def cmd_ingest(config: PipelineConfig, args: argparse.Namespace) -> int:
    readings, bad = load_raw_csv(args.raw)
    if not readings:
        print(f"error: {args.raw} contains no valid rows", file=sys.stderr)
        return EXIT_CODES["ingest"]
    grid = infer_grid(readings)
    result = resample_hourly(readings, grid, stat=args.stat)
    matrix_path = _out_path(config, "hourly_matrix.csv")
    write_hourly_csv(matrix_path, result.series, header_comment=config.provenance())
    filled = sum(int(np.isfinite(s.values).sum()) for s in result.series.values())
    report = {
        "provenance": config.provenance(),
        "rows_read": len(readings) + len(bad),
        "rows_rejected": len(bad),
        "bad_rows": [{"line": ln, "reason": why} for ln, why in bad[:100]],
        "out_of_span": len(result.rejected),
        "sensors": sorted(result.series),
        "grid_start": grid.start.isoformat(sep=" "),
        "n_slots": grid.n_slots,
        "slots_filled": filled,
    }
    report_path = _out_path(config, "ingest_report.json")
    atomic_write_text(report_path, json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"wrote {matrix_path} ({grid.n_slots} slots x {len(result.series)} sensors), "
          f"{len(bad)} bad rows -> {report_path}")
    return 0


def cmd_screen(config: PipelineConfig, args: argparse.Namespace) -> int:
    from .detectors import model_screen

    dataset = load_dataset(config.dataset)
    grid = next(iter(dataset.values())).grid
    end_slot = grid.n_slots if args.end_slot is None else args.end_slot
    length = min(config.screen_window_hours, end_slot)
    if length < 200:
        print(f"error: only {end_slot} slots available; need >= 200", file=sys.stderr)
        return EXIT_CODES["screen"]
    spec = WindowSpec(length, end_slot)
    verdicts = []
    for sid in sorted(dataset):
        window = trailing_window(dataset[sid], length, end_slot)

        def hook(win, _sid=sid):
            if args.rules_only:
                return []
            return model_screen(win, config.detectors, substream(config.seed, f"iforest/{_sid}"))

        verdicts.append(screen(window, config.rules, window=spec, detectors=hook))
    path = _out_path(config, "fault_log.jsonl")
    write_fault_log(path, verdicts, header={"provenance": config.provenance()})
    n_faulty = sum(v.faulty for v in verdicts)
    for v in verdicts:
        if v.faulty:
            print(f"{v.sensor_id}: {', '.join(sorted(r.value for r in v.fired_rules))}")
    print(f"{n_faulty}/{len(verdicts)} sensors faulty -> {path}")
    return 0


def cmd_mi_graph(config: PipelineConfig, args: argparse.Namespace) -> int:
    dataset = load_dataset(config.dataset)
    matrix = mi_matrix(dataset, config.ksg)
    neighbours = top1_neighbours(matrix)
    matrix_path = _out_path(config, "mi_matrix.csv")
    matrix.to_csv(matrix_path, header_comment=config.provenance())
    dot_path, json_path = export_graph(
        matrix, neighbours, _out_path(config, "mi_graph.dot"),
        header_comment=config.provenance(),
    )
    nb_path = config.neighbours_path
    os.makedirs(os.path.dirname(nb_path) or ".", exist_ok=True)
    atomic_write_text(
        nb_path,
        json.dumps(
            {"provenance": config.provenance(), "neighbours": neighbours.to_dict()},
            sort_keys=True, indent=2,
        ) + "\n",
    )
    print(f"wrote {matrix_path}, {dot_path}, {json_path}, {nb_path}")
    if neighbours.unbacked:
        print(f"unbacked sensors: {', '.join(sorted(neighbours.unbacked))}")
    return 0


def _parse_outage_start(text: str, grid) -> int:
    try:
        return int(text)
    except ValueError:
        return grid.slot_of(datetime.fromisoformat(text))


def cmd_backup_sim(config: PipelineConfig, args: argparse.Namespace) -> int:
    dataset = load_dataset(config.dataset)
    if args.target not in dataset:
        print(f"error: unknown target sensor {args.target}", file=sys.stderr)
        return EXIT_CODES["backup-sim"]
    target = dataset[args.target]
    grid = target.grid
    start = _parse_outage_start(args.outage_start, grid)
    hours = args.outage_hours
    if hours < 0 or start < 0 or start + hours > grid.n_slots:
        print(
            f"error: outage [{start}, {start + hours}) outside the {grid.n_slots}-slot dataset",
            file=sys.stderr,
        )
        return EXIT_CODES["backup-sim"]

    if args.neighbour:
        neighbour_id = args.neighbour
    else:
        matrix = mi_matrix(dataset, config.ksg)
        ref = top1_neighbours(matrix).backup_for(args.target)
        if ref is None:
            print(f"error: no estimable neighbour for {args.target}", file=sys.stderr)
            return EXIT_CODES["backup-sim"]
        neighbour_id = ref[0]
    if neighbour_id == args.target:
        print("error: a sensor cannot back itself up", file=sys.stderr)
        return EXIT_CODES["backup-sim"]
    if neighbour_id not in dataset:
        print(f"error: unknown neighbour sensor {neighbour_id}", file=sys.stderr)
        return EXIT_CODES["backup-sim"]
    neighbour = dataset[neighbour_id]

    report_path = _out_path(config, "backup_sim_report.json")
    series_path = _out_path(config, "backup_sim_series.csv")
    if hours == 0:
        report = {
            "provenance": config.provenance(),
            "target": args.target,
            "neighbour": neighbour_id,
            "outage": [start, start],
            "backup_mae": None,
            "persistence_mae": None,
            "note": "empty outage window; MAE not applicable",
        }
        atomic_write_text(report_path, json.dumps(report, sort_keys=True, indent=2) + "\n")
        print(f"empty outage; wrote {report_path}")
        return 0

    window_hours = min(config.backup_window_hours, start)
    if window_hours < 200:
        print(f"error: only {start} pre-outage slots; need >= 200 to train", file=sys.stderr)
        return EXIT_CODES["backup-sim"]
    model = vs.train_backup(
        neighbour, target, WindowSpec(window_hours, start),
        substream(config.seed, f"mlp/{args.target}"),
    )
    truth = target.values[start : start + hours]
    predicted = vs.predict_backup(model, neighbour.values[start : start + hours])
    valid = np.isfinite(truth) & np.isfinite(predicted)
    backup_mae = float(np.abs(predicted[valid] - truth[valid]).mean()) if valid.any() else None
    pre = target.values[:start]
    pre_finite = pre[np.isfinite(pre)]
    persistence_mae = (
        float(np.abs(pre_finite[-1] - truth[np.isfinite(truth)]).mean())
        if len(pre_finite) and np.isfinite(truth).any()
        else None
    )

    lines = [f"# {config.provenance()}",
             "timestamp,neighbour_vwc,target_true_vwc,backup_vwc,in_outage"]
    for i in range(grid.n_slots):
        ts = grid.slot_time(i).isoformat(sep=" ")
        nb = neighbour.values[i]
        tv = target.values[i]
        in_out = start <= i < start + hours
        bk = predicted[i - start] if in_out else np.nan
        cells = [ts]
        for x in (nb, tv, bk):
            cells.append("" if not np.isfinite(x) else repr(float(x)))
        cells.append("1" if in_out else "0")
        lines.append(",".join(cells))
    atomic_write_text(series_path, "\n".join(lines) + "\n")

    report = {
        "provenance": config.provenance(),
        "target": args.target,
        "neighbour": neighbour_id,
        "outage": [start, start + hours],
        "train_window_hours": window_hours,
        "train_mae": round(model.train_mae, 6),
        "backup_mae": backup_mae,
        "persistence_mae": persistence_mae,
    }
    atomic_write_text(report_path, json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(
        f"backup {args.target}<-{neighbour_id}: MAE {backup_mae:.3f} "
        f"vs persistence {persistence_mae:.3f} -> {report_path}"
    )
    return 0


def cmd_forecast(config: PipelineConfig, args: argparse.Namespace) -> int:
    dataset = load_dataset(config.dataset)
    grid = next(iter(dataset.values())).grid
    end_slot = grid.n_slots if args.end_slot is None else args.end_slot
    lines = [f"# {config.provenance()}", "sensor_id,hour_offset,vwc_pct"]
    failed = []
    for sid in sorted(dataset):
        length = min(config.knn.window_hours, end_slot)
        try:
            window = trailing_window(dataset[sid], length, end_slot)
            fc = forecast_knn(fit_knn(window, config.knn), args.horizon)
        except (ForecastError, InsufficientDataError, ValueError) as exc:
            failed.append(sid)
            logger.warning("%s: %s", sid, exc)
            continue
        for h, v in enumerate(fc, start=1):
            lines.append(f"{sid},{h},{repr(float(v))}")
        if args.svg_dir:
            os.makedirs(args.svg_dir, exist_ok=True)
            recent = dataset[sid].values[max(0, end_slot - 72) : end_slot]
            pad = np.full(len(recent), np.nan)
            svg_forecast_chart(
                np.concatenate([recent, np.full(args.horizon, np.nan)]),
                np.concatenate([pad, fc]),
                os.path.join(args.svg_dir, f"{sid}.svg"),
                title=f"{sid}: last 72h + {args.horizon}h forecast",
            )
    path = _out_path(config, "forecasts.csv")
    atomic_write_text(path, "\n".join(lines) + "\n")
    print(f"wrote {path} ({len(dataset) - len(failed)}/{len(dataset)} sensors)")
    if failed:
        print(f"no forecast for: {', '.join(failed)}")
    return 0 if len(failed) < len(dataset) else EXIT_CODES["forecast"]


def cmd_evaluate(config: PipelineConfig, args: argparse.Namespace) -> int:
    dataset = load_dataset(config.dataset)
    report = rolling_origin_evaluate(
        dataset, default_models(config.knn, config.sarima), config.evaluation
    )
    path = _out_path(config, "eval_report.csv")
    report.to_csv(path, header_comment=config.provenance())
    for model in sorted(report.summary):
        mean, p75 = report.summary[model]
        print(f"{model}: mean MAE {mean:.4f} vwc%, P75 {p75:.4f} vwc%")
    print(f"wrote {path}")
    return 0


def _load_forecasts_csv(path: str) -> dict[str, np.ndarray]:
    table: dict[str, list[tuple[int, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("sensor_id,"):
                continue
            sid, hour, value = line.split(",")
            table.setdefault(sid, []).append((int(hour), float(value)))
    return {
        sid: np.asarray([v for _, v in sorted(entries)])
        for sid, entries in table.items()
    }


def cmd_schedule(config: PipelineConfig, args: argparse.Namespace) -> int:
    day = date.fromisoformat(args.day)
    zones = load_zones(config.zones)
    forecasts = _load_forecasts_csv(args.forecasts)
    precip_table = load_precip(config.precip) if config.precip else {}
    precip = float(precip_table.get(day, 0.0))
    proposals = []
    for zone_id in sorted(zones):
        zone = zones[zone_id]
        result = compute_deficit(zone, forecasts)
        if result is None:
            proposals.append(
                Proposal(zone_id=zone_id, day=day, runtime_minutes=0,
                         deficit_mm=0.0, rain_credit_mm=0.0,
                         status="skipped", status_detail="no-data")
            )
            continue
        deficit, _ = result
        net = rain_credit(deficit, precip)
        minutes, capped = minutes_from_deficit(net, zone)
        proposals.append(
            Proposal(zone_id=zone_id, day=day, runtime_minutes=minutes,
                     deficit_mm=round(deficit, 6),
                     rain_credit_mm=round(min(precip, deficit), 6),
                     flags=("capped",) if capped else ())
        )
    night = night_span(day, config.night_start, config.night_end)
    schedule = sequence_zones(proposals, zones, config.blackouts, night)
    path = _out_path(config, f"proposals_{day.isoformat()}.jsonl")
    lines = [json.dumps({"_header": {"provenance": config.provenance()}}, sort_keys=True)]
    lines += [json.dumps(p.to_dict(), sort_keys=True) for p in schedule.proposals]
    atomic_write_text(path, "\n".join(lines) + "\n")
    print(f"wrote {path} ({len(schedule.proposals)} proposals, "
          f"{len(schedule.overflow)} overflow)")
    return 0


def cmd_run_daily(config: PipelineConfig, args: argparse.Namespace) -> int:
    result = run_daily(config, date.fromisoformat(args.day))
    for stage in result.stages:
        print(f"stage ok: {stage}")
    print(f"artifacts in {result.out_dir}")
    if result.partial:
        for err in result.errors:
            print(f"partial: {err}", file=sys.stderr)
        return EXIT_CODES["run-daily"]
    return 0


def cmd_commit(config: PipelineConfig, args: argparse.Namespace) -> int:
    day = date.fromisoformat(args.day)
    proposals_path = args.proposals or os.path.join(
        config.out_dir, day.isoformat(), "proposals.jsonl"
    )
    if not os.path.exists(proposals_path):
        print(f"error: {proposals_path} not found (run-daily first?)", file=sys.stderr)
        return EXIT_CODES["commit"]
    header = None
    proposals: list[Proposal] = []
    with open(proposals_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "_header" in rec:
                header = rec
                continue
            proposals.append(Proposal.from_dict(rec))

    overrides = {}
    for item in args.override or []:
        zone_id, _, minutes = item.partition("=")
        if not minutes.isdigit():
            print(f"error: --override expects ZONE=MINUTES, got {item!r}", file=sys.stderr)
            return EXIT_CODES["commit"]
        overrides[zone_id] = int(minutes)
    accepted = set(args.accept or [])
    skipped = set(args.skip or [])
    stamp = datetime.combine(day, config.night_start)

    from dataclasses import replace

    updated = []
    executed = []
    for p in proposals:
        if p.zone_id in overrides:
            p = replace(p, status="overridden", runtime_minutes=overrides[p.zone_id],
                        decided_at=stamp, status_detail="operator override")
        elif p.zone_id in skipped:
            p = replace(p, status="skipped", decided_at=stamp,
                        status_detail="operator skip")
        elif args.accept_all or p.zone_id in accepted:
            if p.status == "proposed":
                p = replace(p, status="accepted", decided_at=stamp)
        updated.append(p)
        if p.status in ("accepted", "overridden"):
            executed.append(
                {
                    "zone_id": p.zone_id,
                    "date": p.day.isoformat(),
                    "runtime_minutes": p.runtime_minutes,
                    "status": p.status,
                    "window_start": p.window_start.isoformat(sep=" ") if p.window_start else None,
                    "window_end": p.window_end.isoformat(sep=" ") if p.window_end else None,
                    "recorded_at": stamp.isoformat(sep=" "),
                }
            )

    lines = [json.dumps(header or {"_header": {"provenance": config.provenance()}}, sort_keys=True)]
    lines += [json.dumps(p.to_dict(), sort_keys=True) for p in updated]
    atomic_write_text(proposals_path, "\n".join(lines) + "\n")

    log_path = os.path.join(config.out_dir, "executed_runtimes.jsonl")
    existing = []
    if os.path.exists(log_path):
        with open(log_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if rec.get("date") != day.isoformat():
                    existing.append(rec)
    all_records = existing + executed
    all_records.sort(key=lambda r: (r.get("date", ""), r.get("zone_id", "")))
    atomic_write_text(
        log_path, "\n".join(json.dumps(r, sort_keys=True) for r in all_records) + "\n"
    )
    print(f"committed {len(executed)} runtimes for {day.isoformat()} -> {log_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="soilpilot",
        description="Soil-moisture forecasting, fault screening and irrigation scheduling",
    )
    parser.add_argument("--config", help="TOML config file (flags override file values)")
    parser.add_argument("--seed", type=int, help="root seed for all randomness")
    parser.add_argument("--out-dir", help="artifact output directory")
    parser.add_argument("--dataset", help="dataset CSV (raw readings or hourly matrix)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="aggregate raw readings into the hourly matrix")
    p.add_argument("raw", help="raw readings CSV (timestamp,sensor_id,vwc)")
    p.add_argument("--stat", choices=["mean", "median"], default="mean")

    p = sub.add_parser("screen", help="run the fault screen over every sensor")
    p.add_argument("--end-slot", type=int, help="screen window end (default: dataset end)")
    p.add_argument("--rules-only", action="store_true", help="skip model-based detectors")

    sub.add_parser("mi-graph", help="compute the MI matrix, neighbour map and graph files")

    p = sub.add_parser("backup-sim", help="simulate an outage and run the virtual sensor")
    p.add_argument("--target", required=True)
    p.add_argument("--neighbour", help="backup source (default: top-1 by MI)")
    p.add_argument("--outage-start", required=True, help="slot index or ISO timestamp")
    p.add_argument("--outage-hours", type=int, required=True)

    p = sub.add_parser("forecast", help="write per-sensor forecasts from the window end")
    p.add_argument("--horizon", type=int, default=24)
    p.add_argument("--end-slot", type=int)
    p.add_argument("--svg-dir", help="also render one SVG chart per sensor")

    sub.add_parser("evaluate", help="rolling-origin evaluation of kNN vs the seasonal AR baseline")

    p = sub.add_parser("schedule", help="turn a forecasts file into sequenced proposals")
    p.add_argument("--day", required=True, help="scheduling day (YYYY-MM-DD)")
    p.add_argument("--forecasts", required=True, help="forecasts CSV from `forecast`")

    p = sub.add_parser("run-daily", help="the full 16:00 pipeline for one day")
    p.add_argument("--day", required=True, help="replay day (YYYY-MM-DD)")

    p = sub.add_parser("commit", help="record operator decisions and executed runtimes")
    p.add_argument("--day", required=True)
    p.add_argument("--proposals", help="proposals file (default: out/<day>/proposals.jsonl)")
    p.add_argument("--accept-all", action="store_true")
    p.add_argument("--accept", action="append", metavar="ZONE")
    p.add_argument("--override", action="append", metavar="ZONE=MINUTES")
    p.add_argument("--skip", action="append", metavar="ZONE")

    return parser


_HANDLERS = {
    "ingest": cmd_ingest,
    "screen": cmd_screen,
    "mi-graph": cmd_mi_graph,
    "backup-sim": cmd_backup_sim,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "schedule": cmd_schedule,
    "run-daily": cmd_run_daily,
    "commit": cmd_commit,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(
            args.config,
            overrides={
                "seed": args.seed,
                "out_dir": args.out_dir,
                "dataset": args.dataset,
            },
        )
    except (SoilPilotError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    try:
        return _HANDLERS[args.command](config, args)
    except (SoilPilotError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(args.command, 1)


if __name__ == "__main__":
    sys.exit(main())
