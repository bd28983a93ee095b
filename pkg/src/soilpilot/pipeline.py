"""The 16:00 daily run.

One logical transaction per day: ingest the dataset up to the trigger hour,
screen every sensor (rules first, detectors only on rule-clean windows),
activate or refresh virtual sensors for faulty devices, forecast each sensor,
derive zone deficits, credit forecast rain, convert to runtime minutes,
sequence the overnight windows and write all artifacts atomically. Re-running
the same day overwrites the same outputs byte-for-byte: virtual-sensor state
is chained per day (a run reads the most recent state *before* its own day),
timestamps are logical (derived from the clock day), and all randomness comes
from named sub-streams of the config seed.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import date, datetime, time
from typing import Mapping

import numpy as np

from . import backup as vs
from .config import PipelineConfig
from .data import (
    SensorSeries,
    WindowSpec,
    atomic_write_text,
    infer_grid,
    load_hourly_csv,
    load_raw_csv,
    resample_hourly,
    trailing_window,
    write_hourly_csv,
)
from .detectors import model_screen
from .errors import ForecastError, InsufficientDataError, SoilPilotError
from .forecast import KnnConfig, fit_knn, forecast_knn
from .mutual_info import NeighbourMap, mi_matrix, top1_neighbours
from .rng import substream
from .rules import FaultVerdict, screen, write_fault_log
from .scheduler import (
    Proposal,
    compute_deficit,
    load_precip,
    load_zones,
    minutes_from_deficit,
    night_span,
    rain_credit,
    sequence_zones,
)

logger = logging.getLogger(__name__)

STAGES = (
    "ingest",
    "screen",
    "virtual-sensors",
    "forecast",
    "deficits",
    "rain-credit",
    "minutes",
    "sequence",
    "write",
)


@dataclass
class RunResult:
    day: date
    out_dir: str
    paths: dict[str, str]
    stages: list[str]
    partial: bool = False
    errors: list[str] = field(default_factory=list)
    verdicts: list[FaultVerdict] = field(default_factory=list)
    proposals: list[Proposal] = field(default_factory=list)


def load_dataset(path: str) -> dict[str, SensorSeries]:
    """Load either raw readings (resampled on the fly) or a wide hourly matrix."""
    first = ""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                first = line
                break
    if first.strip().startswith("timestamp,sensor_id,vwc"):
        readings, bad = load_raw_csv(path)
        if bad:
            logger.warning("%s: %d malformed rows skipped", path, len(bad))
        if not readings:
            raise SoilPilotError(f"{path}: no valid readings")
        return resample_hourly(readings, infer_grid(readings)).series
    return load_hourly_csv(path)


def _truncate(dataset: Mapping[str, SensorSeries], cutoff_slot: int) -> dict[str, SensorSeries]:
    return {
        sid: trailing_window(s, cutoff_slot, cutoff_slot) for sid, s in dataset.items()
    }


def _load_neighbours(config: PipelineConfig, dataset: Mapping[str, SensorSeries]) -> NeighbourMap:
    path = config.neighbours_path
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return NeighbourMap.from_dict(payload.get("neighbours", payload))
    logger.warning("neighbour map %s missing; computing once from the current dataset", path)
    matrix = mi_matrix(dataset, config.ksg)
    neighbours = top1_neighbours(matrix)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    atomic_write_text(
        path,
        json.dumps({"neighbours": neighbours.to_dict()}, sort_keys=True, indent=2) + "\n",
    )
    return neighbours


# --- per-day virtual-sensor state chain -----------------------------------


def _state_dir(config: PipelineConfig) -> str:
    return os.path.join(config.out_dir, "state")


def _load_prior_states(
    config: PipelineConfig, day: date
) -> dict[str, vs.VirtualSensorState]:
    """Latest persisted state strictly before ``day`` (so re-runs are stable)."""
    sdir = _state_dir(config)
    if not os.path.isdir(sdir):
        return {}
    days = sorted(
        d for d in (f[:-5] for f in os.listdir(sdir) if f.endswith(".json"))
        if d < day.isoformat()
    )
    if not days:
        return {}
    with open(os.path.join(sdir, f"{days[-1]}.json"), encoding="utf-8") as fh:
        raw = json.load(fh)
    states = {}
    for rec in raw.get("states", []):
        states[rec["target_id"]] = rec
    return states


def _revive_state(
    rec: Mapping,
    dataset: Mapping[str, SensorSeries],
    config: PipelineConfig,
) -> vs.VirtualSensorState | None:
    """Rebuild a persisted state; the model retrains deterministically."""
    if not rec.get("active"):
        return None
    target = dataset.get(rec["target_id"])
    neighbour = dataset.get(rec["neighbour_id"])
    if target is None or neighbour is None:
        return None
    model = None
    if not rec.get("unbacked") and rec.get("window_hours"):
        try:
            model = vs.train_backup(
                neighbour,
                target,
                WindowSpec(int(rec["window_hours"]), int(rec["activated_at"])),
                substream(config.seed, f"mlp/{rec['target_id']}"),
            )
        except (InsufficientDataError, SoilPilotError) as exc:
            logger.warning("%s: could not rebuild backup model: %s", rec["target_id"], exc)
            return vs.VirtualSensorState(
                target_id=rec["target_id"],
                neighbour_id=rec["neighbour_id"],
                active=True,
                activated_at=int(rec["activated_at"]),
                model=None,
                last_refresh=int(rec["last_refresh"]),
                unbacked=True,
            )
    return vs.VirtualSensorState(
        target_id=rec["target_id"],
        neighbour_id=rec["neighbour_id"],
        active=True,
        activated_at=int(rec["activated_at"]),
        model=model,
        last_refresh=int(rec["last_refresh"]),
        unbacked=bool(rec.get("unbacked")),
    )


def _fault_onset(verdict: FaultVerdict, window_start: int, cutoff: int) -> int:
    """Earliest evidenced fault slot in grid coordinates (conservative when a
    detector fired without slot evidence)."""
    starts = [window_start + h.slots[0] for h in verdict.hits if h.slots is not None]
    return min(starts) if starts else window_start


def _mask_evidence(
    series: SensorSeries, verdict: FaultVerdict, window_start: int
) -> SensorSeries:
    """Blank out the evidenced slot ranges so corrupted segments are never
    consumed downstream."""
    values = series.values.copy()
    for hit in verdict.hits:
        if hit.slots is None:
            continue
        a, b = window_start + hit.slots[0], window_start + hit.slots[1]
        values[max(0, a) : min(len(values), b)] = np.nan
    return series.with_values(values)


def run_daily(config: PipelineConfig, clock_day: date) -> RunResult:
    """Execute the full daily pipeline for one replay day."""
    stages: list[str] = []
    errors: list[str] = []
    day_dir = os.path.join(config.out_dir, clock_day.isoformat())
    os.makedirs(day_dir, exist_ok=True)
    os.makedirs(_state_dir(config), exist_ok=True)
    run_stamp = datetime.combine(clock_day, time(config.run_at_hour, 0))
    provenance = f"{config.provenance()} day={clock_day.isoformat()}"

    # ingest ----------------------------------------------------------------
    stages.append("ingest")
    dataset = load_dataset(config.dataset)
    if not dataset:
        raise SoilPilotError("dataset is empty")
    grid = next(iter(dataset.values())).grid
    cutoff = grid.slot_of(run_stamp)
    if cutoff > grid.n_slots:
        cutoff = grid.n_slots
    if cutoff < config.screen_window_hours:
        raise SoilPilotError(
            f"dataset holds {cutoff} slots before {run_stamp}; "
            f"need at least the {config.screen_window_hours}h screen window"
        )
    working = _truncate(dataset, cutoff)

    zones = load_zones(config.zones)
    precip_table = load_precip(config.precip) if config.precip else {}
    neighbours = _load_neighbours(config, working)

    # screen ------------------------------------------------------------------
    stages.append("screen")
    verdicts: list[FaultVerdict] = []
    window_start = cutoff - config.screen_window_hours
    spec = WindowSpec(config.screen_window_hours, cutoff)
    for sid in sorted(working):
        series = trailing_window(working[sid], config.screen_window_hours, cutoff)

        def detector_hook(win: SensorSeries, _sid=sid) -> list:
            return model_screen(win, config.detectors, substream(config.seed, f"iforest/{_sid}"))

        try:
            verdicts.append(screen(series, config.rules, window=spec, detectors=detector_hook))
        except (ValueError, SoilPilotError) as exc:
            errors.append(f"screen {sid}: {exc}")

    faulty = {v.sensor_id: v for v in verdicts if v.faulty}

    # virtual sensors ---------------------------------------------------------
    stages.append("virtual-sensors")
    events: list[dict] = []
    prior = _load_prior_states(config, clock_day)
    states: dict[str, vs.VirtualSensorState] = {}
    virtual_masks: dict[str, np.ndarray] = {}

    for sid, verdict in faulty.items():
        working[sid] = _mask_evidence(working[sid], verdict, window_start)

    for sid in sorted(set(faulty) | set(prior)):
        state = _revive_state(prior[sid], working, config) if sid in prior else None
        try:
            if state is not None:
                state = vs.refresh_daily(
                    state,
                    working,
                    cutoff,
                    substream(config.seed, f"mlp/{sid}"),
                    config.rules,
                )
                if not state.active:
                    events.append({"event": "backup-deactivated", "sensor_id": sid, "slot": cutoff})
                elif state.unbacked:
                    events.append(
                        {
                            "event": "backup-unbacked",
                            "sensor_id": sid,
                            "neighbour_id": state.neighbour_id,
                            "slot": cutoff,
                            "detail": "neighbour faulty; chaining forbidden",
                        }
                    )
            elif sid in faulty:
                state = _activate_for(sid, working, faulty[sid], neighbours, config, window_start, cutoff, events)
        except (InsufficientDataError, SoilPilotError, ValueError, KeyError) as exc:
            errors.append(f"virtual-sensor {sid}: {exc}")
            state = None
        if state is not None and state.active:
            states[sid] = state

    for sid, state in states.items():
        if state.unbacked or state.model is None:
            continue
        patched, mask = vs.fill_virtual(working[sid], working[state.neighbour_id], state)
        working[sid] = patched
        virtual_masks[sid] = mask

    # forecast ----------------------------------------------------------------
    stages.append("forecast")
    knn_cfg = config.knn
    forecasts: dict[str, np.ndarray] = {}
    for sid in sorted(working):
        window = trailing_window(working[sid], min(knn_cfg.window_hours, cutoff), cutoff)
        try:
            forecasts[sid] = forecast_knn(fit_knn(window, knn_cfg), config.horizon_hours)
        except (ForecastError, InsufficientDataError) as exc:
            logger.info("%s: no forecast today: %s", sid, exc)

    # deficits ------------------------------------------------------------
    stages.append("deficits")
    last_accepted = _load_last_accepted(config, clock_day)
    proposals: list[Proposal] = []
    deficits: dict[str, float] = {}
    for zone_id in sorted(zones):
        zone = zones[zone_id]
        try:
            result = compute_deficit(zone, forecasts)
        except Exception as exc:
            errors.append(f"deficit {zone_id}: {exc}")
            result = None
        if result is None:
            fallback = min(last_accepted.get(zone_id, 0), zone.max_runtime_min)
            proposals.append(
                Proposal(
                    zone_id=zone_id,
                    day=clock_day,
                    runtime_minutes=fallback,
                    deficit_mm=0.0,
                    rain_credit_mm=0.0,
                    status="proposed" if fallback else "skipped",
                    status_detail="no-data",
                    flags=("fallback-last-accepted",),
                )
            )
            continue
        deficits[zone_id] = result[0]

    # rain credit ---------------------------------------------------------
    stages.append("rain-credit")
    precip = float(precip_table.get(clock_day, 0.0))
    net: dict[str, float] = {}
    for zone_id, deficit in deficits.items():
        net[zone_id] = rain_credit(deficit, precip)

    # minutes ---------------------------------------------------------------
    stages.append("minutes")
    for zone_id, net_deficit in net.items():
        zone = zones[zone_id]
        minutes, capped = minutes_from_deficit(net_deficit, zone)
        proposals.append(
            Proposal(
                zone_id=zone_id,
                day=clock_day,
                runtime_minutes=minutes,
                deficit_mm=round(deficits[zone_id], 6),
                rain_credit_mm=round(min(precip, deficits[zone_id]), 6),
                flags=("capped",) if capped else (),
            )
        )

    # sequence ------------------------------------------------------------
    stages.append("sequence")
    night = night_span(clock_day, config.night_start, config.night_end)
    proposals.sort(key=lambda p: p.zone_id)
    schedule = sequence_zones(proposals, zones, config.blackouts, night)

    # write -----------------------------------------------------------------
    stages.append("write")
    paths = {
        "proposals": os.path.join(day_dir, "proposals.jsonl"),
        "fault_log": os.path.join(day_dir, "fault_log.jsonl"),
        "forecasts": os.path.join(day_dir, "forecasts.csv"),
        "hourly_matrix": os.path.join(day_dir, "hourly_matrix.csv"),
        "run_report": os.path.join(day_dir, "run_report.json"),
        "state": os.path.join(_state_dir(config), f"{clock_day.isoformat()}.json"),
    }
    header = {"provenance": provenance}

    lines = [json.dumps({"_header": header}, sort_keys=True)]
    lines += [json.dumps(p.to_dict(), sort_keys=True) for p in schedule.proposals]
    atomic_write_text(paths["proposals"], "\n".join(lines) + "\n")

    log_records = [v.to_dict() for v in verdicts if v.faulty] + events
    lines = [json.dumps({"_header": header}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in log_records]
    atomic_write_text(paths["fault_log"], "\n".join(lines) + "\n")

    fc_lines = [f"# {provenance}", "sensor_id,hour_offset,vwc_pct"]
    for sid in sorted(forecasts):
        for h, v in enumerate(forecasts[sid], start=1):
            fc_lines.append(f"{sid},{h},{repr(float(v))}")
    atomic_write_text(paths["forecasts"], "\n".join(fc_lines) + "\n")

    write_hourly_csv(paths["hourly_matrix"], working, virtual_masks or None, provenance)

    state_payload = {
        "day": clock_day.isoformat(),
        "states": [states[sid].to_dict() for sid in sorted(states)],
    }
    atomic_write_text(paths["state"], json.dumps(state_payload, sort_keys=True, indent=2) + "\n")

    report = {
        "day": clock_day.isoformat(),
        "provenance": provenance,
        "stages": stages,
        "partial": bool(errors),
        "errors": errors,
        "overflow": schedule.overflow,
        "n_sensors": len(working),
        "n_faulty": len(faulty),
        "n_forecasts": len(forecasts),
        "precip_mm": precip,
        "virtual_active": sorted(states),
    }
    atomic_write_text(paths["run_report"], json.dumps(report, sort_keys=True, indent=2) + "\n")

    return RunResult(
        day=clock_day,
        out_dir=day_dir,
        paths=paths,
        stages=stages,
        partial=bool(errors),
        errors=errors,
        verdicts=verdicts,
        proposals=schedule.proposals,
    )


def _activate_for(
    sid: str,
    working: Mapping[str, SensorSeries],
    verdict: FaultVerdict,
    neighbours: NeighbourMap,
    config: PipelineConfig,
    window_start: int,
    cutoff: int,
    events: list[dict],
) -> vs.VirtualSensorState | None:
    backup_ref = neighbours.backup_for(sid)
    onset = _fault_onset(verdict, window_start, cutoff)
    if backup_ref is None:
        events.append(
            {
                "event": "backup-unavailable",
                "sensor_id": sid,
                "slot": cutoff,
                "detail": "no estimable neighbour in the MI map",
            }
        )
        return vs.VirtualSensorState(
            target_id=sid, neighbour_id="", active=True, activated_at=onset,
            model=None, last_refresh=cutoff, unbacked=True,
        )
    neighbour_id, _ = backup_ref
    window_hours = min(config.backup_window_hours, onset)
    if window_hours < 200:
        events.append(
            {
                "event": "backup-unavailable",
                "sensor_id": sid,
                "slot": cutoff,
                "detail": f"only {onset} pre-fault slots; need 200",
            }
        )
        return vs.VirtualSensorState(
            target_id=sid, neighbour_id=neighbour_id, active=True, activated_at=onset,
            model=None, last_refresh=cutoff, unbacked=True,
        )
    model = vs.train_backup(
        working[neighbour_id],
        working[sid],
        WindowSpec(window_hours, onset),
        substream(config.seed, f"mlp/{sid}"),
    )
    events.append(
        {
            "event": "backup-activated",
            "sensor_id": sid,
            "neighbour_id": neighbour_id,
            "slot": cutoff,
            "fault_onset": onset,
            "train_mae": round(model.train_mae, 6),
        }
    )
    return vs.VirtualSensorState(
        target_id=sid,
        neighbour_id=neighbour_id,
        active=True,
        activated_at=onset,
        model=model,
        last_refresh=cutoff,
    )


def _load_last_accepted(config: PipelineConfig, before_day: date) -> dict[str, int]:
    """Most recent accepted/overridden runtime per zone from the executed log."""
    path = os.path.join(config.out_dir, "executed_runtimes.jsonl")
    if not os.path.exists(path):
        return {}
    best: dict[str, tuple[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "_header" in rec:
                continue
            if rec.get("status") not in ("accepted", "overridden"):
                continue
            day = rec.get("date", "")
            if day >= before_day.isoformat():
                continue
            zone = rec["zone_id"]
            if zone not in best or day > best[zone][0]:
                best[zone] = (day, int(rec["runtime_minutes"]))
    return {zone: minutes for zone, (_, minutes) in best.items()}
