"""Zone set-point generation and overnight sequencing.

A zone's moisture deficit is the gap between its target VWC and the mean of
its member sensors' 24 h forecast minima, converted to millimetres via the
zone's root-depth factor. Forecast rain is credited before converting to
runtime minutes through the catch-can application rate. Scheduling then
serialises zones sharing a main line into non-overlapping overnight windows
that avoid blackout periods; only one main line runs at a time, zones on
different lines may overlap.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime, time, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import SoilPilotError


@dataclass(frozen=True)
class ZoneConfig:
    """Static per-zone site data: membership, hydraulics and targets."""

    zone_id: str
    sensor_ids: tuple[str, ...]
    application_rate_mm_per_min: float  # from catch-can field tests
    target_vwc: float
    vwc_to_mm: float                    # mm of water per vwc-percent over root depth
    main_line: str
    max_runtime_min: int

    def __post_init__(self) -> None:
        if self.application_rate_mm_per_min <= 0:
            raise ValueError(f"{self.zone_id}: application rate must be positive")
        if not 0 < self.target_vwc < 100:
            raise ValueError(f"{self.zone_id}: target vwc must be in (0, 100)")
        if self.max_runtime_min <= 0:
            raise ValueError(f"{self.zone_id}: max runtime must be positive")
        if self.vwc_to_mm <= 0:
            raise ValueError(f"{self.zone_id}: vwc_to_mm must be positive")


@dataclass(frozen=True)
class BlackoutWindow:
    start: datetime
    end: datetime
    reason: str = ""

    def __post_init__(self) -> None:
        if self.end <= self.start:
            raise ValueError(f"blackout {self.start}..{self.end} is empty")


@dataclass(frozen=True)
class Proposal:
    """One zone's overnight runtime proposal with its derivation."""

    zone_id: str
    day: date
    runtime_minutes: int
    deficit_mm: float
    rain_credit_mm: float
    window_start: datetime | None = None
    window_end: datetime | None = None
    status: str = "proposed"  # proposed | accepted | overridden | skipped
    status_detail: str = ""
    flags: tuple[str, ...] = ()
    decided_at: datetime | None = None  # set when an operator accepts/overrides

    def to_dict(self) -> dict:
        return {
            "zone_id": self.zone_id,
            "date": self.day.isoformat(),
            "runtime_minutes": self.runtime_minutes,
            "deficit_mm": self.deficit_mm,
            "rain_credit_mm": self.rain_credit_mm,
            "window_start": self.window_start.isoformat(sep=" ") if self.window_start else None,
            "window_end": self.window_end.isoformat(sep=" ") if self.window_end else None,
            "status": self.status,
            "status_detail": self.status_detail,
            "flags": list(self.flags),
            "decided_at": self.decided_at.isoformat(sep=" ") if self.decided_at else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Proposal":
        return cls(
            zone_id=d["zone_id"],
            day=date.fromisoformat(d["date"]),
            runtime_minutes=int(d["runtime_minutes"]),
            deficit_mm=float(d["deficit_mm"]),
            rain_credit_mm=float(d["rain_credit_mm"]),
            window_start=datetime.fromisoformat(d["window_start"]) if d.get("window_start") else None,
            window_end=datetime.fromisoformat(d["window_end"]) if d.get("window_end") else None,
            status=d.get("status", "proposed"),
            status_detail=d.get("status_detail", ""),
            flags=tuple(d.get("flags", ())),
            decided_at=datetime.fromisoformat(d["decided_at"]) if d.get("decided_at") else None,
        )


def compute_deficit(
    zone: ZoneConfig, forecasts: Mapping[str, np.ndarray]
) -> tuple[float, float] | None:
    """Zone deficit in mm from the member sensors' forecast minima.

    The zone-level forecast is the mean over available members of each
    member's 24 h minimum forecast VWC; members without a forecast are simply
    left out. Returns (deficit_mm, zone_forecast_vwc), or None when no member
    has a forecast at all (the caller falls back to the last accepted runtime).
    """
    minima = []
    for sid in zone.sensor_ids:
        fc = forecasts.get(sid)
        if fc is None:
            continue
        fc = np.asarray(fc, dtype=float)
        if np.isfinite(fc).any():
            minima.append(float(np.nanmin(fc)))
    if not minima:
        return None
    zone_forecast = float(np.mean(minima))
    deficit = max(0.0, zone.target_vwc - zone_forecast) * zone.vwc_to_mm
    return deficit, zone_forecast


def rain_credit(deficit_mm: float, precip_forecast_mm: float) -> float:
    """Net deficit after crediting forecast precipitation over the coming 24 h."""
    if precip_forecast_mm < 0:
        raise ValueError("precipitation forecast must be >= 0")
    return max(0.0, deficit_mm - precip_forecast_mm)


def minutes_from_deficit(net_deficit_mm: float, zone: ZoneConfig) -> tuple[int, bool]:
    """Runtime minutes to supply the net deficit, capped at the zone maximum.

    Returns (minutes, capped).
    """
    minutes = math.ceil(net_deficit_mm / zone.application_rate_mm_per_min)
    if minutes > zone.max_runtime_min:
        return zone.max_runtime_min, True
    return max(0, minutes), False


def _free_segments(
    night: tuple[datetime, datetime], blackouts: Iterable[BlackoutWindow]
) -> list[list[int]]:
    """Non-blackout [start, end) minute intervals within the night span."""
    start, end = night
    total = int((end - start).total_seconds() // 60)
    if total <= 0:
        raise ValueError("empty night span")
    segments = [[0, total]]
    for b in sorted(blackouts, key=lambda b: b.start):
        b0 = max(0, int((b.start - start).total_seconds() // 60))
        b1 = min(total, int(math.ceil((b.end - start).total_seconds() / 60)))
        if b1 <= 0 or b0 >= total or b1 <= b0:
            continue
        nxt = []
        for s0, s1 in segments:
            if b1 <= s0 or b0 >= s1:
                nxt.append([s0, s1])
                continue
            if s0 < b0:
                nxt.append([s0, b0])
            if b1 < s1:
                nxt.append([b1, s1])
        segments = nxt
    return segments


@dataclass
class ScheduleResult:
    proposals: list[Proposal]
    overflow: list[dict] = field(default_factory=list)


def sequence_zones(
    proposals: Sequence[Proposal],
    zones: Mapping[str, ZoneConfig],
    blackouts: Iterable[BlackoutWindow],
    night: tuple[datetime, datetime],
) -> ScheduleResult:
    """Assign overnight windows: serialise per main line, avoid blackouts.

    When a line's demand exceeds its free capacity, runtimes are scaled down
    proportionally (floored) and flagged; zones that still cannot fit a
    contiguous window are truncated to the largest free slot. Anything left
    unscheduled lands in the overflow report.
    """
    blackouts = list(blackouts)
    by_line: dict[str, list[Proposal]] = {}
    passthrough: list[Proposal] = []
    for p in proposals:
        if p.status == "skipped" or p.runtime_minutes <= 0:
            passthrough.append(p)
            continue
        by_line.setdefault(zones[p.zone_id].main_line, []).append(p)

    night_start = night[0]
    scheduled: list[Proposal] = list(passthrough)
    overflow: list[dict] = []
    for line in sorted(by_line):
        line_props = by_line[line]
        segments = _free_segments(night, blackouts)
        capacity = sum(s1 - s0 for s0, s1 in segments)
        demand = sum(p.runtime_minutes for p in line_props)
        factor = capacity / demand if demand > capacity else 1.0
        for p in line_props:
            requested = p.runtime_minutes
            runtime = int(math.floor(requested * factor))
            flags = list(p.flags)
            if runtime < requested:
                flags.append("truncated-capacity")
            placed = False
            for seg in segments:
                if seg[1] - seg[0] >= runtime and runtime > 0:
                    w0, w1 = seg[0], seg[0] + runtime
                    seg[0] = w1
                    scheduled.append(
                        replace(
                            p,
                            runtime_minutes=runtime,
                            window_start=night_start + timedelta(minutes=w0),
                            window_end=night_start + timedelta(minutes=w1),
                            flags=tuple(flags),
                        )
                    )
                    placed = True
                    break
            if not placed:
                # largest remaining contiguous slot, if any
                best = max(segments, key=lambda s: s[1] - s[0], default=None)
                room = best[1] - best[0] if best else 0
                if room > 0 and runtime > 0:
                    w0, w1 = best[0], best[0] + min(room, runtime)
                    best[0] = w1
                    flags.append("truncated-fragmentation")
                    scheduled.append(
                        replace(
                            p,
                            runtime_minutes=w1 - w0,
                            window_start=night_start + timedelta(minutes=w0),
                            window_end=night_start + timedelta(minutes=w1),
                            flags=tuple(flags),
                        )
                    )
                    runtime = w1 - w0
                else:
                    scheduled.append(
                        replace(
                            p,
                            runtime_minutes=0,
                            status="skipped",
                            status_detail="no-capacity",
                            flags=tuple(flags),
                        )
                    )
                    runtime = 0
            if runtime < requested:
                overflow.append(
                    {
                        "zone_id": p.zone_id,
                        "main_line": line,
                        "requested_minutes": requested,
                        "scheduled_minutes": runtime,
                    }
                )
    scheduled.sort(key=lambda p: p.zone_id)
    return ScheduleResult(proposals=scheduled, overflow=overflow)


def night_span(day: date, start: time, end: time) -> tuple[datetime, datetime]:
    """Overnight window for a scheduling day; an end at or before the start
    time rolls into the next morning."""
    s = datetime.combine(day, start)
    e = datetime.combine(day if end > start else day + timedelta(days=1), end)
    return s, e


# ---------------------------------------------------------------------------
# site-config and forecast-input files
# ---------------------------------------------------------------------------


def load_zones(path: str) -> dict[str, ZoneConfig]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    zones = {}
    for d in raw:
        z = ZoneConfig(
            zone_id=d["zone_id"],
            sensor_ids=tuple(d["sensor_ids"]),
            application_rate_mm_per_min=float(d["application_rate_mm_per_min"]),
            target_vwc=float(d["target_vwc"]),
            vwc_to_mm=float(d["vwc_to_mm"]),
            main_line=str(d["main_line"]),
            max_runtime_min=int(d["max_runtime_min"]),
        )
        if z.zone_id in zones:
            raise SoilPilotError(f"duplicate zone {z.zone_id} in {path}")
        zones[z.zone_id] = z
    return zones


def load_precip(path: str) -> dict[date, float]:
    """CSV ``date,precip_mm_24h`` standing in for a weather-service feed."""
    out: dict[date, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["date", "precip_mm_24h"]:
            raise SoilPilotError(f"{path}: expected header date,precip_mm_24h")
        for row in reader:
            out[date.fromisoformat(row["date"].strip())] = float(row["precip_mm_24h"])
    return out
