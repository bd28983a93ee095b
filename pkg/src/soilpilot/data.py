"""Canonical data model and dataset I/O.

Raw readings are aggregated onto a shared hourly grid; each sensor becomes an
immutable :class:`SensorSeries` whose missing slots are encoded as NaN. Slot
assignment is half-open ``[t, t+1h)`` on hour boundaries, timestamps are taken
as a uniform local-naive clock, and aggregation defaults to the arithmetic
mean (median available as an alternative). Missing values are never imputed
here; that is the virtual-sensor layer's job.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, Mapping

import numpy as np

from .errors import SoilPilotError

HOUR = timedelta(hours=1)

WINDOW_MIN_HOURS = 200
WINDOW_MAX_HOURS = 900

RAW_HEADER = ["timestamp", "sensor_id", "vwc"]


@dataclass(frozen=True)
class RawReading:
    """One raw sensor observation (volumetric water content, percent)."""

    sensor_id: str
    timestamp: datetime
    vwc: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.vwc):
            raise ValueError(f"non-finite vwc for {self.sensor_id} at {self.timestamp}")


@dataclass(frozen=True)
class TimeGrid:
    """Consecutive hourly slots starting on an hour boundary."""

    start: datetime
    n_slots: int

    def __post_init__(self) -> None:
        if self.start.minute or self.start.second or self.start.microsecond:
            raise ValueError(f"grid start {self.start} is not aligned to the hour")
        if self.n_slots < 1:
            raise ValueError("grid needs at least one slot")

    @property
    def end(self) -> datetime:
        """Exclusive end of the last slot."""
        return self.start + self.n_slots * HOUR

    def slot_time(self, slot: int) -> datetime:
        return self.start + slot * HOUR

    def slot_of(self, ts: datetime) -> int:
        """Slot index whose half-open hour contains ``ts`` (may be out of range)."""
        return (ts - self.start) // HOUR

    def contains(self, ts: datetime) -> bool:
        return 0 <= self.slot_of(ts) < self.n_slots

    def hour_of_day(self, slot: int) -> int:
        return (self.start.hour + slot) % 24


@dataclass(frozen=True)
class SensorSeries:
    """One sensor's hourly values on a grid; NaN marks a missing slot."""

    sensor_id: str
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or len(arr) != self.grid.n_slots:
            raise ValueError(
                f"{self.sensor_id}: {arr.shape} values for {self.grid.n_slots} slots"
            )
        if np.isinf(arr).any():
            raise ValueError(f"{self.sensor_id}: non-finite (non-NaN) values present")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.grid.n_slots

    @property
    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def n_missing(self) -> int:
        return int(self.missing_mask.sum())

    def with_values(self, values: np.ndarray) -> "SensorSeries":
        return SensorSeries(self.sensor_id, self.grid, values)


@dataclass(frozen=True)
class WindowSpec:
    """A rolling training window: ``length_hours`` slots ending at ``end_slot``."""

    length_hours: int
    end_slot: int

    def __post_init__(self) -> None:
        if not WINDOW_MIN_HOURS <= self.length_hours <= WINDOW_MAX_HOURS:
            raise ValueError(
                f"window length {self.length_hours} outside "
                f"[{WINDOW_MIN_HOURS}, {WINDOW_MAX_HOURS}]"
            )
        if self.end_slot - self.length_hours < 0:
            raise ValueError(
                f"window of {self.length_hours}h cannot end at slot {self.end_slot}"
            )

    @property
    def start_slot(self) -> int:
        return self.end_slot - self.length_hours


@dataclass
class ResampleResult:
    """Hourly series per sensor plus indices of readings outside the grid span."""

    series: dict[str, SensorSeries]
    rejected: list[int] = field(default_factory=list)


def resample_hourly(
    readings: Iterable[RawReading], grid: TimeGrid, stat: str = "mean"
) -> ResampleResult:
    """Aggregate raw readings into hourly slots.

    Each slot's value is the ``stat`` ("mean" or "median") of the readings whose
    timestamp falls in ``[slot, slot+1h)``; slots with no readings stay missing.
    Readings outside the grid span are dropped and reported by input index.
    """
    readings = list(readings)
    if not readings:
        raise ValueError("no readings to resample")
    if stat not in ("mean", "median"):
        raise ValueError(f"unknown aggregation stat {stat!r}")

    slots_by_sensor: dict[str, list[int]] = {}
    vals_by_sensor: dict[str, list[float]] = {}
    rejected: list[int] = []
    for i, r in enumerate(readings):
        slot = grid.slot_of(r.timestamp)
        if not 0 <= slot < grid.n_slots:
            rejected.append(i)
            continue
        slots_by_sensor.setdefault(r.sensor_id, []).append(slot)
        vals_by_sensor.setdefault(r.sensor_id, []).append(r.vwc)

    series: dict[str, SensorSeries] = {}
    n = grid.n_slots
    for sensor_id in sorted(slots_by_sensor):
        slots = np.asarray(slots_by_sensor[sensor_id], dtype=np.intp)
        vals = np.asarray(vals_by_sensor[sensor_id], dtype=np.float64)
        out = np.full(n, np.nan)
        if stat == "mean":
            sums = np.zeros(n)
            counts = np.zeros(n)
            np.add.at(sums, slots, vals)
            np.add.at(counts, slots, 1.0)
            filled = counts > 0
            out[filled] = sums[filled] / counts[filled]
        else:
            order = np.argsort(slots, kind="stable")
            sorted_slots = slots[order]
            sorted_vals = vals[order]
            uniq, starts = np.unique(sorted_slots, return_index=True)
            bounds = np.append(starts, len(sorted_vals))
            for j, slot in enumerate(uniq):
                out[slot] = np.median(sorted_vals[bounds[j] : bounds[j + 1]])
        series[sensor_id] = SensorSeries(sensor_id, grid, out)
    return ResampleResult(series=series, rejected=rejected)


def seasonal_difference(series: SensorSeries, lag_hours: int) -> SensorSeries:
    """``out[i] = x[i] - x[i - lag]``; the first ``lag`` slots (and any slot with
    a missing operand) come out missing."""
    if lag_hours < 1:
        raise ValueError("lag must be >= 1 hour")
    if lag_hours >= len(series):
        raise ValueError(f"lag {lag_hours} >= series length {len(series)}")
    v = series.values
    out = np.full_like(v, np.nan)
    out[lag_hours:] = v[lag_hours:] - v[:-lag_hours]
    return series.with_values(out)


def slice_window(series: SensorSeries, spec: WindowSpec) -> SensorSeries:
    """Contiguous sub-series of exactly ``spec.length_hours`` slots ending at
    ``spec.end_slot`` (exclusive), on its own shifted grid."""
    if spec.end_slot > series.grid.n_slots:
        raise ValueError(
            f"window end {spec.end_slot} beyond series of {series.grid.n_slots} slots"
        )
    start = spec.start_slot
    sub_grid = TimeGrid(series.grid.slot_time(start), spec.length_hours)
    return SensorSeries(series.sensor_id, sub_grid, series.values[start : spec.end_slot])


def trailing_window(series: SensorSeries, length_hours: int, end_slot: int) -> SensorSeries:
    """Like :func:`slice_window` but without the [200, 900] length constraint."""
    if length_hours < 1 or end_slot - length_hours < 0 or end_slot > len(series):
        raise ValueError(f"bad trailing window ({length_hours}h ending {end_slot})")
    start = end_slot - length_hours
    sub_grid = TimeGrid(series.grid.slot_time(start), length_hours)
    return SensorSeries(series.sensor_id, sub_grid, series.values[start:end_slot])


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------


def atomic_write_text(path: str, text: str) -> None:
    """Write-temp-then-rename so partially written artifacts never appear."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _format_value(x: float) -> str:
    if math.isnan(x):
        return ""
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def load_raw_csv(path: str) -> tuple[list[RawReading], list[tuple[int, str]]]:
    """Read a ``timestamp,sensor_id,vwc`` CSV.

    Returns the parsed readings and a list of ``(line_number, reason)`` for
    rows that could not be parsed. Raises on a missing or wrong header.
    """
    readings: list[RawReading] = []
    bad: list[tuple[int, str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SoilPilotError(f"{path}: empty file") from None
        if [h.strip() for h in header] != RAW_HEADER:
            raise SoilPilotError(f"{path}: expected header {','.join(RAW_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                bad.append((line_no, f"expected 3 fields, got {len(row)}"))
                continue
            try:
                ts = datetime.fromisoformat(row[0].strip())
                vwc = float(row[2])
                readings.append(RawReading(row[1].strip(), ts, vwc))
            except (ValueError, TypeError) as exc:
                bad.append((line_no, str(exc)))
    return readings, bad


def infer_grid(readings: Iterable[RawReading]) -> TimeGrid:
    """Smallest hourly grid covering every reading."""
    readings = list(readings)
    if not readings:
        raise ValueError("cannot infer a grid from zero readings")
    lo = min(r.timestamp for r in readings)
    hi = max(r.timestamp for r in readings)
    start = lo.replace(minute=0, second=0, microsecond=0)
    n_slots = (hi - start) // HOUR + 1
    return TimeGrid(start, n_slots)


def load_hourly_csv(path: str) -> dict[str, SensorSeries]:
    """Read a wide hourly matrix CSV (``timestamp,<id>,...``); empty cells are
    missing. Rows must be consecutive hourly timestamps."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise SoilPilotError(f"{path}: empty file")
    header = rows[0]
    if header[0].strip() != "timestamp" or len(header) < 2:
        raise SoilPilotError(f"{path}: expected 'timestamp,<sensor_id>,...' header")
    sensor_ids = [h.strip() for h in header[1:]]
    data_rows = rows[1:]
    if not data_rows:
        raise SoilPilotError(f"{path}: header but no rows")
    start = datetime.fromisoformat(data_rows[0][0])
    grid = TimeGrid(start.replace(minute=0, second=0, microsecond=0), len(data_rows))
    cols = np.full((len(data_rows), len(sensor_ids)), np.nan)
    for i, row in enumerate(data_rows):
        ts = datetime.fromisoformat(row[0])
        if grid.slot_of(ts) != i:
            raise SoilPilotError(f"{path}: row {i + 2} timestamp {row[0]} breaks the hourly grid")
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell:
                cols[i, j] = float(cell)
    return {
        sid: SensorSeries(sid, grid, cols[:, j]) for j, sid in enumerate(sensor_ids)
    }


def write_hourly_csv(
    path: str,
    dataset: Mapping[str, SensorSeries],
    virtual_mask: Mapping[str, np.ndarray] | None = None,
    header_comment: str | None = None,
) -> None:
    """Write the wide hourly matrix, bit-stable for identical input.

    Columns are sorted by sensor id; when ``virtual_mask`` is given, a
    ``<id>.virtual`` 0/1 provenance column follows each flagged sensor.
    """
    if not dataset:
        raise ValueError("empty dataset")
    sensor_ids = sorted(dataset)
    grid = dataset[sensor_ids[0]].grid
    for sid in sensor_ids:
        if dataset[sid].grid != grid:
            raise ValueError(f"{sid}: all series must share one grid")
    flagged = sorted(virtual_mask) if virtual_mask else []
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    header = ["timestamp"]
    for sid in sensor_ids:
        header.append(sid)
        if sid in flagged:
            header.append(f"{sid}.virtual")
    lines.append(",".join(header))
    for i in range(grid.n_slots):
        row = [grid.slot_time(i).isoformat(sep=" ")]
        for sid in sensor_ids:
            row.append(_format_value(dataset[sid].values[i]))
            if sid in flagged:
                row.append("1" if virtual_mask[sid][i] else "0")
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")
