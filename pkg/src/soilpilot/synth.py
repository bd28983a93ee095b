"""Deterministic synthetic replay corpus.

The public replay dataset (13 sensors, hourly VWC, 1,528 slots from
2022-11-15 00:00) is not redistributed with this package; this module builds
a stand-in with the same shape so the full pipeline can be exercised
end-to-end offline. Sensors are grouped into irrigation zones that share a
base signal (slow drying, overnight irrigation re-wets, occasional rain,
diurnal cycle); each sensor adds its own gain, offset and mildly
autocorrelated noise. Everything is pinned by one seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .data import RAW_HEADER, SensorSeries, TimeGrid, atomic_write_text

CORPUS_START = datetime(2022, 11, 15, 0, 0)
CORPUS_SLOTS = 1528
DEFAULT_SEED = 20221115

ZONE_SENSORS = {
    "zone-east": ("SENS0001", "SENS0002", "SENS0003", "SENS0004"),
    "zone-north": ("SENS0005", "SENS0006", "SENS0007", "SENS0008"),
    "zone-south": ("SENS0009", "SENS0010", "SENS0011"),
    "zone-west": ("SENS0012", "SENS0021"),
}

ZONE_LINES = {
    "zone-east": "main-1",
    "zone-north": "main-1",
    "zone-south": "main-2",
    "zone-west": "main-2",
}


def corpus_grid() -> TimeGrid:
    return TimeGrid(CORPUS_START, CORPUS_SLOTS)


@dataclass
class CorpusMeta:
    """Event bookkeeping so tests can pick quiet or busy replay days."""

    irrigation_slots: dict[str, list[int]] = field(default_factory=dict)
    rain_slots: list[int] = field(default_factory=list)

    def event_slots(self) -> set[int]:
        out = set(self.rain_slots)
        for slots in self.irrigation_slots.values():
            out.update(slots)
        return out


def make_corpus(seed: int = DEFAULT_SEED) -> tuple[dict[str, SensorSeries], CorpusMeta]:
    """13 correlated sensor series on the 1,528-slot hourly grid, no gaps."""
    rng = np.random.default_rng(seed)
    grid = corpus_grid()
    n = grid.n_slots
    t = np.arange(n, dtype=float)
    meta = CorpusMeta()

    rain = np.zeros(n)
    for day in range(n // 24):
        if rng.random() < 0.06:
            slot = day * 24 + int(rng.integers(0, 24))
            rain[slot] = rng.uniform(1.5, 3.5)
            meta.rain_slots.append(slot)

    dataset: dict[str, SensorSeries] = {}
    for gi, (zone, sensors) in enumerate(ZONE_SENSORS.items()):
        level0 = rng.uniform(24.0, 30.0)
        decay = rng.uniform(0.0020, 0.0035)
        floor = rng.uniform(12.0, 16.0)
        amp = rng.uniform(0.8, 1.1)
        phase = rng.uniform(0.0, 24.0)
        irrig_period = int(rng.integers(72, 97))
        irrig_hour = (23 + 3 * gi) % 24

        level = np.empty(n)
        level[0] = level0
        for i in range(1, n):
            level[i] = min(level[i - 1] + (floor - level[i - 1]) * decay + rain[i], 36.0)

        meta.irrigation_slots[zone] = []
        i = int(rng.integers(24, 24 + irrig_period))
        while i < n:
            j = i - (i % 24) + irrig_hour
            if 0 < j < n:
                bump = float(rng.uniform(2.0, 4.0))
                level[j:] += bump * np.exp(-decay * (t[j:] - t[j]))
                meta.irrigation_slots[zone].append(j)
            i += irrig_period
        level = np.minimum(level, 38.0)
        base = level + amp * np.sin(2.0 * np.pi * (t - phase) / 24.0)

        for sid in sensors:
            gain = rng.uniform(0.92, 1.08)
            offset = rng.uniform(-2.0, 2.0)
            e = rng.normal(0.0, 0.10, n)
            noise = np.empty(n)
            noise[0] = e[0]
            for i in range(1, n):
                noise[i] = 0.2 * noise[i - 1] + e[i]
            dataset[sid] = SensorSeries(sid, grid, np.clip(gain * base + offset + noise, 0.5, 99.5))
    return dataset, meta


def write_raw_csv(
    path: str,
    dataset: dict[str, SensorSeries],
    readings_per_hour: int = 6,
    seed: int = DEFAULT_SEED,
) -> int:
    """Expand the hourly corpus back into raw sub-hourly readings.

    Each slot gets ``readings_per_hour`` samples whose offsets sum to zero, so
    hourly mean-resampling reproduces the matrix. Returns the reading count.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5261772D]))
    lines = [",".join(RAW_HEADER)]
    count = 0
    minutes = [int(m) for m in np.linspace(0, 50, readings_per_hour)]
    for sid in sorted(dataset):
        series = dataset[sid]
        for slot in range(len(series)):
            v = series.values[slot]
            if np.isnan(v):
                continue
            offsets = rng.normal(0.0, 0.25, readings_per_hour)
            offsets -= offsets.mean()
            base_ts = series.grid.slot_time(slot)
            for m, d in zip(minutes, offsets):
                ts = base_ts + timedelta(minutes=m)
                lines.append(f"{ts.isoformat(sep=' ')},{sid},{repr(float(v + d))}")
                count += 1
    atomic_write_text(path, "\n".join(lines) + "\n")
    return count


def write_zones_json(path: str, seed: int = DEFAULT_SEED) -> None:
    """Plausible per-zone site data for the synthetic corpus."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A6F6E65]))
    zones = []
    for zone, sensors in ZONE_SENSORS.items():
        zones.append(
            {
                "zone_id": zone,
                "sensor_ids": list(sensors),
                "application_rate_mm_per_min": round(float(rng.uniform(0.3, 0.7)), 3),
                "target_vwc": round(float(rng.uniform(24.0, 28.0)), 1),
                "vwc_to_mm": round(float(rng.uniform(1.2, 1.8)), 2),
                "main_line": ZONE_LINES[zone],
                "max_runtime_min": 90,
            }
        )
    atomic_write_text(path, json.dumps(zones, indent=2, sort_keys=True) + "\n")


def write_precip_csv(path: str, seed: int = DEFAULT_SEED) -> None:
    """Daily 24 h precipitation forecasts over the corpus span (mostly dry)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7261696E]))
    grid = corpus_grid()
    lines = ["date,precip_mm_24h"]
    day = grid.start.date()
    end = grid.end.date()
    while day <= end:
        mm = round(float(rng.uniform(1.0, 8.0)), 1) if rng.random() < 0.12 else 0.0
        lines.append(f"{day.isoformat()},{mm}")
        day += timedelta(days=1)
    atomic_write_text(path, "\n".join(lines) + "\n")
