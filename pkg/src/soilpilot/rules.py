"""Rule-first screening of sensor windows.

Five cheap checks run before any model-based detector: missingness fraction,
long consecutive gaps, stuck-at (flat) spans, out-of-range values and spikes
against a centered moving median. Boundary semantics are strict inequalities
(more than 50 % missing, a gap over 72 h, change below 1 %). Every check is a
pure function of (series, config), so per-sensor screening is trivially
parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .data import SensorSeries, WindowSpec, atomic_write_text


class Rule(str, Enum):
    MISSINGNESS = "Missingness"
    LONG_GAP = "LongGap"
    STUCK_AT = "StuckAt"
    OUT_OF_RANGE = "OutOfRange"
    SPIKE = "Spike"
    IFOREST = "IForest"
    ARIMA = "Arima"


@dataclass(frozen=True)
class RuleConfig:
    """Thresholds for the five screening rules.

    ``valid_range_overrides`` lets individual sensors carry their own
    calibration bounds; everything else applies network-wide.
    """

    missing_frac_max: float = 0.5
    gap_hours_max: int = 72
    stuck_delta_pct: float = 1.0
    stuck_span_hours: int = 120
    valid_range: tuple[float, float] = (0.0, 100.0)
    valid_range_overrides: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    spike_median_window_hours: int = 24
    spike_threshold_pct: float = 5.0

    def __post_init__(self) -> None:
        if not 0 < self.missing_frac_max < 1:
            raise ValueError("missing_frac_max must be in (0, 1)")
        for name in ("gap_hours_max", "stuck_delta_pct", "stuck_span_hours",
                     "spike_median_window_hours", "spike_threshold_pct"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        for rng in (self.valid_range, *self.valid_range_overrides.values()):
            if rng[0] >= rng[1]:
                raise ValueError(f"valid range {rng} is not ordered")

    def range_for(self, sensor_id: str) -> tuple[float, float]:
        return self.valid_range_overrides.get(sensor_id, self.valid_range)


@dataclass(frozen=True)
class RuleHit:
    """Evidence for one fired rule: offending slot range and the statistic."""

    rule: Rule
    slots: tuple[int, int] | None
    stat: float | None
    detail: str

    def to_dict(self) -> dict:
        return {
            "rule": self.rule.value,
            "slots": list(self.slots) if self.slots is not None else None,
            "stat": self.stat,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class FaultVerdict:
    """Screening outcome for one sensor window; no hits means the sensor passes."""

    sensor_id: str
    window: WindowSpec | None
    hits: tuple[RuleHit, ...]

    @property
    def fired_rules(self) -> frozenset[Rule]:
        return frozenset(h.rule for h in self.hits)

    @property
    def faulty(self) -> bool:
        return bool(self.hits)

    def to_dict(self) -> dict:
        return {
            "sensor_id": self.sensor_id,
            "window": None
            if self.window is None
            else {"length_hours": self.window.length_hours, "end_slot": self.window.end_slot},
            "fired_rules": sorted(r.value for r in self.fired_rules),
            "evidence": [h.to_dict() for h in self.hits],
        }


def check_missingness(series: SensorSeries, config: RuleConfig) -> RuleHit | None:
    """Fires iff the missing fraction strictly exceeds ``missing_frac_max``."""
    if len(series) == 0:
        raise ValueError("empty series")
    frac = float(series.missing_mask.mean())
    if frac > config.missing_frac_max:
        return RuleHit(
            Rule.MISSINGNESS,
            (0, len(series)),
            frac,
            f"{frac:.3f} missing > {config.missing_frac_max}",
        )
    return None


def _missing_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, end) runs of consecutive True entries."""
    padded = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    starts = np.nonzero(padded == 1)[0]
    ends = np.nonzero(padded == -1)[0]
    return list(zip(starts.tolist(), ends.tolist()))


def check_long_gap(series: SensorSeries, config: RuleConfig) -> RuleHit | None:
    """Fires iff some run of consecutive missing slots exceeds ``gap_hours_max``."""
    runs = _missing_runs(series.missing_mask)
    if not runs:
        return None
    start, end = max(runs, key=lambda r: r[1] - r[0])
    longest = end - start
    if longest > config.gap_hours_max:
        return RuleHit(
            Rule.LONG_GAP,
            (start, end),
            float(longest),
            f"{longest}h gap > {config.gap_hours_max}h",
        )
    return None


def check_stuck_at(series: SensorSeries, config: RuleConfig) -> RuleHit | None:
    """Fires iff some full ``stuck_span_hours`` window drifts less than
    ``stuck_delta_pct`` (max-min over its non-missing values).

    Windows that are entirely missing are skipped; the missingness rules own
    that case.
    """
    span = config.stuck_span_hours
    n = len(series)
    if n < span:
        return None
    v = series.values
    # trailing rolling max/min over non-missing values; NaN when all missing
    s = pd.Series(v)
    rng = (s.rolling(span, min_periods=1).max() - s.rolling(span, min_periods=1).min()).to_numpy()
    candidates = np.nonzero(~np.isnan(rng[span - 1 :]) & (rng[span - 1 :] < config.stuck_delta_pct))[0]
    if len(candidates) == 0:
        return None
    end = int(candidates[0]) + span  # window is [end-span, end)
    return RuleHit(
        Rule.STUCK_AT,
        (end - span, end),
        float(rng[end - 1]),
        f"range {rng[end - 1]:.3f} < {config.stuck_delta_pct} over {span}h",
    )


def check_out_of_range(series: SensorSeries, config: RuleConfig) -> RuleHit | None:
    lo, hi = config.range_for(series.sensor_id)
    v = series.values
    bad = np.nonzero((v < lo) | (v > hi))[0]  # NaN compares false on both sides
    if len(bad) == 0:
        return None
    worst = bad[np.argmax(np.maximum(lo - v[bad], v[bad] - hi))]
    return RuleHit(
        Rule.OUT_OF_RANGE,
        (int(bad[0]), int(bad[-1]) + 1),
        float(v[worst]),
        f"{len(bad)} value(s) outside [{lo}, {hi}], worst {v[worst]:.2f}",
    )


def moving_median(values: np.ndarray, window_hours: int) -> np.ndarray:
    """Centered moving median over non-missing values, shrinking at the edges.

    The window at slot ``i`` spans ``[i-h, i+h]`` with ``h = window_hours // 2``
    (centering avoids the phase lag a trailing median would add on ramps).
    """
    n = len(values)
    half = window_hours // 2
    out = np.full(n, np.nan)
    for i in range(n):
        seg = values[max(0, i - half) : min(n, i + half + 1)]
        seg = seg[~np.isnan(seg)]
        if len(seg):
            out[i] = np.median(seg)
    return out


def check_spikes(series: SensorSeries, config: RuleConfig) -> RuleHit | None:
    """Fires iff any value deviates from the centered moving median by more
    than ``spike_threshold_pct``."""
    window = config.spike_median_window_hours
    if len(series) < window:
        raise ValueError(f"series of {len(series)} slots shorter than {window}h spike window")
    v = series.values
    med = moving_median(v, window)
    dev = np.abs(v - med)
    bad = np.nonzero(dev > config.spike_threshold_pct)[0]  # NaN values drop out
    if len(bad) == 0:
        return None
    worst = bad[np.argmax(dev[bad])]
    return RuleHit(
        Rule.SPIKE,
        (int(bad[0]), int(bad[-1]) + 1),
        float(dev[worst]),
        f"{len(bad)} spike(s), max deviation {dev[worst]:.2f} > {config.spike_threshold_pct}",
    )


_RULE_CHECKS = (
    check_missingness,
    check_long_gap,
    check_stuck_at,
    check_out_of_range,
    check_spikes,
)

DetectorHook = Callable[[SensorSeries], "Sequence[RuleHit]"]


def screen(
    series: SensorSeries,
    config: RuleConfig,
    window: WindowSpec | None = None,
    detectors: DetectorHook | None = None,
) -> FaultVerdict:
    """Run all five rules and union their outcomes.

    Model-based detectors (the ``detectors`` hook) only run when no rule
    fired: rules are cheaper, and a window a rule rejects is too corrupted to
    fit a detector on anyway.
    """
    hits = [h for check in _RULE_CHECKS if (h := check(series, config)) is not None]
    if not hits and detectors is not None:
        hits.extend(detectors(series))
    return FaultVerdict(series.sensor_id, window, tuple(hits))


def write_fault_log(
    path: str, verdicts: Sequence[FaultVerdict], header: Mapping | None = None
) -> None:
    """JSON-lines fault log; one record per verdict, optional header record."""
    lines = []
    if header is not None:
        lines.append(json.dumps({"_header": dict(header)}, sort_keys=True))
    for v in verdicts:
        lines.append(json.dumps(v.to_dict(), sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")
