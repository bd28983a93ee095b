"""Virtual sensor: a small MLP that stands in for a failed device.

On fault activation, a one-hidden-layer network (10 ReLU units) is trained to
map the most informative neighbour's stream to the failed target, using the
recent joint history before the fault. Training is full-batch gradient
descent with momentum on min-max-scaled pairs; everything is seed-pinned, so
the same (series, window, seed) always yields identical weights. The backup
input is always a physical sensor's stream, never another virtual stream:
no chaining.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .data import SensorSeries, WindowSpec, slice_window, trailing_window
from .errors import DegenerateDataError, InsufficientDataError
from .rules import RuleConfig, screen

logger = logging.getLogger(__name__)

HIDDEN_UNITS = 10
VWC_MIN, VWC_MAX = 0.0, 100.0


@dataclass(frozen=True)
class ScalerParams:
    """Min-max bounds of the training window, for input/output normalisation."""

    in_min: float
    in_max: float
    out_min: float
    out_max: float

    def __post_init__(self) -> None:
        if not (self.in_max > self.in_min and self.out_max > self.out_min):
            raise DegenerateDataError("degenerate scaler: constant training data")

    def scale_in(self, x: np.ndarray) -> np.ndarray:
        return (x - self.in_min) / (self.in_max - self.in_min)

    def unscale_out(self, y: np.ndarray) -> np.ndarray:
        return y * (self.out_max - self.out_min) + self.out_min


@dataclass(frozen=True)
class MlpBackup:
    """Trained neighbour->target regressor (1 input, 10 ReLU units, 1 output)."""

    target_id: str
    neighbour_id: str
    trained_on: WindowSpec
    scaler: ScalerParams
    w_in: np.ndarray   # (10,)
    b_in: np.ndarray   # (10,)
    w_out: np.ndarray  # (10,)
    b_out: float
    train_mae: float

    def __post_init__(self) -> None:
        if self.w_in.shape != (HIDDEN_UNITS,):
            raise ValueError(f"expected {HIDDEN_UNITS} hidden units")
        for arr in (self.w_in, self.b_in, self.w_out):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite weights")

    def _forward(self, x_scaled: np.ndarray) -> np.ndarray:
        hidden = np.maximum(np.outer(x_scaled, self.w_in) + self.b_in, 0.0)
        return hidden @ self.w_out + self.b_out


def train_backup(
    neighbour: SensorSeries,
    target: SensorSeries,
    window: WindowSpec,
    seed: int | np.random.Generator,
    *,
    epochs: int = 2000,
    learning_rate: float = 0.01,
    momentum: float = 0.9,
    min_joint_samples: int = 50,
    min_target_coverage: float = 0.8,
) -> MlpBackup:
    """Fit the backup MLP on the window's jointly observed (neighbour, target)
    pairs.

    The target must cover at least 80 % of the window (training needs
    pre-fault target history); neighbour gaps are dropped pairwise. Min-max
    scaling to [0, 1] plus a fixed full-batch recipe keeps the fit stable and
    reproducible without an optimiser dependency.
    """
    if neighbour.sensor_id == target.sensor_id:
        raise ValueError("a sensor cannot back itself up")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = slice_window(neighbour, window).values
    y = slice_window(target, window).values
    target_cover = float(np.isfinite(y).mean())
    if target_cover < min_target_coverage:
        raise InsufficientDataError(
            f"target covers {target_cover:.0%} of window < {min_target_coverage:.0%}"
        )
    ok = np.isfinite(x) & np.isfinite(y)
    if int(ok.sum()) < min_joint_samples:
        raise InsufficientDataError(f"{int(ok.sum())} joint samples < {min_joint_samples}")
    x, y = x[ok], y[ok]
    scaler = ScalerParams(float(x.min()), float(x.max()), float(y.min()), float(y.max()))
    xs = scaler.scale_in(x)
    ys = (y - scaler.out_min) / (scaler.out_max - scaler.out_min)

    h = HIDDEN_UNITS
    w1 = rng.uniform(-0.5, 0.5, h)
    b1 = rng.uniform(-0.5, 0.5, h)
    w2 = rng.uniform(-0.5, 0.5, h)
    b2 = float(rng.uniform(-0.5, 0.5))
    vw1 = np.zeros(h); vb1 = np.zeros(h); vw2 = np.zeros(h); vb2 = 0.0
    n = len(xs)
    for _ in range(epochs):
        pre = np.outer(xs, w1) + b1
        hid = np.maximum(pre, 0.0)
        err = hid @ w2 + b2 - ys
        gw2 = 2.0 * (hid.T @ err) / n
        gb2 = 2.0 * float(err.mean())
        dh = np.outer(err, w2) * (pre > 0)
        gw1 = 2.0 * (dh.T @ xs) / n
        gb1 = 2.0 * dh.mean(axis=0)
        vw1 = momentum * vw1 - learning_rate * gw1; w1 = w1 + vw1
        vb1 = momentum * vb1 - learning_rate * gb1; b1 = b1 + vb1
        vw2 = momentum * vw2 - learning_rate * gw2; w2 = w2 + vw2
        vb2 = momentum * vb2 - learning_rate * gb2; b2 = b2 + vb2

    model = MlpBackup(
        target_id=target.sensor_id,
        neighbour_id=neighbour.sensor_id,
        trained_on=window,
        scaler=scaler,
        w_in=w1, b_in=b1, w_out=w2, b_out=b2,
        train_mae=0.0,
    )
    fitted = scaler.unscale_out(model._forward(xs))
    return replace(model, train_mae=float(np.abs(fitted - y).mean()))


def predict_backup(model: MlpBackup, neighbour_value: float | np.ndarray):
    """Scale, forward pass, inverse-scale, clamp to the valid VWC range.

    A missing neighbour value yields a missing output; downstream consumers
    treat that slot as unavailable and fall back.
    """
    arr = np.atleast_1d(np.asarray(neighbour_value, dtype=np.float64))
    out = np.full_like(arr, np.nan)
    ok = np.isfinite(arr)
    if ok.any():
        raw = model.scaler.unscale_out(model._forward(model.scaler.scale_in(arr[ok])))
        out[ok] = np.clip(raw, VWC_MIN, VWC_MAX)
    if np.isscalar(neighbour_value) or np.ndim(neighbour_value) == 0:
        return float(out[0])
    return out


@dataclass(frozen=True)
class VirtualSensorState:
    """Lifecycle of one virtual sensor, from activation to restoration."""

    target_id: str
    neighbour_id: str
    active: bool
    activated_at: int          # slot index of fault detection
    model: MlpBackup | None
    last_refresh: int
    unbacked: bool = False     # neighbour itself failed; no chaining allowed

    def __post_init__(self) -> None:
        if self.active and not self.unbacked and self.model is None:
            raise ValueError("active virtual sensor must carry a model")

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "neighbour_id": self.neighbour_id,
            "active": self.active,
            "activated_at": self.activated_at,
            "last_refresh": self.last_refresh,
            "unbacked": self.unbacked,
            "window_hours": self.model.trained_on.length_hours if self.model else None,
        }


def activate(
    target: SensorSeries,
    neighbour: SensorSeries,
    fault_slot: int,
    window_hours: int,
    seed: int | np.random.Generator,
) -> VirtualSensorState:
    """Train the backup on the window ending at the fault and mark it active."""
    window = WindowSpec(length_hours=window_hours, end_slot=fault_slot)
    model = train_backup(neighbour, target, window, seed)
    return VirtualSensorState(
        target_id=target.sensor_id,
        neighbour_id=neighbour.sensor_id,
        active=True,
        activated_at=fault_slot,
        model=model,
        last_refresh=fault_slot,
    )


def refresh_daily(
    state: VirtualSensorState,
    dataset: Mapping[str, SensorSeries],
    day_slot: int,
    seed: int | np.random.Generator,
    rule_config: RuleConfig | None = None,
    restore_window_hours: int = 200,
) -> VirtualSensorState:
    """Daily maintenance of an active virtual sensor.

    Deactivates once the physical target reports fresh data that passes the
    rule screen (its most recent day fully present). If the neighbour itself
    has gone faulty the state is marked unbacked and escalated rather than
    chained onto another virtual stream. Otherwise the model is retrained on
    the window ending at activation: target history is frozen at fault time,
    while the neighbour's live history keeps extending for prediction.
    """
    if not state.active:
        raise ValueError(f"{state.target_id}: refresh on an inactive virtual sensor")
    rule_config = rule_config or RuleConfig()
    target = dataset[state.target_id]
    neighbour = dataset[state.neighbour_id]

    probe_len = min(restore_window_hours, day_slot)
    target_probe = trailing_window(target, probe_len, day_slot)
    fresh_day = np.isfinite(target_probe.values[-24:]).all() if probe_len >= 24 else False
    if fresh_day and not screen(target_probe, rule_config).faulty:
        logger.info("%s: physical sensor restored at slot %d", state.target_id, day_slot)
        return replace(state, active=False, last_refresh=day_slot)

    neighbour_probe = trailing_window(neighbour, probe_len, day_slot)
    if screen(neighbour_probe, rule_config).faulty:
        logger.warning(
            "%s: backup neighbour %s is itself faulty; virtual sensor unbacked",
            state.target_id, state.neighbour_id,
        )
        return replace(state, unbacked=True, last_refresh=day_slot)

    window = WindowSpec(
        length_hours=state.model.trained_on.length_hours if state.model else restore_window_hours,
        end_slot=state.activated_at,
    )
    model = train_backup(neighbour, target, window, seed)
    return replace(state, model=model, unbacked=False, last_refresh=day_slot)


def fill_virtual(
    target: SensorSeries, neighbour: SensorSeries, state: VirtualSensorState
) -> tuple[SensorSeries, np.ndarray]:
    """Fill the target's missing slots after activation with backup predictions.

    Returns the patched series and a provenance mask of virtual slots. Slots
    where the neighbour is also missing stay missing.
    """
    if not state.active or state.unbacked or state.model is None:
        return target, np.zeros(len(target), dtype=bool)
    values = target.values.copy()
    fillable = np.zeros(len(target), dtype=bool)
    fillable[state.activated_at :] = True
    fillable &= np.isnan(values) & np.isfinite(neighbour.values)
    if fillable.any():
        values[fillable] = predict_backup(state.model, neighbour.values[fillable])
    return target.with_values(values), fillable
