"""Per-sensor soil-moisture forecasting and the evaluation harness.

The workhorse is a k-nearest-neighbours predictor over a lag embedding of the
recent window (24 hourly lags plus a sin/cos hour-of-day pair, standardised
per window, uniform neighbour weights, recursive multi-step). A seasonal AR
baseline fits the 24 h-differenced series by least squares with a seasonal
moving-average term estimated Hannan-Rissanen style. The rolling-origin
harness refits both at daily origins and reports per-sensor MAE with a mean
and P75 summary per model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import (
    SensorSeries,
    WINDOW_MAX_HOURS,
    WINDOW_MIN_HOURS,
    atomic_write_text,
    seasonal_difference,
    trailing_window,
)
from .errors import ForecastError, InsufficientDataError

logger = logging.getLogger(__name__)

HORIZON_MIN, HORIZON_MAX = 24, 72


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    lag_hours: tuple[int, ...] = tuple(range(1, 25))
    hour_harmonics: bool = True  # sin/cos hour-of-day features
    window_hours: int = 504
    horizon_hours: int = 24

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.lag_hours or min(self.lag_hours) < 1:
            raise ValueError("lags must be positive")
        if not HORIZON_MIN <= self.horizon_hours <= HORIZON_MAX:
            raise ValueError(f"horizon must be in [{HORIZON_MIN}, {HORIZON_MAX}]")
        if not WINDOW_MIN_HOURS <= self.window_hours <= WINDOW_MAX_HOURS:
            raise ValueError(
                f"window must be in [{WINDOW_MIN_HOURS}, {WINDOW_MAX_HOURS}]"
            )


@dataclass(frozen=True)
class SarimaConfig:
    ar_order: int = 2
    seasonal_ma_order: int = 1  # 0 disables the seasonal MA term
    seasonal_lag: int = 24
    window_hours: int = 504

    def __post_init__(self) -> None:
        if self.ar_order < 0 or self.seasonal_ma_order < 0:
            raise ValueError("orders must be >= 0")
        if self.ar_order == 0 and self.seasonal_ma_order == 0:
            raise ValueError("at least one order must be positive")
        if self.seasonal_lag < 1:
            raise ValueError("seasonal lag must be >= 1")


def _hour_features(hours: np.ndarray) -> np.ndarray:
    angle = 2.0 * np.pi * (hours % 24) / 24.0
    return np.column_stack([np.sin(angle), np.cos(angle)])


@dataclass
class KnnForecaster:
    """Fitted state: standardised embedding rows and their next-hour targets."""

    sensor_id: str
    config: KnnConfig
    rows: np.ndarray        # standardised embeddings, one per stored target
    targets: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray
    tail: np.ndarray        # last max(lag) window values, for the recursion
    end_hour_of_day: int

    @property
    def n_rows(self) -> int:
        return len(self.targets)


def fit_knn(series: SensorSeries, config: KnnConfig | None = None) -> KnnForecaster:
    """Build the lag-embedding table from one training window.

    Rows overlapping a gap (any missing lag or target) are dropped; too few
    complete rows is an error, the caller should widen the window.
    """
    config = config or KnnConfig()
    v = series.values
    n = len(v)
    max_lag = max(config.lag_hours)
    if n <= max_lag:
        raise InsufficientDataError(f"window of {n} slots <= max lag {max_lag}")
    # lag block: row i targets slot t = max_lag + i
    windows = sliding_window_view(v, max_lag)[: n - max_lag]  # [t-max_lag, t)
    lag_cols = np.column_stack([windows[:, max_lag - lag] for lag in config.lag_hours])
    targets = v[max_lag:]
    feats = lag_cols
    if config.hour_harmonics:
        hods = np.array([series.grid.hour_of_day(t) for t in range(max_lag, n)])
        feats = np.column_stack([lag_cols, _hour_features(hods)])
    ok = np.isfinite(feats).all(axis=1) & np.isfinite(targets)
    feats, targets = feats[ok], targets[ok]
    if len(targets) < config.k:
        raise InsufficientDataError(
            f"{len(targets)} complete embedding rows < k={config.k}; widen the window"
        )
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std == 0.0] = 1.0
    tail = v[-max_lag:]
    if not np.isfinite(tail).all():
        raise ForecastError(f"{series.sensor_id}: missing values in the window tail")
    return KnnForecaster(
        sensor_id=series.sensor_id,
        config=config,
        rows=(feats - mean) / std,
        targets=targets,
        feat_mean=mean,
        feat_std=std,
        tail=tail.copy(),
        end_hour_of_day=series.grid.hour_of_day(n - 1),
    )


def forecast_knn(model: KnnForecaster, horizon_hours: int | None = None) -> np.ndarray:
    """Recursive one-step kNN forecast: each step averages the k nearest
    stored targets and feeds the prediction back into the embedding."""
    config = model.config
    horizon = config.horizon_hours if horizon_hours is None else horizon_hours
    if not HORIZON_MIN <= horizon <= HORIZON_MAX:
        raise ValueError(f"horizon must be in [{HORIZON_MIN}, {HORIZON_MAX}]")
    max_lag = max(config.lag_hours)
    buf = list(model.tail)
    out = np.empty(horizon)
    for h in range(horizon):
        feat = [buf[-lag] for lag in config.lag_hours]
        if config.hour_harmonics:
            hod = (model.end_hour_of_day + 1 + h) % 24
            angle = 2.0 * np.pi * hod / 24.0
            feat = feat + [np.sin(angle), np.cos(angle)]
        q = (np.asarray(feat) - model.feat_mean) / model.feat_std
        dist = np.sqrt(((model.rows - q) ** 2).sum(axis=1))
        nearest = np.argsort(dist, kind="stable")[: config.k]
        pred = float(model.targets[nearest].mean())
        out[h] = pred
        buf.append(pred)
        del buf[: len(buf) - max_lag]
    return out


# ---------------------------------------------------------------------------
# seasonal AR baseline
# ---------------------------------------------------------------------------


def _hr_fit(z: np.ndarray, p: int, q_seasonal: int, sl: int):
    """Two-stage least squares for z_t = c + sum(phi_i z_{t-i}) + theta e_{t-sl}.

    Stage one fits the AR part and extracts provisional residuals; stage two
    re-estimates with the lagged residual as an extra regressor. Returns
    (c, phi, theta, innovations) with innovations aligned to z (zero where
    unavailable).
    """
    n = len(z)
    idx = np.arange(p, n)
    X1 = np.column_stack([np.ones(len(idx))] + [z[idx - i] for i in range(1, p + 1)]) \
        if p else np.ones((len(idx), 1))
    y1 = z[idx]
    ok1 = np.isfinite(X1).all(axis=1) & np.isfinite(y1)
    if ok1.sum() < X1.shape[1] + 1:
        raise InsufficientDataError("too few complete rows for the AR stage")
    beta1, *_ = np.linalg.lstsq(X1[ok1], y1[ok1], rcond=None)
    e = np.full(n, np.nan)
    e[idx[ok1]] = y1[ok1] - X1[ok1] @ beta1

    theta = 0.0
    c, phi = beta1[0], beta1[1:]
    if q_seasonal:
        start = max(p, sl)
        idx2 = np.arange(start, n)
        cols = [np.ones(len(idx2))] + [z[idx2 - i] for i in range(1, p + 1)] + [e[idx2 - sl]]
        X2 = np.column_stack(cols)
        y2 = z[idx2]
        ok2 = np.isfinite(X2).all(axis=1) & np.isfinite(y2)
        if ok2.sum() >= X2.shape[1] + 1:
            beta2, *_ = np.linalg.lstsq(X2[ok2], y2[ok2], rcond=None)
            c, phi, theta = beta2[0], beta2[1 : 1 + p], float(beta2[-1])

    # innovations under the final parameters (zero where inputs unavailable)
    eps = np.zeros(n)
    for t in range(p, n):
        lags = z[t - p : t][::-1] if p else np.empty(0)
        if not (np.isfinite(z[t]) and np.isfinite(lags).all()):
            continue
        pred = c + float(np.dot(phi, lags))
        if theta and t - sl >= 0:
            pred += theta * eps[t - sl]
        eps[t] = z[t] - pred
    return float(c), np.asarray(phi, dtype=float), theta, eps


def fit_forecast_sarima(
    series: SensorSeries, config: SarimaConfig | None = None, horizon_hours: int = 24
) -> np.ndarray:
    """Seasonally difference, fit AR + seasonal MA, forecast recursively and
    invert the differencing.

    A (near-)constant differenced window cannot support a fit; the forecast
    degrades to repeating the last seasonal cycle, which for a constant series
    is exactly the persistence forecast.
    """
    config = config or SarimaConfig()
    sl = config.seasonal_lag
    v = series.values
    n = len(v)
    if n < 2 * sl:
        raise InsufficientDataError(f"need at least two seasonal cycles ({2 * sl} slots)")
    z = seasonal_difference(series, sl).values
    zfinite = z[np.isfinite(z)]
    if len(zfinite) < 2 * sl:
        raise InsufficientDataError("too few non-missing differenced samples")

    if float(zfinite.std()) < 1e-10:
        logger.warning(
            "%s: constant differenced window; falling back to seasonal persistence",
            series.sensor_id,
        )
        zf = np.full(horizon_hours, float(zfinite.mean()))
    else:
        p = config.ar_order
        c, phi, theta, eps = _hr_fit(z, p, config.seasonal_ma_order, sl)
        tail = z[-p:] if p else np.empty(0)
        if p and not np.isfinite(tail).all():
            raise ForecastError(f"{series.sensor_id}: missing differenced values at window end")
        zbuf = list(tail)
        ebuf = list(eps)
        zf = np.empty(horizon_hours)
        for h in range(horizon_hours):
            pred = c + (float(np.dot(phi, np.asarray(zbuf[-p:][::-1]))) if p else 0.0)
            if theta:
                pred += theta * ebuf[-sl]
            zf[h] = pred
            zbuf.append(pred)
            ebuf.append(0.0)

    # invert the seasonal differencing against actual (then forecast) levels
    out = np.empty(horizon_hours)
    for h in range(horizon_hours):
        base = v[n - sl + h] if h < sl else out[h - sl]
        if not np.isfinite(base):
            raise ForecastError(f"{series.sensor_id}: missing level at inversion lag")
        out[h] = zf[h] + base
    return out


# ---------------------------------------------------------------------------
# rolling-origin evaluation
# ---------------------------------------------------------------------------

ForecastFn = Callable[[SensorSeries, int], np.ndarray]


@dataclass(frozen=True)
class EvalConfig:
    window_hours: int = 504
    horizon_hours: int = 24
    step_hours: int = 24
    anchor_hour: int | None = None  # align origins to this hour of day


@dataclass
class EvalReport:
    """Per-sensor MAE rows plus a per-model (mean, P75) summary.

    P75 uses linear interpolation between closest ranks, pinned here so the
    headline numbers are reproducible.
    """

    rows: list[tuple[str, str, float, int]]  # sensor, model, mae, n_origins
    summary: dict[str, tuple[float, float]]  # model -> (mean mae, p75 mae)
    excluded: list[tuple[str, str]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_csv(self, path: str, header_comment: str | None = None) -> None:
        lines = []
        if header_comment:
            lines.append(f"# {header_comment}")
        lines.append("# p75_convention=linear interpolation between closest ranks")
        lines.append("sensor_id,model,mae_vwc_pct,n_origins")
        for sensor, model, mae, n in self.rows:
            lines.append(f"{sensor},{model},{repr(float(mae))},{n}")
        for sensor, model in self.excluded:
            lines.append(f"{sensor},{model},,0")
        lines.append("")
        lines.append("model,mean_mae,p75_mae")
        for model in sorted(self.summary):
            mean, p75 = self.summary[model]
            lines.append(f"{model},{repr(float(mean))},{repr(float(p75))}")
        atomic_write_text(path, "\n".join(lines) + "\n")


def default_models(
    knn_config: KnnConfig | None = None, sarima_config: SarimaConfig | None = None
) -> list[tuple[str, ForecastFn]]:
    knn_config = knn_config or KnnConfig()
    sarima_config = sarima_config or SarimaConfig()

    def knn(window: SensorSeries, horizon: int) -> np.ndarray:
        return forecast_knn(fit_knn(window, knn_config), horizon)

    def sarima(window: SensorSeries, horizon: int) -> np.ndarray:
        return fit_forecast_sarima(window, sarima_config, horizon)

    return [("knn", knn), ("sarima", sarima)]


def rolling_origin_evaluate(
    dataset: Mapping[str, SensorSeries],
    models: Sequence[tuple[str, ForecastFn]],
    eval_config: EvalConfig | None = None,
) -> EvalReport:
    """Fit-then-forecast at daily origins and aggregate out-of-sample MAE.

    At each origin the model sees only the trailing window; its forecast is
    scored against the next ``horizon_hours`` of actuals (missing actuals are
    skipped pointwise). Sensors with zero valid origins for a model are
    excluded and listed in the report.
    """
    eval_config = eval_config or EvalConfig()
    W, H, step = eval_config.window_hours, eval_config.horizon_hours, eval_config.step_hours
    rows: list[tuple[str, str, float, int]] = []
    excluded: list[tuple[str, str]] = []
    per_model_maes: dict[str, list[float]] = {name: [] for name, _ in models}
    for sensor_id in sorted(dataset):
        series = dataset[sensor_id]
        n = len(series)
        first = W
        if eval_config.anchor_hour is not None:
            first += (eval_config.anchor_hour - series.grid.hour_of_day(W)) % 24
        origins = range(first, n - H + 1, step)
        if not origins:
            for name, _ in models:
                excluded.append((sensor_id, name))
            continue
        for name, fn in models:
            maes = []
            for t0 in origins:
                window = trailing_window(series, W, t0)
                actual = series.values[t0 : t0 + H]
                if not np.isfinite(actual).any():
                    continue
                try:
                    fc = fn(window, H)
                except (ForecastError, InsufficientDataError) as exc:
                    logger.debug("%s/%s origin %d skipped: %s", sensor_id, name, t0, exc)
                    continue
                err = np.abs(fc - actual)
                maes.append(float(np.nanmean(err)))
            if maes:
                mae = float(np.mean(maes))
                rows.append((sensor_id, name, mae, len(maes)))
                per_model_maes[name].append(mae)
            else:
                excluded.append((sensor_id, name))
    summary = {
        name: (float(np.mean(v)), float(np.percentile(v, 75)))
        for name, v in per_model_maes.items()
        if v
    }
    return EvalReport(
        rows=rows,
        summary=summary,
        excluded=excluded,
        meta={"window_hours": W, "horizon_hours": H, "step_hours": step},
    )


def svg_forecast_chart(
    actual: np.ndarray, forecast: np.ndarray, path: str, title: str = ""
) -> None:
    """Tiny dependency-free SVG line chart (actual in grey, forecast in blue)."""

    width, height, pad = 640, 240, 30
    series = [np.asarray(actual, float), np.asarray(forecast, float)]
    finite = np.concatenate([s[np.isfinite(s)] for s in series])
    lo = float(finite.min()) if len(finite) else 0.0
    hi = float(finite.max()) if len(finite) else 1.0
    span = (hi - lo) or 1.0
    n = max(len(s) for s in series)

    def points(s: np.ndarray) -> str:
        pts = []
        for i, v in enumerate(s):
            if not np.isfinite(v):
                continue
            x = pad + i * (width - 2 * pad) / max(n - 1, 1)
            y = height - pad - (v - lo) * (height - 2 * pad) / span
            pts.append(f"{x:.1f},{y:.1f}")
        return " ".join(pts)

    body = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{pad}" y="18" font-size="12">{title}</text>' if title else "",
        f'<polyline fill="none" stroke="#888888" stroke-width="1.5" points="{points(series[0])}"/>',
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{points(series[1])}"/>',
        "</svg>",
    ]
    atomic_write_text(path, "\n".join(b for b in body if b) + "\n")
