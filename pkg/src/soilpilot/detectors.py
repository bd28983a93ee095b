"""Model-based anomaly detectors on differenced (stationary) series.

Two lightweight checks run after the rule screen passes:

* an isolation forest over a 2-D embedding ``(z_t, z_t - z_{t-1})`` of the
  differenced series (univariate isolation trees degenerate to quantile cuts;
  the pair catches both level and jump anomalies), and
* an autoregressive residual check: recursive 24-step forecast on the
  differenced series, flagging when too many points land outside two residual
  standard deviations.

Both are deterministic given a seed and flag a sensor only when more than
``flag_fraction`` (default 30 %) of scored samples misbehave.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import SensorSeries, seasonal_difference
from .errors import DegenerateDataError, InsufficientDataError
from .rules import Rule, RuleHit

logger = logging.getLogger(__name__)

_EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class DetectorConfig:
    flag_fraction: float = 0.30
    arima_sigma_mult: float = 2.0
    n_trees: int = 200
    subsample_size: int = 256
    contamination: float = 0.05
    seasonal_lag: int = 24  # 168 selects weekly differencing instead
    ar_order: int = 24
    score_window_hours: int = 168
    forecast_hours: int = 24
    min_train_samples: int = 64

    def __post_init__(self) -> None:
        if not 0 < self.flag_fraction < 1:
            raise ValueError("flag_fraction must be in (0, 1)")
        if not 0 < self.contamination < 0.5:
            raise ValueError("contamination must be in (0, 0.5)")
        if self.n_trees < 1:
            raise ValueError("need at least one tree")


def embed_lag_pairs(values: np.ndarray) -> np.ndarray:
    """2-D embedding rows ``(x_t, x_t - x_{t-1})`` over consecutive finite pairs."""
    v = np.asarray(values, dtype=np.float64)
    cur, prev = v[1:], v[:-1]
    ok = np.isfinite(cur) & np.isfinite(prev)
    return np.column_stack([cur[ok], cur[ok] - prev[ok]])


def average_path_length(n: np.ndarray | float) -> np.ndarray:
    """Expected unsuccessful-search path length c(n) of a BST with n points."""
    n = np.atleast_1d(np.asarray(n, dtype=np.float64))
    out = np.zeros_like(n)
    big = n > 2
    out[big] = 2.0 * (np.log(n[big] - 1.0) + _EULER_GAMMA) - 2.0 * (n[big] - 1.0) / n[big]
    out[n == 2] = 1.0
    return out


class _IsolationTree:
    """One isolation tree stored as flat arrays for vectorised descent."""

    __slots__ = ("feature", "threshold", "left", "right", "depth", "leaf_adjust")

    def __init__(self, X: np.ndarray, rng: np.random.Generator, max_depth: int):
        feature: list[int] = []
        threshold: list[float] = []
        left: list[int] = []
        right: list[int] = []
        depth: list[int] = []
        adjust: list[float] = []
        stack = [(np.arange(len(X)), 0, -1, False)]
        while stack:
            idx, d, parent, is_right = stack.pop()
            node = len(feature)
            if parent >= 0:
                (right if is_right else left)[parent] = node
            sub = X[idx]
            lo = sub.min(axis=0)
            hi = sub.max(axis=0)
            splittable = np.nonzero(hi > lo)[0]
            if len(idx) <= 1 or d >= max_depth or len(splittable) == 0:
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                depth.append(d)
                adjust.append(float(average_path_length(len(idx))[0]))
                continue
            f = int(splittable[rng.integers(len(splittable))])
            t = float(rng.uniform(lo[f], hi[f]))
            feature.append(f)
            threshold.append(t)
            left.append(-1)
            right.append(-1)
            depth.append(d)
            adjust.append(0.0)
            below = sub[:, f] < t
            stack.append((idx[below], d + 1, node, False))
            stack.append((idx[~below], d + 1, node, True))
        self.feature = np.asarray(feature, dtype=np.intp)
        self.threshold = np.asarray(threshold)
        self.left = np.asarray(left, dtype=np.intp)
        self.right = np.asarray(right, dtype=np.intp)
        self.depth = np.asarray(depth, dtype=np.float64)
        self.leaf_adjust = np.asarray(adjust)

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.intp)
        active = self.feature[node] >= 0
        while active.any():
            cur = node[active]
            below = X[active, self.feature[cur]] < self.threshold[cur]
            node[active] = np.where(below, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return self.depth[node] + self.leaf_adjust[node]


@dataclass
class IForestModel:
    """Fitted isolation forest plus the score threshold implied by the
    assumed contamination."""

    trees: list[_IsolationTree]
    subsample_size: int
    contamination: float
    score_threshold: float
    n_train: int

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Anomaly score ``2^(-E[path]/c(subsample))``; higher = more isolated."""
        paths = np.zeros(len(X))
        for t in self.trees:
            paths += t.path_lengths(X)
        paths /= len(self.trees)
        c = float(average_path_length(self.subsample_size)[0])
        return np.power(2.0, -paths / c)


def fit_iforest(
    training: SensorSeries | np.ndarray,
    config: DetectorConfig,
    rng: np.random.Generator | int,
) -> IForestModel:
    """Build the forest on uniform subsamples of the embedded training window.

    The score threshold is the ``1 - contamination`` quantile of the training
    scores, so about 5 % of training points classify anomalous by construction.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    values = training.values if isinstance(training, SensorSeries) else training
    X = embed_lag_pairs(values)
    if len(X) < config.min_train_samples:
        raise InsufficientDataError(
            f"{len(X)} embedded samples < {config.min_train_samples}; "
            "fall back to rule-only screening"
        )
    if (X.max(axis=0) == X.min(axis=0)).all():
        raise DegenerateDataError("constant training window; isolation forest disabled")
    psi = min(config.subsample_size, len(X))
    max_depth = int(np.ceil(np.log2(max(psi, 2))))
    trees = [
        _IsolationTree(X[rng.choice(len(X), size=psi, replace=False)], rng, max_depth)
        for _ in range(config.n_trees)
    ]
    model = IForestModel(trees, psi, config.contamination, score_threshold=np.inf, n_train=len(X))
    train_scores = model.scores(X)
    model.score_threshold = float(np.quantile(train_scores, 1.0 - config.contamination))
    return model


def detect_iforest(
    model: IForestModel, window: SensorSeries | np.ndarray, config: DetectorConfig
) -> RuleHit | None:
    """Fires iff the anomalous fraction of the window strictly exceeds
    ``flag_fraction``."""
    values = window.values if isinstance(window, SensorSeries) else window
    X = embed_lag_pairs(values)
    if len(X) == 0:
        return None
    frac = float(np.mean(model.scores(X) > model.score_threshold))
    if frac > config.flag_fraction:
        return RuleHit(
            Rule.IFOREST,
            None,
            frac,
            f"{frac:.2f} of window anomalous > {config.flag_fraction}",
        )
    return None


@dataclass(frozen=True)
class ArModel:
    """AR(p) fit on a differenced window: coefficients, intercept and the
    in-sample residual standard deviation used for the 2-sigma band."""

    seasonal_lag: int
    ar_order: int
    coefficients: np.ndarray
    intercept: float
    sigma: float
    history_tail: np.ndarray  # last ar_order differenced values, oldest first

    def forecast(self, steps: int) -> np.ndarray:
        """Recursive multi-step forecast from the training window's tail."""
        buf = list(self.history_tail)
        out = np.empty(steps)
        p = self.ar_order
        for h in range(steps):
            pred = self.intercept + float(
                np.dot(self.coefficients, np.asarray(buf[-p:][::-1]))
            )
            out[h] = pred
            buf.append(pred)
        return out


def _lag_design(z: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows [z_{t-1} .. z_{t-p}] with target z_t, complete rows only."""
    n = len(z)
    if n <= p:
        return np.empty((0, p)), np.empty(0)
    cols = [z[p - i : n - i] for i in range(1, p + 1)]
    X = np.column_stack(cols)
    y = z[p:]
    ok = np.isfinite(X).all(axis=1) & np.isfinite(y)
    return X[ok], y[ok]


def fit_ar(
    training: SensorSeries | np.ndarray, config: DetectorConfig
) -> ArModel:
    """Least-squares AR(p) on the differenced training window."""
    z = training.values if isinstance(training, SensorSeries) else np.asarray(training, float)
    p = config.ar_order
    finite = z[np.isfinite(z)]
    if len(finite) < p + config.forecast_hours:
        raise InsufficientDataError(
            f"{len(finite)} samples < AR({p}) + {config.forecast_hours}h requirement"
        )
    if float(np.nanstd(z)) == 0.0:
        raise DegenerateDataError("constant differenced window; AR detector disabled")
    X, y = _lag_design(z, p)
    if len(y) <= p + 1:
        raise InsufficientDataError(f"only {len(y)} complete lag rows for AR({p})")
    design = np.column_stack([np.ones(len(y)), X])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    sigma = float(resid.std())
    tail = z[-p:]
    if not np.isfinite(tail).all():
        raise InsufficientDataError("missing values in the window tail; cannot forecast")
    return ArModel(
        seasonal_lag=config.seasonal_lag,
        ar_order=p,
        coefficients=beta[1:],
        intercept=float(beta[0]),
        sigma=sigma,
        history_tail=tail.copy(),
    )


def detect_ar_residuals(
    model: ArModel, actual: np.ndarray, config: DetectorConfig
) -> RuleHit | None:
    """Fires iff ``|actual - forecast| > sigma_mult * sigma`` on strictly more
    than ``flag_fraction`` of the forecast points (>= 8 of 24 at defaults).

    Missing actuals count as non-exceedances; the denominator stays at the
    full horizon.
    """
    horizon = config.forecast_hours
    actual = np.asarray(actual, dtype=np.float64)
    if len(actual) != horizon:
        raise ValueError(f"expected {horizon} actual values, got {len(actual)}")
    fc = model.forecast(horizon)
    err = np.abs(actual - fc)
    exceed = int(np.nansum(err > config.arima_sigma_mult * model.sigma))
    frac = exceed / horizon
    if frac > config.flag_fraction:
        return RuleHit(
            Rule.ARIMA,
            None,
            frac,
            f"{exceed}/{horizon} points outside "
            f"{config.arima_sigma_mult}*sigma ({model.sigma:.4f})",
        )
    return None


def model_screen(
    series: SensorSeries, config: DetectorConfig, rng: np.random.Generator | int
) -> list[RuleHit]:
    """Run both detectors on one (rule-clean) sensor window.

    The isolation forest trains on the window minus its most recent
    ``score_window_hours`` and scores that held-out recent slice; the AR check
    fits on the window minus the last ``forecast_hours`` and compares its
    recursive forecast against them. Detectors that cannot fit (too little
    data, constant input) are skipped.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    z = seasonal_difference(series, config.seasonal_lag).values
    hits: list[RuleHit] = []

    split = len(z) - config.score_window_hours
    if split > 0:
        try:
            forest = fit_iforest(z[:split], config, rng)
            hit = detect_iforest(forest, z[split:], config)
            if hit is not None:
                hits.append(hit)
        except (InsufficientDataError, DegenerateDataError) as exc:
            logger.info("%s: isolation forest skipped: %s", series.sensor_id, exc)

    try:
        ar = fit_ar(z[: -config.forecast_hours], config)
        hit = detect_ar_residuals(ar, z[-config.forecast_hours :], config)
        if hit is not None:
            hits.append(hit)
    except (InsufficientDataError, DegenerateDataError) as exc:
        logger.info("%s: AR residual check skipped: %s", series.sensor_id, exc)
    return hits
