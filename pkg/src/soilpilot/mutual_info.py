"""Pairwise mutual information between sensor streams and backup-neighbour
selection.

MI (in nats) is estimated with the Kraskov k-nearest-neighbour estimator
(variant 1: max-norm joint neighbourhoods, strict-inequality marginal counts):

    I(X;Y) ~= psi(k) + psi(n) - mean_i[ psi(n_x(i)+1) + psi(n_y(i)+1) ]

Sensor values are quantised, which breaks the estimator's continuity
assumption, so each sample vector gets a tiny seeded jitter before
estimation. The jitter stream is derived from the vector's content, not its
argument position, which makes ``ksg_mi(x, y) == ksg_mi(y, x)`` hold exactly.

The matrix is computed on raw (undifferenced) hourly series restricted to
jointly non-missing slots, and is meant to be refreshed infrequently from the
CLI, not inside the daily loop.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .data import SensorSeries, atomic_write_text
from .errors import DegenerateDataError, InsufficientDataError


@dataclass(frozen=True)
class KsgConfig:
    k_neighbours: int = 4
    noise_amplitude: float = 1e-8  # in units of each vector's standard deviation
    seed: int = 0
    min_samples: int = 50

    def __post_init__(self) -> None:
        if self.k_neighbours < 1:
            raise ValueError("k_neighbours must be >= 1")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")


def _jitter(x: np.ndarray, config: KsgConfig) -> np.ndarray:
    """Content-seeded tie-breaking noise, amplitude relative to the sample std."""
    std = float(x.std())
    if std == 0.0:
        raise DegenerateDataError("constant sample vector; MI undefined")
    digest = hashlib.sha256(x.tobytes()).digest()
    key = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), key]))
    return x + rng.uniform(-1.0, 1.0, size=len(x)) * config.noise_amplitude * std


def _strict_interval_counts(sorted_vals: np.ndarray, centers: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Count points strictly inside (c - eps, c + eps), excluding the center."""
    hi = np.searchsorted(sorted_vals, centers + eps, side="left")
    lo = np.searchsorted(sorted_vals, centers - eps, side="right")
    return hi - lo - 1


def ksg_mi(x: np.ndarray, y: np.ndarray, config: KsgConfig | None = None) -> float:
    """MI estimate in nats between two equally long sample vectors.

    Pairs with a missing value on either side are dropped first. The estimate
    may come out slightly negative on independent data; it is not clamped.
    """
    config = config or KsgConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    n = len(x)
    if n < config.min_samples:
        raise InsufficientDataError(f"{n} joint samples < {config.min_samples}")
    k = config.k_neighbours
    if k >= n:
        raise ValueError(f"k={k} requires more than k samples, got {n}")
    if config.noise_amplitude > 0:
        x = _jitter(x, config)
        y = _jitter(y, config)
    elif x.std() == 0.0 or y.std() == 0.0:
        raise DegenerateDataError("constant sample vector; MI undefined")

    joint = np.column_stack([x, y])
    eps = cKDTree(joint).query(joint, k=k + 1, p=np.inf)[0][:, k]
    nx = _strict_interval_counts(np.sort(x), x, eps)
    ny = _strict_interval_counts(np.sort(y), y, eps)
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


@dataclass(frozen=True)
class MIMatrix:
    """Symmetric pairwise MI over a sensor set; NaN marks pairs that could not
    be estimated (insufficient overlap) and the diagonal."""

    sensor_ids: tuple[str, ...]
    values: np.ndarray
    n_samples: np.ndarray

    def index_of(self, sensor_id: str) -> int:
        return self.sensor_ids.index(sensor_id)

    def value(self, a: str, b: str) -> float:
        return float(self.values[self.index_of(a), self.index_of(b)])

    def to_csv(self, path: str, header_comment: str | None = None) -> None:
        lines = []
        if header_comment:
            lines.append(f"# {header_comment}")
        lines.append(",".join(["sensor_id", *self.sensor_ids]))
        for i, sid in enumerate(self.sensor_ids):
            cells = [sid]
            for j in range(len(self.sensor_ids)):
                v = self.values[i, j]
                cells.append("" if np.isnan(v) else repr(float(v)))
            lines.append(",".join(cells))
        atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass(frozen=True)
class NeighbourMap:
    """Top-1 backup source per sensor; ``unbacked`` lists sensors with no
    estimable neighbour at all."""

    backups: Mapping[str, tuple[str, float]]
    unbacked: frozenset[str] = field(default_factory=frozenset)

    def backup_for(self, sensor_id: str) -> tuple[str, float] | None:
        return self.backups.get(sensor_id)

    def to_dict(self) -> dict:
        return {
            "backups": {
                sid: {"neighbour": nb, "mi_nats": mi}
                for sid, (nb, mi) in sorted(self.backups.items())
            },
            "unbacked": sorted(self.unbacked),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NeighbourMap":
        return cls(
            backups={
                sid: (rec["neighbour"], float(rec["mi_nats"]))
                for sid, rec in d.get("backups", {}).items()
            },
            unbacked=frozenset(d.get("unbacked", [])),
        )


def mi_matrix(dataset: Mapping[str, SensorSeries], config: KsgConfig | None = None) -> MIMatrix:
    """Estimate every unordered sensor pair once; symmetric by construction.

    Pairs with fewer than ``min_samples`` jointly non-missing slots are left
    absent (NaN) and excluded from neighbour selection.
    """
    config = config or KsgConfig()
    ids = tuple(sorted(dataset))
    if len(ids) < 2:
        raise ValueError("need at least two sensors")
    m = len(ids)
    values = np.full((m, m), np.nan)
    counts = np.zeros((m, m), dtype=int)
    for i in range(m):
        for j in range(i + 1, m):
            xi = dataset[ids[i]].values
            yj = dataset[ids[j]].values
            ok = np.isfinite(xi) & np.isfinite(yj)
            counts[i, j] = counts[j, i] = int(ok.sum())
            try:
                est = ksg_mi(xi, yj, config)
            except (InsufficientDataError, DegenerateDataError):
                continue
            values[i, j] = values[j, i] = est
    return MIMatrix(ids, values, counts)


def top1_neighbours(matrix: MIMatrix) -> NeighbourMap:
    """Argmax over each row's present off-diagonal entries; ties break to the
    lexicographically smallest sensor id."""
    backups: dict[str, tuple[str, float]] = {}
    unbacked = set()
    for i, sid in enumerate(matrix.sensor_ids):
        row = matrix.values[i].copy()
        row[i] = np.nan
        if np.isnan(row).all():
            unbacked.add(sid)
            continue
        best = np.nanmax(row)
        tied = [matrix.sensor_ids[j] for j in np.nonzero(row == best)[0]]
        backups[sid] = (min(tied), float(best))
    return NeighbourMap(backups=backups, unbacked=frozenset(unbacked))


def export_graph(
    matrix: MIMatrix,
    neighbours: NeighbourMap,
    dot_path: str,
    json_path: str | None = None,
    header_comment: str | None = None,
) -> tuple[str, str]:
    """Write the neighbourhood graph as DOT plus a JSON sidecar.

    Every estimated pair becomes a weighted edge whose pen width scales with
    MI; top-1 backup edges are marked. Ordering is deterministic.
    """
    if json_path is None:
        json_path = dot_path.rsplit(".", 1)[0] + ".json"
    ids = matrix.sensor_ids
    top1_pairs = {
        tuple(sorted((sid, nb))) for sid, (nb, _) in neighbours.backups.items()
    }
    edges = []
    present = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            v = matrix.values[i, j]
            if not np.isnan(v):
                present.append(v)
                edges.append((ids[i], ids[j], float(v)))
    lo = min(present) if present else 0.0
    hi = max(present) if present else 1.0
    span = (hi - lo) or 1.0

    lines = ["graph mi_neighbourhood {"]
    if header_comment:
        lines.insert(0, f"// {header_comment}")
    for sid in ids:
        lines.append(f'  "{sid}";')
    for a, b, v in edges:
        width = 0.5 + 3.5 * (v - lo) / span
        style = ', style=bold, color="#1f77b4"' if (a, b) in top1_pairs else ""
        lines.append(
            f'  "{a}" -- "{b}" [weight={v:.6f}, penwidth={width:.3f}{style}];'
        )
    lines.append("}")
    atomic_write_text(dot_path, "\n".join(lines) + "\n")

    sidecar = {
        "nodes": list(ids),
        "edges": [
            {"a": a, "b": b, "mi_nats": v, "top1": (a, b) in top1_pairs}
            for a, b, v in edges
        ],
        "backups": {sid: nb for sid, (nb, _) in sorted(neighbours.backups.items())},
        "unbacked": sorted(neighbours.unbacked),
    }
    atomic_write_text(json_path, json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return dot_path, json_path
