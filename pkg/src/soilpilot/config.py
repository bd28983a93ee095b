"""Pipeline configuration: one TOML file, CLI flags win over file values.

Every output artifact embeds the resolved config's hash and the seed so a
run can always be traced back to its exact inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, time

from .detectors import DetectorConfig
from .errors import SoilPilotError
from .forecast import EvalConfig, KnnConfig, SarimaConfig
from .mutual_info import KsgConfig
from .rules import RuleConfig
from .scheduler import BlackoutWindow

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str = "corpus.csv"
    zones: str = "zones.json"
    precip: str | None = None
    out_dir: str = "out"
    neighbours: str | None = None  # defaults to <out_dir>/neighbours.json
    seed: int = 0
    rules: RuleConfig = field(default_factory=RuleConfig)
    detectors: DetectorConfig = field(default_factory=DetectorConfig)
    ksg: KsgConfig = field(default_factory=KsgConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    sarima: SarimaConfig = field(default_factory=SarimaConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    screen_window_hours: int = 336
    backup_window_hours: int = 504
    horizon_hours: int = 24
    run_at_hour: int = 16
    night_start: time = time(22, 0)
    night_end: time = time(6, 0)
    blackouts: tuple[BlackoutWindow, ...] = ()

    @property
    def neighbours_path(self) -> str:
        return self.neighbours or os.path.join(self.out_dir, "neighbours.json")

    def to_dict(self) -> dict:
        def convert(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {k: convert(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, (time, datetime)):
                return obj.isoformat()
            if isinstance(obj, dict):
                return {k: convert(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [convert(v) for v in obj]
            return obj

        return {
            f.name: convert(getattr(self, f.name))
            for f in dataclasses.fields(self)
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def provenance(self) -> str:
        return f"config_hash={self.config_hash()} seed={self.seed}"


def _build(cls, section: dict, path: str, **coerced):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known - set(coerced)
    if unknown:
        raise SoilPilotError(f"{path}: unknown keys {sorted(unknown)} for {cls.__name__}")
    kwargs = {k: v for k, v in section.items() if k in known}
    kwargs.update(coerced)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SoilPilotError(f"{path}: bad [{cls.__name__}] values: {exc}") from exc


def _parse_time(text: str) -> time:
    return time.fromisoformat(text)


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Build the pipeline config from a TOML file plus CLI overrides.

    Validation problems are reported together, not one at a time.
    """
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    overrides = overrides or {}
    problems: list[str] = []

    paths = dict(raw.get("paths", {}))
    sched = dict(raw.get("schedule", {}))

    rules_raw = dict(raw.get("rules", {}))
    if "valid_range" in rules_raw:
        rules_raw["valid_range"] = tuple(rules_raw["valid_range"])
    if "valid_range_overrides" in rules_raw:
        rules_raw["valid_range_overrides"] = {
            k: tuple(v) for k, v in rules_raw["valid_range_overrides"].items()
        }
    knn_raw = dict(raw.get("knn", {}))
    if "lag_hours" in knn_raw:
        knn_raw["lag_hours"] = tuple(int(v) for v in knn_raw["lag_hours"])

    blackouts = []
    for b in sched.pop("blackouts", []):
        try:
            blackouts.append(
                BlackoutWindow(
                    start=datetime.fromisoformat(b["start"]),
                    end=datetime.fromisoformat(b["end"]),
                    reason=b.get("reason", ""),
                )
            )
        except (KeyError, ValueError) as exc:
            problems.append(f"bad blackout entry {b!r}: {exc}")

    def section(cls, data, label):
        try:
            return _build(cls, data, path or "<defaults>")
        except SoilPilotError as exc:
            problems.append(str(exc))
            return cls()

    rules = section(RuleConfig, rules_raw, "rules")
    detectors = section(DetectorConfig, raw.get("detectors", {}), "detectors")
    ksg = section(KsgConfig, raw.get("ksg", {}), "ksg")
    knn = section(KnnConfig, knn_raw, "knn")
    sarima = section(SarimaConfig, raw.get("sarima", {}), "sarima")
    evaluation = section(EvalConfig, raw.get("evaluate", {}), "evaluate")

    try:
        night_start = _parse_time(sched.pop("night_start", "22:00"))
        night_end = _parse_time(sched.pop("night_end", "06:00"))
    except ValueError as exc:
        problems.append(f"bad night span: {exc}")
        night_start, night_end = time(22, 0), time(6, 0)

    cfg_kwargs = dict(
        dataset=paths.get("dataset", "corpus.csv"),
        zones=paths.get("zones", "zones.json"),
        precip=paths.get("precip"),
        out_dir=paths.get("out_dir", "out"),
        neighbours=paths.get("neighbours"),
        seed=int(raw.get("seed", 0)),
        rules=rules,
        detectors=detectors,
        ksg=ksg,
        knn=knn,
        sarima=sarima,
        evaluation=evaluation,
        screen_window_hours=int(sched.pop("screen_window_hours", 336)),
        backup_window_hours=int(sched.pop("backup_window_hours", 504)),
        horizon_hours=int(sched.pop("horizon_hours", 24)),
        run_at_hour=int(sched.pop("run_at_hour", 16)),
        night_start=night_start,
        night_end=night_end,
        blackouts=tuple(blackouts),
    )
    if sched:
        problems.append(f"unknown [schedule] keys {sorted(sched)}")
    for key, value in overrides.items():
        if value is not None:
            cfg_kwargs[key] = value
    if problems:
        raise SoilPilotError("config validation failed:\n  " + "\n  ".join(problems))
    return PipelineConfig(**cfg_kwargs)
