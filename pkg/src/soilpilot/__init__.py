"""Operational soil-moisture toolkit: per-sensor forecasting, rule- and
model-based fault screening, MI-selected virtual-sensor backup, and overnight
irrigation set-point proposals."""

__version__ = "0.1.0"

from .data import RawReading, SensorSeries, TimeGrid, WindowSpec
from .rules import FaultVerdict, Rule, RuleConfig
from .mutual_info import KsgConfig, MIMatrix, NeighbourMap
from .backup import MlpBackup, VirtualSensorState
from .forecast import EvalReport, KnnConfig, SarimaConfig
from .scheduler import BlackoutWindow, Proposal, ZoneConfig

__all__ = [
    "RawReading",
    "SensorSeries",
    "TimeGrid",
    "WindowSpec",
    "FaultVerdict",
    "Rule",
    "RuleConfig",
    "KsgConfig",
    "MIMatrix",
    "NeighbourMap",
    "MlpBackup",
    "VirtualSensorState",
    "EvalReport",
    "KnnConfig",
    "SarimaConfig",
    "BlackoutWindow",
    "Proposal",
    "ZoneConfig",
]
