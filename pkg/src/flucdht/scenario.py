"""Scenario files: TOML with one table per component."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Union

import tomli
import tomli_w

from .churn import ChurnModel
from .keyspace import KeyspaceConfig
from .protocol import BackupSettings, ProtocolParams
from .simcore import NetworkModel

__all__ = ["ScenarioError", "WorkloadConfig", "Scenario", "load_scenario", "parse_scenario", "dump_scenario"]


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadConfig:
    query_rate: float = 2.0  # queries per second, network-wide
    lookup_fraction: float = 0.8
    insert_fraction: float = 0.15
    update_fraction: float = 0.05
    initial_peers: int = 64
    initial_data: int = 200
    warmup: float = 300.0
    horizon: float = 1800.0
    drain: float = 600.0
    sample_period: float = 60.0
    lookup_settle: float = 2.0

    def __post_init__(self):
        mix = self.lookup_fraction + self.insert_fraction + self.update_fraction
        if any(f < 0 for f in (self.lookup_fraction, self.insert_fraction, self.update_fraction)):
            raise ValueError("mix fractions must be >= 0")
        if abs(mix - 1.0) > 1e-9:
            raise ValueError(f"mix fractions must sum to 1, got {mix}")
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")
        if self.query_rate < 0 or self.initial_peers < 0 or self.initial_data < 0:
            raise ValueError("query_rate, initial_peers and initial_data must be >= 0")
        if self.warmup < 0 or self.drain < 0 or self.sample_period <= 0 or self.lookup_settle < 0:
            raise ValueError("warmup/drain/lookup_settle must be >= 0 and sample_period > 0")


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    check_invariants: bool = False
    keyspace: KeyspaceConfig = field(default_factory=KeyspaceConfig)
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    backup: BackupSettings = field(default_factory=BackupSettings)
    network: NetworkModel = field(default_factory=NetworkModel)
    churn: ChurnModel = field(default_factory=ChurnModel)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)

    @property
    def end_time(self) -> float:
        w = self.workload
        return w.warmup + w.horizon + w.drain


SECTIONS = {
    "keyspace": KeyspaceConfig,
    "protocol": ProtocolParams,
    "backup": BackupSettings,
    "network": NetworkModel,
    "churn": ChurnModel,
    "workload": WorkloadConfig,
}
TOP_LEVEL = ("seed", "check_invariants")


def _build(name: str, cls, table: Any):
    if not isinstance(table, dict):
        raise ScenarioError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    for key in table:
        if key not in known:
            raise ScenarioError(f"unknown field {name}.{key}")
    kwargs = dict(table)
    if name == "network" and "partition_schedule" in kwargs:
        kwargs["partition_schedule"] = tuple(
            (float(w["start"]), float(w["end"]), frozenset(int(p) for p in w["peers"]))
            for w in kwargs["partition_schedule"]
        )
    for key, value in kwargs.items():
        default = getattr(cls(), key) if key != "partition_schedule" else None
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ScenarioError(f"{name}.{key} must be a boolean")
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            kwargs[key] = float(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"[{name}] invalid: {exc}") from None


def parse_scenario(text: str) -> Scenario:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"not valid TOML: {exc}") from None
    kwargs = {}
    for key, value in doc.items():
        if key in SECTIONS:
            kwargs[key] = _build(key, SECTIONS[key], value)
        elif key in TOP_LEVEL:
            kwargs[key] = value
        else:
            raise ScenarioError(f"unknown field {key}")
    if not isinstance(kwargs.get("seed", 0), int) or isinstance(kwargs.get("seed"), bool):
        raise ScenarioError("seed must be an integer")
    if not isinstance(kwargs.get("check_invariants", False), bool):
        raise ScenarioError("check_invariants must be a boolean")
    return Scenario(**kwargs)


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    return parse_scenario(path.read_text())


def scenario_dict(s: Scenario) -> Dict[str, Any]:
    doc: Dict[str, Any] = {"seed": s.seed, "check_invariants": s.check_invariants}
    for name in SECTIONS:
        table = asdict(getattr(s, name))
        if name == "network":
            table["partition_schedule"] = [
                {"start": a, "end": b, "peers": sorted(peers)} for a, b, peers in s.network.partition_schedule
            ]
        doc[name] = table
    return doc


def dump_scenario(s: Scenario) -> str:
    return tomli_w.dumps(scenario_dict(s))
