"""Discrete-event simulator of a tree-structured DHT under peer fluctuation."""

from .keyspace import IntervalId, KeyspaceConfig
from .protocol import BackupSettings, Overlay, Peer, ProtocolParams
from .runner import Simulation, run_scenario
from .scenario import Scenario, load_scenario

__version__ = "0.1.0"

__all__ = [
    "IntervalId",
    "KeyspaceConfig",
    "BackupSettings",
    "Overlay",
    "Peer",
    "ProtocolParams",
    "Simulation",
    "run_scenario",
    "Scenario",
    "load_scenario",
]
