"""Deterministic simulator of a reliable publish/subscribe overlay tree.

The package provides the monitored workload (a transmitter streaming
fixed-size messages down a tree to receivers, with NACK-based recovery
and quota-bounded buffers) and the transport that carries the monitoring
protocol's own messages, with injectable host and network faults.
"""

from .topology import NodeInfo, Role, Topology, generate_tree
from .scenario import (
    ConfigError,
    FaultKind,
    FaultSpec,
    IncompatibleTarget,
    LinkModel,
    LossModel,
    MonitoringConfig,
    Scenario,
    Workload,
)
from .engine import LinkCounters, SimResult, Simulation, SimTransport, run_scenario

__all__ = [
    "ConfigError",
    "FaultKind",
    "FaultSpec",
    "IncompatibleTarget",
    "LinkCounters",
    "LinkModel",
    "LossModel",
    "MonitoringConfig",
    "NodeInfo",
    "Role",
    "Scenario",
    "SimResult",
    "SimTransport",
    "Simulation",
    "Topology",
    "Workload",
    "generate_tree",
    "run_scenario",
]
