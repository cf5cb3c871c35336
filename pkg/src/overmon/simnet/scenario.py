"""Scenario configuration: workload, links, quotas, faults, monitoring.

Scenarios are plain JSON documents. Every field that tests or the CLI
need to vary can be overridden with ``key.path=value`` strings, and a
canonical hash of the resolved document stamps every output file so a
result can be traced back to its exact configuration.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from ..errors import OvermonError
from ..seeds import derive_seed
from .topology import Role, Topology, generate_tree


class ConfigError(OvermonError):
    """The scenario document is inconsistent or incomplete."""


class IncompatibleTarget(ConfigError):
    """The fault kind cannot be injected at the named node."""


class FaultKind(enum.Enum):
    A = "A"  # no fault
    B = "B"  # slow receiver CPU
    C = "C"  # slow transmitter CPU
    D = "D"  # uniform channel loss on the target's inbound link
    DP = "D'"  # bursty channel loss on the target's inbound link
    E = "E"  # receiver buffer quota cut
    F = "F"  # transmitter buffer quota cut


class LossModel(enum.Enum):
    NONE = "none"
    UNIFORM = "uniform"
    BURSTY = "bursty"


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bps: float = 1e9
    propagation_delay_s: float = 0.001
    loss: LossModel = LossModel.NONE
    loss_p: float = 0.0
    burst_len: int = 100
    burst_start_p: float = 0.0

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ConfigError("link bandwidth must be positive")
        if self.propagation_delay_s < 0:
            raise ConfigError("propagation delay must be nonnegative")
        if not 0.0 <= self.loss_p <= 1.0 or not 0.0 <= self.burst_start_p <= 1.0:
            raise ConfigError("loss probabilities must lie in [0, 1]")
        if self.burst_len < 1:
            raise ConfigError("burst length must be at least 1")

    def to_dict(self) -> dict:
        return {
            "bandwidth_bps": self.bandwidth_bps,
            "propagation_delay_s": self.propagation_delay_s,
            "loss": {
                "kind": self.loss.value,
                "p": self.loss_p,
                "burst_len": self.burst_len,
                "burst_start_p": self.burst_start_p,
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LinkModel":
        loss = raw.get("loss", {"kind": "none"})
        return cls(
            bandwidth_bps=float(raw.get("bandwidth_bps", 1e9)),
            propagation_delay_s=float(raw.get("propagation_delay_s", 0.001)),
            loss=LossModel(loss.get("kind", "none")),
            loss_p=float(loss.get("p", 0.0)),
            burst_len=int(loss.get("burst_len", 100)),
            burst_start_p=float(loss.get("burst_start_p", 0.0)),
        )


_DEFAULT_MAGNITUDE: dict[FaultKind, Any] = {
    FaultKind.B: 8.0,
    FaultKind.C: 8.0,
    FaultKind.D: 0.05,
    FaultKind.DP: (100, 0.01),
    FaultKind.E: 2_400_000.0,
    FaultKind.F: 2_400_000.0,
}


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind = FaultKind.A
    target: int = 0
    onset: int = 0
    magnitude: Any = None

    def resolved_magnitude(self) -> Any:
        if self.magnitude is not None:
            return self.magnitude
        return _DEFAULT_MAGNITUDE.get(self.kind)

    def validate(self, topology: Topology, duration: int) -> None:
        if self.kind is FaultKind.A:
            return
        if not 0 <= self.onset < duration:
            raise ConfigError(f"fault onset {self.onset} outside run of {duration} ticks")
        if self.target not in topology.node_ids:
            raise IncompatibleTarget(f"fault target {self.target} is not a node")
        role = topology.role_of(self.target)
        kind = self.kind
        if kind in (FaultKind.B, FaultKind.E) and role is not Role.RECEIVER:
            raise IncompatibleTarget(f"fault {kind.value} needs a receiver, got {role.value}")
        if kind in (FaultKind.C, FaultKind.F) and role is not Role.TRANSMITTER:
            raise IncompatibleTarget(f"fault {kind.value} needs the transmitter")
        if kind in (FaultKind.D, FaultKind.DP) and self.target == 0:
            raise IncompatibleTarget("link loss needs a non-root target (its inbound link)")
        mag = self.resolved_magnitude()
        if kind in (FaultKind.B, FaultKind.C) and not float(mag) > 1.0:
            raise ConfigError("service slowdown factor must exceed 1")
        if kind is FaultKind.D and not 0.0 < float(mag) < 1.0:
            raise ConfigError("loss probability must lie in (0, 1)")
        if kind is FaultKind.DP:
            burst_len, p_start = mag
            if int(burst_len) < 1 or not 0.0 < float(p_start) < 1.0:
                raise ConfigError("bursty loss needs burst_len >= 1 and p_start in (0, 1)")
        if kind in (FaultKind.E, FaultKind.F) and not float(mag) > 0:
            raise ConfigError("quota cut must leave a positive quota")

    def to_dict(self) -> dict:
        mag = self.resolved_magnitude()
        if isinstance(mag, tuple):
            mag = list(mag)
        return {"kind": self.kind.value, "target": self.target, "onset": self.onset, "magnitude": mag}

    @classmethod
    def from_dict(cls, raw: dict) -> "FaultSpec":
        mag = raw.get("magnitude")
        if isinstance(mag, list):
            mag = tuple(mag)
        return cls(
            kind=FaultKind(raw.get("kind", "A")),
            target=int(raw.get("target", 0)),
            onset=int(raw.get("onset", 0)),
            magnitude=mag,
        )


@dataclass(frozen=True)
class Workload:
    msg_rate: int = 10_000  # messages per tick (= per second at dt 1)
    msg_size: int = 8192  # bytes
    duration: int = 500  # ticks

    def __post_init__(self):
        if self.msg_rate <= 0 or self.msg_size <= 0 or self.duration <= 0:
            raise ConfigError("workload fields must be positive")

    def to_dict(self) -> dict:
        return {"msg_rate": self.msg_rate, "msg_size": self.msg_size, "duration": self.duration}

    @classmethod
    def from_dict(cls, raw: dict) -> "Workload":
        return cls(
            msg_rate=int(raw.get("msg_rate", 10_000)),
            msg_size=int(raw.get("msg_size", 8192)),
            duration=int(raw.get("duration", 500)),
        )


@dataclass(frozen=True)
class MonitoringConfig:
    dt_s: float = 1.0
    window_n: int = 100
    sigma2: float = 0.01
    top_k: int = 10
    alpha: float = 0.8  # trigger threshold as a fraction of the deadline
    trigger_window: int = 20
    significant_m: int = 12  # parameters given cross-node covariance rows
    shrinkage: float = 0.92
    cooldown_ticks: int = 100

    def __post_init__(self):
        if min(self.dt_s, self.sigma2, self.alpha, self.shrinkage + 1) <= 0:
            raise ConfigError("monitoring fields must be positive")
        if self.window_n < 2 or self.top_k < 1 or self.trigger_window < 1:
            raise ConfigError("monitoring window sizes must be sensible")
        if not 0.0 <= self.shrinkage < 1.0:
            raise ConfigError("shrinkage must lie in [0, 1)")
        if self.significant_m < 1:
            raise ConfigError("need at least one significant parameter")

    def to_dict(self) -> dict:
        return {
            "dt_s": self.dt_s,
            "window_n": self.window_n,
            "sigma2": self.sigma2,
            "top_k": self.top_k,
            "alpha": self.alpha,
            "trigger_window": self.trigger_window,
            "significant_m": self.significant_m,
            "shrinkage": self.shrinkage,
            "cooldown_ticks": self.cooldown_ticks,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MonitoringConfig":
        defaults = cls()
        kwargs = {}
        for name in defaults.to_dict():
            if name in raw:
                cast = int if isinstance(getattr(defaults, name), int) else float
                kwargs[name] = cast(raw[name])
        return cls(**kwargs)


_TARGET_METRICS = ("total_latency", "transmitter_latency", "trigger")


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    seed: int = 0
    node_count: int = 2
    topology_seed: int | None = None
    explicit_edges: tuple[tuple[int, int], ...] | None = None
    workload: Workload = field(default_factory=Workload)
    link: LinkModel = field(default_factory=LinkModel)
    quotas: dict[str, float] = field(
        default_factory=lambda: {
            "transmitter": 100_000_000.0,
            "forwarder": 32_000_000.0,
            "receiver": 2_000_000_000.0,
        }
    )
    service_pkts_per_tick: int = 12_500
    socket_queue_cap: int = 256
    deadline_s: float = 1.0
    target_metric: str = "total_latency"
    fault: FaultSpec = field(default_factory=FaultSpec)
    monitoring: MonitoringConfig = field(default_factory=MonitoringConfig)

    def __post_init__(self):
        if self.node_count < 2:
            raise ConfigError("need at least two nodes")
        if self.target_metric not in _TARGET_METRICS:
            raise ConfigError(f"unknown target metric {self.target_metric!r}")
        if self.deadline_s <= 0 or self.service_pkts_per_tick <= 0:
            raise ConfigError("deadline and service rate must be positive")
        if self.socket_queue_cap < 1:
            raise ConfigError("socket queue needs capacity for at least one packet")
        for role in ("transmitter", "forwarder", "receiver"):
            if float(self.quotas.get(role, 0)) <= 0:
                raise ConfigError(f"missing or nonpositive quota for role {role}")
        self.fault.validate(self.build_topology(), self.workload.duration)

    def build_topology(self) -> Topology:
        if self.explicit_edges is not None:
            n = self.node_count
            has_child = {p for p, _ in self.explicit_edges}
            from .topology import NodeInfo

            nodes = []
            for nid in range(n):
                if nid == 0:
                    role = Role.TRANSMITTER
                elif nid in has_child:
                    role = Role.FORWARDER
                else:
                    role = Role.RECEIVER
                nodes.append(NodeInfo(nid, role))
            return Topology(nodes=tuple(nodes), edges=self.explicit_edges, seed=0)
        seed = self.topology_seed
        if seed is None:
            seed = derive_seed(self.seed, "topology")
        return generate_tree(self.node_count, seed)

    def quota_for(self, role: Role) -> float:
        return float(self.quotas[role.value])

    def to_dict(self) -> dict:
        raw = {
            "name": self.name,
            "seed": self.seed,
            "node_count": self.node_count,
            "workload": self.workload.to_dict(),
            "link": self.link.to_dict(),
            "quotas": {k: float(v) for k, v in sorted(self.quotas.items())},
            "service_pkts_per_tick": self.service_pkts_per_tick,
            "socket_queue_cap": self.socket_queue_cap,
            "deadline_s": self.deadline_s,
            "target_metric": self.target_metric,
            "fault": self.fault.to_dict(),
            "monitoring": self.monitoring.to_dict(),
        }
        if self.topology_seed is not None:
            raw["topology_seed"] = self.topology_seed
        if self.explicit_edges is not None:
            raw["edges"] = [list(e) for e in self.explicit_edges]
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        known = {
            "name",
            "seed",
            "node_count",
            "topology_seed",
            "edges",
            "workload",
            "link",
            "quotas",
            "service_pkts_per_tick",
            "socket_queue_cap",
            "deadline_s",
            "target_metric",
            "fault",
            "monitoring",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        edges = raw.get("edges")
        return cls(
            name=str(raw.get("name", "scenario")),
            seed=int(raw.get("seed", 0)),
            node_count=int(raw.get("node_count", 2)),
            topology_seed=None if raw.get("topology_seed") is None else int(raw["topology_seed"]),
            explicit_edges=None if edges is None else tuple((int(a), int(b)) for a, b in edges),
            workload=Workload.from_dict(raw.get("workload", {})),
            link=LinkModel.from_dict(raw.get("link", {})),
            quotas={k: float(v) for k, v in raw.get(
                "quotas",
                {"transmitter": 100_000_000, "forwarder": 32_000_000, "receiver": 2_000_000_000},
            ).items()},
            service_pkts_per_tick=int(raw.get("service_pkts_per_tick", 12_500)),
            socket_queue_cap=int(raw.get("socket_queue_cap", 256)),
            deadline_s=float(raw.get("deadline_s", 1.0)),
            target_metric=str(raw.get("target_metric", "total_latency")),
            fault=FaultSpec.from_dict(raw.get("fault", {"kind": "A"})),
            monitoring=MonitoringConfig.from_dict(raw.get("monitoring", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("scenario JSON must be an object")
        return cls.from_dict(raw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **kwargs) -> "Scenario":
        raw = self.to_dict()
        edges = raw.pop("edges", None)
        topo_seed = raw.pop("topology_seed", None)
        base = Scenario.from_dict(raw)
        merged = {
            "name": base.name,
            "seed": base.seed,
            "node_count": base.node_count,
            "topology_seed": topo_seed,
            "explicit_edges": None if edges is None else tuple((a, b) for a, b in edges),
            "workload": base.workload,
            "link": base.link,
            "quotas": base.quotas,
            "service_pkts_per_tick": base.service_pkts_per_tick,
            "socket_queue_cap": base.socket_queue_cap,
            "deadline_s": base.deadline_s,
            "target_metric": base.target_metric,
            "fault": base.fault,
            "monitoring": base.monitoring,
        }
        merged.update(kwargs)
        return Scenario(**merged)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.path=value`` overrides to a raw scenario document."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, text = item.split("=", 1)
        keys = path.split(".")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        cursor = out
        for key in keys[:-1]:
            nxt = cursor.get(key)
            if not isinstance(nxt, dict):
                nxt = {}
                cursor[key] = nxt
            cursor = nxt
        cursor[keys[-1]] = value
    return out
