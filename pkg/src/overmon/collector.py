"""Per-node metric collection.

Each node owns a registry of named gauges and samples them once per tick
into a ring-buffered window. Before an analysis the window is snapshotted,
constant columns are filtered out, and the surviving parameters of all
nodes are merged into one dense global index.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import OvermonError
from .linalg import center_and_standardize


class ResourceKind(enum.Enum):
    """Resource a parameter is charged to when corrective actions run."""

    MEMORY = "memory"
    CPU = "cpu"
    BANDWIDTH = "bandwidth"
    NONE = "none"


class DuplicateName(OvermonError):
    """A metric name was registered twice on the same node."""


class LengthMismatch(OvermonError):
    """A sample vector does not match the window's column count."""


@dataclass(frozen=True, order=True)
class ParameterId:
    """One monitored parameter, addressable across the whole deployment.

    ``global_index`` is the dense column number: local position before a
    registry merge, deployment-wide position after.
    """

    node: int
    name: str
    global_index: int
    resource_kind: ResourceKind = ResourceKind.NONE


class MetricWindow:
    """Ring buffer of the latest ``n`` samples over ``k_local`` columns."""

    def __init__(self, n: int, dt: float, k_local: int,
                 params: tuple[ParameterId, ...] | None = None):
        if n < 1:
            raise ValueError("window length must be at least 1")
        if k_local < 1:
            raise ValueError("window needs at least one column")
        if params is not None and len(params) != k_local:
            raise ValueError("params length does not match column count")
        self.n = n
        self.dt = float(dt)
        self.k_local = k_local
        self.params = params
        self._buf = np.zeros((n, k_local))
        self._pos = 0
        self._count = 0
        self.tick = 0

    @property
    def filled(self) -> int:
        return self._count

    def record_tick(self, sample) -> None:
        row = np.asarray(sample, dtype=float).reshape(-1)
        if row.shape[0] != self.k_local:
            raise LengthMismatch(
                f"sample has {row.shape[0]} values, window has {self.k_local} columns")
        self._buf[self._pos] = row
        self._pos = (self._pos + 1) % self.n
        self._count = min(self._count + 1, self.n)
        self.tick += 1

    def window_matrix(self) -> np.ndarray:
        """Retained samples as a filled x k_local matrix, oldest row first."""
        if self._count < self.n:
            return self._buf[:self._count].copy()
        return np.vstack((self._buf[self._pos:], self._buf[:self._pos]))

    def row_ticks(self) -> np.ndarray:
        """Absolute tick number of each retained row, chronological."""
        return np.arange(self.tick - self._count, self.tick)


class MetricRegistry:
    """Named gauges of one node, sampled in registration order."""

    def __init__(self, node: int):
        self.node = node
        self._names: list[str] = []
        self._kinds: list[ResourceKind] = []
        self._gauges: list[Callable[[], float] | None] = []
        self._index: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._names)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._names)

    def register(self, name: str, kind: ResourceKind = ResourceKind.NONE,
                 gauge: Callable[[], float] | None = None) -> int:
        if name in self._index:
            raise DuplicateName(f"node {self.node}: metric {name!r} already registered")
        idx = len(self._names)
        self._index[name] = idx
        self._names.append(name)
        self._kinds.append(kind)
        self._gauges.append(gauge)
        return idx

    def local_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"node {self.node}: unknown metric {name!r}") from None

    def kind_of(self, name: str) -> ResourceKind:
        return self._kinds[self.local_index(name)]

    def parameter_ids(self) -> list[ParameterId]:
        """Local view: global_index is the local column position."""
        return [ParameterId(self.node, nm, i, kd)
                for i, (nm, kd) in enumerate(zip(self._names, self._kinds))]

    def sample(self) -> np.ndarray:
        vals = np.empty(len(self._names))
        for i, fn in enumerate(self._gauges):
            if fn is None:
                raise ValueError(
                    f"node {self.node}: metric {self._names[i]!r} has no gauge")
            vals[i] = float(fn())
        return vals

    def make_window(self, n: int, dt: float) -> MetricWindow:
        return MetricWindow(n, dt, len(self._names), tuple(self.parameter_ids()))

    def sample_tick(self, window: MetricWindow) -> None:
        window.record_tick(self.sample())


def filter_constant(window: MetricWindow, eps_var: float = 1e-9
                    ) -> tuple[list[ParameterId], list[ParameterId]]:
    """Split the window's parameters into varying and constant columns.

    Constancy is judged on standardized values, so the threshold is scale
    free: a varying column standardizes to unit variance and a constant one
    to zero. Kept ids are renumbered densely in original column order;
    dropped ids keep their original positions.
    """
    if window.params is None:
        raise ValueError("window carries no parameter ids")
    if window.filled < 2:
        raise ValueError("need at least 2 samples to judge constancy")
    m = window.window_matrix()
    standardized, _, _ = center_and_standardize(m)
    variances = standardized.var(axis=0, ddof=1)
    kept: list[ParameterId] = []
    dropped: list[ParameterId] = []
    for pos, pid in enumerate(window.params):
        if variances[pos] < eps_var:
            dropped.append(pid)
        else:
            kept.append(ParameterId(pid.node, pid.name, len(kept), pid.resource_kind))
    return kept, dropped


def merge_registry(kept_by_node: Mapping[int, Sequence[ParameterId]]
                   ) -> list[ParameterId]:
    """Combine per-node kept parameters into one dense global index.

    Ordering is (node id, local position), so the result is independent of
    the mapping's iteration order.
    """
    merged: list[ParameterId] = []
    for node in sorted(kept_by_node):
        seen: set[str] = set()
        for pid in kept_by_node[node]:
            if pid.node != node:
                raise ValueError(f"parameter {pid.name!r} listed under node {node} "
                                 f"but belongs to node {pid.node}")
            if pid.name in seen:
                raise DuplicateName(f"node {node}: metric {pid.name!r} reported twice")
            seen.add(pid.name)
            merged.append(ParameterId(pid.node, pid.name, len(merged),
                                      pid.resource_kind))
    return merged


def dump_window_csv(window: MetricWindow, fh) -> None:
    """Write the retained window as CSV: tick column plus one per parameter."""
    if window.params is not None:
        names = [p.name for p in window.params]
    else:
        names = [f"c{i}" for i in range(window.k_local)]
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["tick"] + names)
    matrix = window.window_matrix()
    for tick, row in zip(window.row_ticks(), matrix):
        writer.writerow([int(tick)] + [repr(float(v)) for v in row])
