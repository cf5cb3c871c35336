"""Overlay tree topologies.

Node 0 is always the transmitter (tree root). Interior nodes forward,
leaves receive. Trees are grown by uniform random recursive attachment,
so a fixed seed reproduces the same tree.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..errors import OvermonError


class Role(enum.Enum):
    TRANSMITTER = "transmitter"
    FORWARDER = "forwarder"
    RECEIVER = "receiver"


@dataclass(frozen=True)
class NodeInfo:
    node_id: int
    role: Role


@dataclass(frozen=True)
class Topology:
    nodes: tuple[NodeInfo, ...]
    edges: tuple[tuple[int, int], ...]  # (parent, child), parent closer to root
    seed: int
    _children: dict[int, tuple[int, ...]] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )
    _parent: dict[int, int] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self):
        n = len(self.nodes)
        if n < 2:
            raise OvermonError("topology needs at least two nodes")
        if len(self.edges) != n - 1:
            raise OvermonError("edge count must be node count minus one")
        kids: dict[int, list[int]] = {info.node_id: [] for info in self.nodes}
        for parent, child in self.edges:
            if child in self._parent:
                raise OvermonError(f"node {child} has two parents")
            self._parent[child] = parent
            kids[parent].append(child)
        for nid, lst in kids.items():
            self._children[nid] = tuple(sorted(lst))
        # Reachability from the root proves connectedness (and with the
        # edge-count check above, acyclicity).
        seen = {0}
        frontier = [0]
        while frontier:
            nid = frontier.pop()
            for child in self._children[nid]:
                if child not in seen:
                    seen.add(child)
                    frontier.append(child)
        if len(seen) != n:
            raise OvermonError("edges do not connect all nodes to the root")
        for info in self.nodes:
            expected = self._expected_role(info.node_id)
            if info.role is not expected:
                raise OvermonError(
                    f"node {info.node_id} has role {info.role.value}, "
                    f"expected {expected.value}"
                )

    def _expected_role(self, nid: int) -> Role:
        if nid == 0:
            return Role.TRANSMITTER
        return Role.RECEIVER if not self._children[nid] else Role.FORWARDER

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(info.node_id for info in self.nodes)

    def role_of(self, nid: int) -> Role:
        return self.nodes[nid].role

    def children_of(self, nid: int) -> tuple[int, ...]:
        return self._children[nid]

    def parent_of(self, nid: int) -> int | None:
        return self._parent.get(nid)

    def receivers(self) -> tuple[int, ...]:
        return tuple(i.node_id for i in self.nodes if i.role is Role.RECEIVER)

    def path_to_root(self, nid: int) -> tuple[int, ...]:
        """Nodes from nid up to and including the root."""
        path = [nid]
        while path[-1] != 0:
            path.append(self._parent[path[-1]])
        return tuple(path)

    def subtree_receivers(self, nid: int) -> tuple[int, ...]:
        """Receivers at or below nid, ascending."""
        out = []
        stack = [nid]
        while stack:
            cur = stack.pop()
            if self.role_of(cur) is Role.RECEIVER:
                out.append(cur)
            stack.extend(self._children[cur])
        return tuple(sorted(out))


def generate_tree(n: int, seed: int) -> Topology:
    """Grow a tree by attaching node i to a uniformly random earlier node."""
    if n < 2:
        raise OvermonError("need at least two nodes")
    rng = np.random.default_rng(seed)
    edges = []
    for i in range(1, n):
        parent = int(rng.integers(0, i))
        edges.append((parent, i))
    has_child = {p for p, _ in edges}
    nodes = []
    for nid in range(n):
        if nid == 0:
            role = Role.TRANSMITTER
        elif nid in has_child:
            role = Role.FORWARDER
        else:
            role = Role.RECEIVER
        nodes.append(NodeInfo(nid, role))
    return Topology(nodes=tuple(nodes), edges=tuple(edges), seed=seed)
