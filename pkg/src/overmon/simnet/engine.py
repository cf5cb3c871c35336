"""Tick-driven simulator of the reliable publish/subscribe overlay.

The data plane is aggregated per tick: messages are tracked as half-open
sequence ranges, never as individual objects, so a 500-tick run with
tens of thousands of messages per tick stays cheap and byte-exact.
Within a tick the phases run in a fixed order (control-in, submission,
admission, transmit, per-link loss, socket intake, delivery, control-out,
metric sampling, monitor hook), and every random draw comes from a
purpose-labeled generator derived from the scenario seed, so identical
scenarios replay identically.

Reliability couples the nodes: the transmitter retains every admitted
message until all receivers acknowledged it, and a node only sends what
the downstream buffer can hold (judged by its start-of-tick free space).
A slow or starved receiver therefore backs traffic up hop by hop until
the transmitter's own pool and latency degrade, which is exactly the
symptom the monitoring pipeline is meant to trace back.
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..collector import MetricRegistry, MetricWindow, ResourceKind
from ..seeds import derive_rng
from ..transport import HEADER_BYTES, TransportFailure
from .scenario import FaultKind, FaultSpec, LossModel, Scenario
from .topology import Role, Topology

ACK_BYTES = HEADER_BYTES + 8
NACK_RANGE_BYTES = 16
VSIZE_BASE = 64_000_000.0


class SeqSet:
    """Sorted disjoint set of half-open integer ranges."""

    def __init__(self):
        self._starts: list[int] = []
        self._ends: list[int] = []

    def add(self, a: int, b: int) -> None:
        if a >= b:
            return
        i = bisect.bisect_left(self._ends, a)
        j = bisect.bisect_right(self._starts, b)
        if i < j:
            a = min(a, self._starts[i])
            b = max(b, self._ends[j - 1])
        self._starts[i:j] = [a]
        self._ends[i:j] = [b]

    def subtract(self, a: int, b: int) -> None:
        if a >= b or not self._starts:
            return
        i = bisect.bisect_left(self._ends, a + 1)
        new_s, new_e = [], []
        j = i
        while j < len(self._starts) and self._starts[j] < b:
            s, e = self._starts[j], self._ends[j]
            if s < a:
                new_s.append(s)
                new_e.append(a)
            if e > b:
                new_s.append(b)
                new_e.append(e)
            j += 1
        self._starts[i:j] = new_s
        self._ends[i:j] = new_e

    def pop_prefix(self, wm: int) -> tuple[int, list[tuple[int, int]]]:
        """Advance wm through ranges contiguous with it; return delivered."""
        out = []
        while self._starts and self._starts[0] <= wm:
            a, b = self._starts.pop(0), self._ends.pop(0)
            if b > wm:
                out.append((wm, b))
                wm = b
        return wm, out

    def missing(self, lo: int, hi: int) -> list[tuple[int, int]]:
        """Gaps in [lo, hi) not covered by the set."""
        gaps = []
        cur = lo
        for s, e in zip(self._starts, self._ends):
            if e <= lo:
                continue
            if s >= hi:
                break
            if s > cur:
                gaps.append((cur, min(s, hi)))
            cur = max(cur, e)
            if cur >= hi:
                break
        if cur < hi:
            gaps.append((cur, hi))
        return gaps

    def covers(self, a: int, b: int) -> bool:
        i = bisect.bisect_right(self._starts, a) - 1
        return i >= 0 and self._ends[i] >= b

    def covered_parts(self, a: int, b: int) -> list[tuple[int, int]]:
        """Sub-ranges of [a, b) present in the set."""
        parts = []
        cur = a
        for ga, gb in self.missing(a, b):
            if ga > cur:
                parts.append((cur, ga))
            cur = gb
        if cur < b:
            parts.append((cur, b))
        return parts

    def intersection(self, other: "SeqSet") -> "SeqSet":
        out = SeqSet()
        i = j = 0
        a_s, a_e = self._starts, self._ends
        b_s, b_e = other._starts, other._ends
        while i < len(a_s) and j < len(b_s):
            lo = max(a_s[i], b_s[j])
            hi = min(a_e[i], b_e[j])
            if lo < hi:
                out.add(lo, hi)
            if a_e[i] < b_e[j]:
                i += 1
            else:
                j += 1
        return out

    def total(self) -> int:
        return sum(e - s for s, e in zip(self._starts, self._ends))

    def ranges(self) -> list[tuple[int, int]]:
        return list(zip(self._starts, self._ends))


def _ranges_total(ranges) -> int:
    return sum(r[1] - r[0] for r in ranges)


def _split_ranges(ranges, drop_pos: np.ndarray):
    """Split tagged ranges at flat drop positions.

    ranges: list of (a, b, tag); drop_pos: sorted flat indices into the
    concatenation. Returns (kept, dropped) with tags preserved.
    """
    kept, dropped = [], []
    off = 0
    di = 0
    n_drop = len(drop_pos)
    for a, b, tag in ranges:
        length = b - a
        cur = a
        while di < n_drop and drop_pos[di] < off + length:
            pos = a + int(drop_pos[di]) - off
            if pos > cur:
                kept.append((cur, pos, tag))
            dropped.append((pos, pos + 1))
            cur = pos + 1
            di += 1
        if cur < b:
            kept.append((cur, b, tag))
        off += length
    return kept, dropped


def _queue_wait(n: float, svc: float, dt: float) -> float:
    """Mean in-tick queueing delay for n arrivals served at svc per tick.

    M/D/1 shape: negligible when lightly loaded, steep near saturation.
    Saturated backlogs are carried by whole-tick terms, so utilization is
    clamped just below 1.
    """
    rho = min(n / svc, 0.97)
    return rho / (2.0 * svc * (1.0 - rho)) * dt


def _interleave_keep(ranges, capacity: int):
    """Keep `capacity` evenly spaced packets; drop the rest in between."""
    n = _ranges_total(ranges)
    if capacity >= n:
        return list(ranges), []
    if capacity <= 0:
        return [], [(a, b) for a, b, _ in ranges]
    keep = np.floor(np.arange(capacity) * (n / capacity)).astype(np.int64)
    mask = np.ones(n, dtype=bool)
    mask[keep] = False
    return _split_ranges(ranges, np.nonzero(mask)[0])


@dataclass
class LinkCounters:
    offered_pkts: int = 0
    delivered_pkts: int = 0
    dropped_pkts: int = 0
    retrans_pkts: int = 0
    data_bytes: int = 0
    ctrl_bytes: int = 0
    monitor_bytes: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class _LossState:
    """Per-link loss process; bursty keeps run state across ticks."""

    def __init__(self, rng):
        self.model = LossModel.NONE
        self.p = 0.0
        self.burst_len = 1
        self.p_start = 0.0
        self.rng = rng
        self.burst_remaining = 0

    def configure(self, model: LossModel, p: float, burst_len: int, p_start: float):
        self.model = model
        self.p = p
        self.burst_len = burst_len
        self.p_start = p_start

    def thin(self, ranges):
        n = _ranges_total(ranges)
        if n == 0 or self.model is LossModel.NONE:
            return list(ranges), []
        if self.model is LossModel.UNIFORM:
            k = int(self.rng.binomial(n, self.p))
            if k == 0:
                return list(ranges), []
            pos = np.sort(self.rng.choice(n, size=k, replace=False))
            return _split_ranges(ranges, pos)
        drops = []
        pos = 0
        while pos < n:
            if self.burst_remaining > 0:
                take = min(self.burst_remaining, n - pos)
                drops.extend(range(pos, pos + take))
                self.burst_remaining -= take
                pos += take
                continue
            gap = int(self.rng.geometric(self.p_start))
            start = pos + gap - 1
            if start >= n:
                break
            self.burst_remaining = self.burst_len
            pos = start
        if not drops:
            return list(ranges), []
        return _split_ranges(ranges, np.asarray(drops, dtype=np.int64))


class _Node:
    def __init__(self, nid: int, role: Role, scenario: Scenario, topo: Topology):
        self.nid = nid
        self.role = role
        self.quota = scenario.quota_for(role)
        self.svc_base = scenario.service_pkts_per_tick
        self.svc_divisor = 1.0
        # staging memory for one full-rate service tick; a receiver squeezed
        # below this thrashes and its drain rate collapses quadratically
        self.mem_need = float(scenario.service_pkts_per_tick * scenario.workload.msg_size)
        self.sock_cap = scenario.socket_queue_cap
        self.sock_queue: deque = deque()  # (a, b, tag)
        self.sock_len = 0
        self.children = topo.children_of(nid)
        self.parent = topo.parent_of(nid)
        # forwarder store-and-forward queues, arrival order, one per branch;
        # a message is retained until the slowest branch has taken its copy
        self.pending: dict[int, deque] = {c: deque() for c in self.children}
        self.pending_bytes: dict[int, int] = {c: 0 for c in self.children}
        self.held_bytes = 0.0
        # receiver reassembly state
        self.wm = 0
        self.got = SeqSet()
        self.hi_seen = 0
        self.nack_pending = SeqSet()
        self.nack_timers: deque = deque()  # (tick requested, a, b)
        self.max_run_ever = 0
        self.metrics: dict[str, float] = {}
        self.watch: deque = deque(maxlen=scenario.monitoring.trigger_window)

    @property
    def svc(self) -> int:
        eff = self.svc_base / self.svc_divisor
        if self.role is Role.RECEIVER and self.quota < self.mem_need:
            eff *= (self.quota / self.mem_need) ** 2
        return max(1, int(eff))


def _constant(value: float) -> Callable[[], float]:
    return lambda: value


class Simulation:
    """One deterministic run of a scenario."""

    def __init__(self, scenario: Scenario, monitor: Callable | None = None):
        self.scenario = scenario
        self.topology = scenario.build_topology()
        self.monitor = monitor
        self.tick = 0
        self.size = scenario.workload.msg_size
        self.dt = scenario.monitoring.dt_s
        self.rng_workload = derive_rng(scenario.seed, "workload")
        self.load_ar = 0.0  # slow AR(1) demand swing shared by all gauges
        self.nodes: dict[int, _Node] = {}
        self.links: dict[tuple[int, int], LinkCounters] = {}
        self.loss: dict[tuple[int, int], _LossState] = {}
        self.event_log: list[dict] = []
        self.noise: dict[int, np.random.Generator] = {}
        topo = self.topology
        for nid in topo.node_ids:
            self.nodes[nid] = _Node(nid, topo.role_of(nid), scenario, topo)
            self.noise[nid] = derive_rng(scenario.seed, f"noise:{nid}")
        for parent, child in topo.edges:
            key = (parent, child)
            self.links[key] = LinkCounters()
            state = _LossState(derive_rng(scenario.seed, f"loss:{parent}-{child}"))
            if scenario.link.loss is not LossModel.NONE:
                state.configure(scenario.link.loss, scenario.link.loss_p,
                                scenario.link.burst_len, scenario.link.burst_start_p)
            self.loss[key] = state
        self.link_pkt_cap = int(scenario.link.bandwidth_bps * self.dt / (8 * self.size))
        # transmitter pool: a message stays admitted until every receiver
        # has confirmed holding it (not necessarily delivered in order)
        self.admitted_upto = 0
        self.sent_upto = 0
        # each root branch paces itself: a slow subtree lags on its own
        # cursor while the others keep streaming from the shared pool
        self.branch_sent: dict[int, int] = {c: 0 for c in topo.children_of(0)}
        self.released_total = 0
        self.app_backlog = 0
        self.cum_submitted: list[int] = []
        self.retrans_queue: deque = deque()  # (a, b, dst)
        self.received_by: dict[int, SeqSet] = {r: SeqSet() for r in topo.receivers()}
        self._retrans_arrivals: dict[int, list] = {nid: [] for nid in topo.node_ids}
        self.ctrl_inbox: list[tuple] = []  # arrives at transmitter next tick
        self.mon_out: dict[int, float] = {nid: 0.0 for nid in topo.node_ids}
        self.mon_in: dict[int, float] = {nid: 0.0 for nid in topo.node_ids}
        self.fault_applied = False
        self.order = self._bfs_order()
        self.base_path_delay = self._path_delays()
        self.registries: dict[int, MetricRegistry] = {}
        self.windows: dict[int, MetricWindow] = {}
        self.history: dict[int, list[np.ndarray]] = {nid: [] for nid in topo.node_ids}
        self.latency_trace: dict[int, list[float]] = {nid: [] for nid in topo.node_ids}
        self._pending_quota: list[tuple[int, int, float]] = []
        self.transport = SimTransport(self)
        self.annotations: dict = {}
        self._register_gauges()

    # -- setup -----------------------------------------------------------

    def _bfs_order(self) -> list[int]:
        order, frontier = [0], deque([0])
        while frontier:
            nid = frontier.popleft()
            for child in self.topology.children_of(nid):
                order.append(child)
                frontier.append(child)
        return order

    def _path_delays(self) -> dict[int, float]:
        """Fixed per-hop transfer time from the root to each node."""
        per_hop = self.size * 8 / self.scenario.link.bandwidth_bps + self.scenario.link.propagation_delay_s
        out = {0: 0.0}
        for nid in self.order[1:]:
            out[nid] = out[self.topology.parent_of(nid)] + per_hop
        return out

    def _register_gauges(self):
        s = self.scenario
        n_cfg = s.monitoring.window_n
        for nid in self.topology.node_ids:
            node = self.nodes[nid]
            reg = MetricRegistry(nid)

            def live(name: str, node=node) -> Callable[[], float]:
                return lambda: node.metrics.get(name, 0.0)

            reg.register("buf_quota_bytes", ResourceKind.MEMORY, live("buf_quota_bytes"))
            reg.register("buf_free_bytes", ResourceKind.MEMORY, live("buf_free_bytes"))
            if node.role is Role.TRANSMITTER:
                reg.register("buf_used_bytes", ResourceKind.MEMORY, live("buf_used_bytes"))
                reg.register("buf_admitted_pkts", ResourceKind.MEMORY, live("buf_admitted_pkts"))
                reg.register("buf_denied_pkts", ResourceKind.MEMORY, live("buf_denied_pkts"))
                reg.register("buf_released_pkts", ResourceKind.MEMORY, live("buf_released_pkts"))
                reg.register("buf_wait_mean_s", ResourceKind.MEMORY, live("buf_wait_mean_s"))
                reg.register("buf_backlog_pkts", ResourceKind.MEMORY, live("buf_backlog_pkts"))
                reg.register("tx_sent_pkts", ResourceKind.BANDWIDTH, live("tx_sent_pkts"))
                reg.register("tx_sent_bytes", ResourceKind.BANDWIDTH, live("tx_sent_bytes"))
                reg.register("tx_retrans_pkts", ResourceKind.BANDWIDTH, live("tx_retrans_pkts"))
                reg.register("acks_in_pkts", ResourceKind.BANDWIDTH, live("acks_in_pkts"))
                reg.register("nacks_in_pkts", ResourceKind.BANDWIDTH, live("nacks_in_pkts"))
            else:
                reg.register("buf_held_bytes", ResourceKind.MEMORY, live("buf_held_bytes"))
                reg.register("rx_in_pkts", ResourceKind.BANDWIDTH, live("rx_in_pkts"))
                reg.register("rx_in_bytes", ResourceKind.BANDWIDTH, live("rx_in_bytes"))
                reg.register("sock_queue_pkts", ResourceKind.CPU, live("sock_queue_pkts"))
                reg.register("sock_dropped_pkts", ResourceKind.CPU, live("sock_dropped_pkts"))
            if node.role is Role.FORWARDER:
                reg.register("fwd_out_pkts", ResourceKind.BANDWIDTH, live("fwd_out_pkts"))
                reg.register("fwd_out_bytes", ResourceKind.BANDWIDTH, live("fwd_out_bytes"))
            if node.role is Role.RECEIVER:
                reg.register("rx_delivered_pkts", ResourceKind.BANDWIDTH, live("rx_delivered_pkts"))
                reg.register("rx_delivered_bytes", ResourceKind.BANDWIDTH, live("rx_delivered_bytes"))
                reg.register("rx_latency_mean_s", ResourceKind.NONE, live("rx_latency_mean_s"))
                reg.register("rx_latency_max_s", ResourceKind.NONE, live("rx_latency_max_s"))
                reg.register("rx_latency_jitter_ms", ResourceKind.NONE, live("rx_latency_jitter_ms"))
                reg.register("rx_svc_wait_ms", ResourceKind.CPU, live("rx_svc_wait_ms"))
                reg.register("rx_gap_events", ResourceKind.BANDWIDTH, live("rx_gap_events"))
                reg.register("rx_gap_max_run", ResourceKind.BANDWIDTH, live("rx_gap_max_run"))
                reg.register("nacks_out_pkts", ResourceKind.BANDWIDTH, live("nacks_out_pkts"))
                reg.register("rx_retrans_in_pkts", ResourceKind.BANDWIDTH, live("rx_retrans_in_pkts"))
                reg.register("acks_out_pkts", ResourceKind.BANDWIDTH, live("acks_out_pkts"))
            reg.register("cpu_busy_frac", ResourceKind.CPU, live("cpu_busy_frac"))
            reg.register("cpu_capacity_pkts", ResourceKind.CPU, live("cpu_capacity_pkts"))
            reg.register("proc_vsize_bytes", ResourceKind.MEMORY, live("proc_vsize_bytes"))
            reg.register("mon_tx_bytes", ResourceKind.BANDWIDTH, live("mon_tx_bytes"))
            reg.register("mon_rx_bytes", ResourceKind.BANDWIDTH, live("mon_rx_bytes"))
            reg.register("cfg_msg_size_bytes", ResourceKind.NONE, _constant(float(self.size)))
            reg.register("cfg_deadline_ms", ResourceKind.NONE, _constant(s.deadline_s * 1000))
            reg.register("cfg_window_ticks", ResourceKind.NONE, _constant(float(n_cfg)))
            reg.register("cfg_sock_cap_pkts", ResourceKind.NONE, _constant(float(s.socket_queue_cap)))
            reg.register("cfg_nack_refresh_ticks", ResourceKind.NONE, _constant(10.0))
            reg.register("cfg_neighbors", ResourceKind.NONE, _constant(float(len(node.children) + (0 if nid == 0 else 1))))
            reg.register("cfg_mtu_bytes", ResourceKind.NONE, _constant(9000.0))
            reg.register("proto_version", ResourceKind.NONE, _constant(3.0))
            self.registries[nid] = reg
            self.windows[nid] = reg.make_window(n_cfg, self.dt)

    # -- public controls --------------------------------------------------

    def inject_fault(self, fault: FaultSpec) -> None:
        fault.validate(self.topology, self.scenario.workload.duration)
        kind = fault.kind
        if kind is FaultKind.A:
            return
        mag = fault.resolved_magnitude()
        if kind in (FaultKind.B, FaultKind.C):
            self.nodes[fault.target].svc_divisor = float(mag)
        elif kind in (FaultKind.E, FaultKind.F):
            self.nodes[fault.target].quota = float(mag)
        else:
            link = (self.topology.parent_of(fault.target), fault.target)
            state = self.loss[link]
            if kind is FaultKind.D:
                state.configure(LossModel.UNIFORM, float(mag), 1, 0.0)
            else:
                burst_len, p_start = mag
                state.configure(LossModel.BURSTY, 0.0, int(burst_len), float(p_start))
        self._log("fault_onset", fault=kind.value, target=fault.target)

    def raise_quota(self, nid: int, new_quota: float, at_tick: int | None = None) -> None:
        when = self.tick + 1 if at_tick is None else at_tick
        self._pending_quota.append((when, nid, float(new_quota)))

    # -- main loop ---------------------------------------------------------

    def run(self, drain: bool = False) -> "SimResult":
        duration = self.scenario.workload.duration
        while self.tick < duration:
            self.tick_once()
        if drain:
            guard = duration + 300
            while self.tick < guard and (self.released_total < self.admitted_upto):
                self.tick_once(submit=False)
        return self._result()

    def tick_once(self, submit: bool = True) -> None:
        t = self.tick
        s = self.scenario
        for when, nid, quota in list(self._pending_quota):
            if when <= t:
                self.nodes[nid].quota = quota
                self._pending_quota.remove((when, nid, quota))
                self._log("quota_change", node=nid, quota=quota)
        for node in self.nodes.values():
            node.metrics = {}

        # caps are advertised from the state peers saw last tick, so a fault
        # landing now can overrun a queue before the window tightens
        intake_cap = self._intake_caps()
        if not self.fault_applied and s.fault.kind is not FaultKind.A and t == s.fault.onset:
            self.inject_fault(s.fault)
            self.fault_applied = True
        self._control_in(t)
        submitted = self._submit(submit)
        admitted, denied = self._admit()
        arrivals = self._transmit(t, intake_cap, denied)
        self._propagate(t, arrivals, intake_cap)
        self._sample_metrics(t, submitted, admitted, denied)
        if self.monitor is not None:
            self.monitor(self, t)
        self.tick += 1

    # -- tick phases -------------------------------------------------------

    def _intake_caps(self) -> dict[int, int]:
        caps = {}
        for nid, node in self.nodes.items():
            if node.role is Role.TRANSMITTER:
                continue
            held = node.held_bytes if node.role is Role.FORWARDER else node.got.total() * self.size
            held += node.sock_len * self.size
            cap = int((node.quota - held) // self.size)
            # the advertised window also reflects drain: socket headroom plus
            # one service tick, so a slow consumer throttles its own branch
            # instead of shedding arrivals every tick
            cap = min(cap, node.sock_cap + node.svc - node.sock_len)
            caps[nid] = max(0, cap)
        return caps

    def _control_in(self, t: int) -> None:
        inbox, self.ctrl_inbox = self.ctrl_inbox, []
        acked = 0
        nack_ranges = 0
        for kind, rid, payload in inbox:
            if kind == "ack":
                got = self.received_by[rid]
                before = got.total()
                for a, b in payload:
                    got.add(a, b)
                acked += got.total() - before
            else:
                for a, b in payload:
                    b = min(b, self.sent_upto)
                    if a < b:
                        self.retrans_queue.append((a, b, rid))
                        nack_ranges += 1
        sets = list(self.received_by.values())
        agreed = sets[0]
        for other in sets[1:]:
            agreed = agreed.intersection(other)
        released = max(0, agreed.total() - self.released_total)
        self.released_total = max(self.released_total, agreed.total())
        tx = self.nodes[0]
        tx.metrics["buf_released_pkts"] = float(released)
        tx.metrics["acks_in_pkts"] = float(acked)
        tx.metrics["nacks_in_pkts"] = float(nack_ranges)

    def _submit(self, submit: bool) -> int:
        # demand swings slowly around the nominal rate but never outruns a
        # healthy node's service capacity, so an unfaulted run cannot trip
        # the latency trigger on workload alone
        self.load_ar = 0.9 * self.load_ar + float(self.rng_workload.normal(0.0, 0.0218))
        if submit:
            swing = min(max(1.0 + self.load_ar, 0.7), 1.2)
            submitted = int(self.rng_workload.poisson(self.scenario.workload.msg_rate * swing))
        else:
            submitted = 0
        self.app_backlog += submitted
        prev = self.cum_submitted[-1] if self.cum_submitted else 0
        self.cum_submitted.append(prev + submitted)
        return submitted

    def _admit(self) -> tuple[int, int]:
        tx = self.nodes[0]
        pool = (self.admitted_upto - self.released_total) * self.size
        cap = max(0, int((tx.quota - pool) // self.size))
        admitted = min(self.app_backlog, cap)
        backlog_prev = self.app_backlog
        submitted_now = self.cum_submitted[-1] - (self.cum_submitted[-2] if len(self.cum_submitted) > 1 else 0)
        admitted_from_new = max(0, admitted - (backlog_prev - submitted_now))
        denied = submitted_now - admitted_from_new
        self.admitted_upto += admitted
        self.app_backlog -= admitted
        return admitted, denied

    def _transmit(self, t: int, intake_cap: dict[int, int], denied: int = 0) -> dict[int, list]:
        """Root sends retransmissions then new data; returns per-node arrivals."""
        tx = self.nodes[0]
        children = tx.children
        arrivals: dict[int, list] = {nid: [] for nid in self.nodes}

        # repairs are not gated by downstream intake: they fill holes in
        # buffers that already reserved the space
        repair_budget = min(tx.svc, self.link_pkt_cap)
        self._retrans_arrivals = {nid: [] for nid in self.nodes}
        retrans_sent = 0
        while self.retrans_queue and retrans_sent < repair_budget:
            a, b, dst = self.retrans_queue.popleft()
            take = min(b - a, repair_budget - retrans_sent)
            self._route_retrans(t, a, a + take, dst)
            retrans_sent += take
            if a + take < b:
                self.retrans_queue.appendleft((a + take, b, dst))

        old_hi = self.sent_upto
        for child in children:
            budget = min(tx.svc - retrans_sent, self.link_pkt_cap - retrans_sent,
                         intake_cap[child])
            lo = self.branch_sent[child]
            n = max(0, min(self.admitted_upto - lo, budget))
            if n > 0:
                arrivals[child].append((lo, lo + n, None))
                lc = self.links[(0, child)]
                lc.offered_pkts += n
                lc.data_bytes += n * self.size
            self.branch_sent[child] = lo + n
        self.sent_upto = max(self.branch_sent.values(), default=old_hi)
        new_sent = self.sent_upto - old_hi
        # wait of freshly transmitted messages: whole ticks in the pool
        # plus the average in-tick service position
        if new_sent > 0:
            waits = (t - self._submit_ticks(old_hi, self.sent_upto)) * self.dt
            mean_wait = float(np.mean(waits)) + _queue_wait(new_sent + retrans_sent, tx.svc, self.dt)
        else:
            mean_wait = 0.0
        pool = (self.admitted_upto - self.released_total) * self.size
        m = tx.metrics
        m["buf_wait_mean_s"] = mean_wait
        m["tx_sent_pkts"] = float(new_sent)
        m["tx_sent_bytes"] = float(new_sent * self.size)
        m["tx_retrans_pkts"] = float(retrans_sent)
        m["buf_used_bytes"] = float(pool)
        m["buf_backlog_pkts"] = float(self.app_backlog)
        # the submit path costs cycles whether or not the pool admits, so
        # denied attempts count toward busy time
        m["cpu_busy_frac"] = min(1.0, (new_sent + retrans_sent + denied) / tx.svc) + float(self.noise[0].normal(0.0, 0.004))
        tx.watch.append(mean_wait)
        self.latency_trace[0].append(mean_wait)
        return arrivals

    def _route_retrans(self, t: int, a: int, b: int, dst: int) -> None:
        """Unicast a retransmission along the tree path, link by link.

        Loss and per-link counters are settled here; the survivors join the
        destination's socket intake after the regular multicast traffic.
        """
        path = list(reversed(self.topology.path_to_root(dst)))  # root..dst
        ranges = [(a, b, dst)]
        for parent, child in zip(path, path[1:]):
            lc = self.links[(parent, child)]
            n = _ranges_total(ranges)
            lc.retrans_pkts += n
            lc.offered_pkts += n
            lc.data_bytes += n * self.size
            kept, dropped = self.loss[(parent, child)].thin(ranges)
            if dropped:
                lc.dropped_pkts += _ranges_total(dropped)
                self._log("link_drop", link=[parent, child], pkts=_ranges_total(dropped), retrans=True)
            lc.delivered_pkts += _ranges_total(kept)
            ranges = kept
            if not ranges:
                return
        self._retrans_arrivals[dst].extend(ranges)

    def _propagate(self, t: int, arrivals: dict[int, list], intake_cap: dict[int, int]) -> None:
        for nid in self.order[1:]:
            node = self.nodes[nid]
            link = (node.parent, nid)
            lc = self.links[link]
            offered = arrivals[nid]
            kept, dropped = self.loss[link].thin(offered)
            n_dropped = _ranges_total(dropped)
            if n_dropped:
                lc.dropped_pkts += n_dropped
                self._log("link_drop", link=list(link), pkts=n_dropped)
            n_kept = _ranges_total(kept)
            lc.delivered_pkts += n_kept
            incoming = kept + self._retrans_arrivals[nid]
            self._socket_intake(t, node, incoming, arrivals, intake_cap)

    def _socket_intake(self, t: int, node: _Node, incoming: list, arrivals: dict[int, list], intake_cap: dict[int, int]) -> None:
        """Bounded inbound queue with drain-rate service and tail interleaved drops."""
        m = node.metrics
        n_in = _ranges_total(incoming)
        m["rx_in_pkts"] = m.get("rx_in_pkts", 0.0) + float(n_in)
        m["rx_in_bytes"] = m.get("rx_in_bytes", 0.0) + float(n_in * self.size)
        capacity = node.svc + max(0, node.sock_cap - node.sock_len)
        node.sock_queue.extend(incoming)
        node.sock_len += n_in
        admitted_n = min(node.sock_len, node.svc, capacity)
        overflow = max(0, node.sock_len - admitted_n - node.sock_cap)
        if overflow > 0:
            backlog = list(node.sock_queue)
            keep_n = node.sock_len - overflow
            kept, dropped = _interleave_keep(backlog, keep_n)
            node.sock_queue = deque(kept)
            node.sock_len = keep_n
            n_drop = _ranges_total(dropped)
            m["sock_dropped_pkts"] = m.get("sock_dropped_pkts", 0.0) + float(n_drop)
            self._log("sock_drop", node=node.nid, pkts=n_drop)
        taken = self._take(node.sock_queue, admitted_n)
        node.sock_len -= _ranges_total(taken)
        m["sock_queue_pkts"] = float(node.sock_len)
        busy = _ranges_total(taken) / node.svc
        m["cpu_busy_frac"] = min(1.0, busy) + float(self.noise[node.nid].normal(0.0, 0.004))
        if node.role is Role.FORWARDER:
            self._forward(t, node, taken, arrivals, intake_cap)
        else:
            self._deliver(t, node, taken)

    @staticmethod
    def _take(dq: deque, n: int) -> list:
        out = []
        while dq and n > 0:
            a, b, tag = dq.popleft()
            take = min(b - a, n)
            out.append((a, a + take, tag))
            n -= take
            if a + take < b:
                dq.appendleft((a + take, b, tag))
        return out

    def _forward(self, t: int, node: _Node, taken: list, arrivals: dict[int, list], intake_cap: dict[int, int]) -> None:
        for r in taken:
            for child in node.children:
                if r[2] is None or child in self._toward(node.nid, r[2]):
                    node.pending[child].append(r)
                    node.pending_bytes[child] += (r[1] - r[0]) * self.size
        n_out_max = 0
        for child in node.children:
            budget = min(self.link_pkt_cap, intake_cap[child])
            out = self._take(node.pending[child], budget)
            n_out = _ranges_total(out)
            if n_out:
                node.pending_bytes[child] -= n_out * self.size
                arrivals[child].extend(out)
                lc = self.links[(node.nid, child)]
                lc.offered_pkts += n_out
                lc.data_bytes += n_out * self.size
            n_out_max = max(n_out_max, n_out)
        node.held_bytes = float(max(node.pending_bytes.values(), default=0))
        m = node.metrics
        m["fwd_out_pkts"] = float(n_out_max)
        m["fwd_out_bytes"] = float(n_out_max * self.size)

    def _toward(self, nid: int, dst: int) -> tuple[int, ...]:
        """Children of nid on the path to dst (at most one)."""
        path = self.topology.path_to_root(dst)
        for i, hop in enumerate(path):
            if hop == nid and i > 0:
                return (path[i - 1],)
        return ()

    def _deliver(self, t: int, node: _Node, taken: list) -> None:
        m = node.metrics
        retrans_in = sum(r[1] - r[0] for r in taken if r[2] is not None)
        m["rx_retrans_in_pkts"] = float(retrans_in)
        fresh_recv = SeqSet()
        for a, b, _ in taken:
            node.got.add(a, b)
            node.nack_pending.subtract(a, b)
            fresh_recv.add(a, b)
            node.hi_seen = max(node.hi_seen, b)
        old_wm = node.wm
        node.wm, delivered = node.got.pop_prefix(node.wm)
        # gap detection above the new watermark
        missing = node.got.missing(node.wm, node.hi_seen) if node.hi_seen > node.wm else []
        fresh = []
        max_run = 0
        for a, b in missing:
            max_run = max(max_run, b - a)
            for ga, gb in node.nack_pending.missing(a, b):
                fresh.append((ga, gb))
        node.max_run_ever = max(node.max_run_ever, max_run)
        # one request per gap, retried while still missing after 10 ticks
        to_request = list(fresh)
        while node.nack_timers and node.nack_timers[0][0] <= t - 10:
            _, ra, rb = node.nack_timers.popleft()
            to_request.extend(node.nack_pending.covered_parts(ra, rb))
        if to_request:
            for a, b in to_request:
                node.nack_pending.add(a, b)
                node.nack_timers.append((t, a, b))
            self._send_ctrl(node.nid, "nack", list(to_request), HEADER_BYTES + NACK_RANGE_BYTES * len(to_request))
            m["nacks_out_pkts"] = float(len(to_request))
            self._log("nack", node=node.nid, ranges=len(to_request), pkts=_ranges_total(to_request))
        m["rx_gap_events"] = float(len(fresh))
        m["rx_gap_max_run"] = float(max((b - a for a, b in missing), default=0))
        n_del = node.wm - old_wm
        m["rx_delivered_pkts"] = float(n_del)
        m["rx_delivered_bytes"] = float(n_del * self.size)
        lat_mean, lat_max, lat_p99, jitter, svc_wait = self._latency_stats(t, node, delivered)
        m["rx_latency_mean_s"] = lat_mean
        m["rx_latency_max_s"] = lat_max
        m["rx_latency_jitter_ms"] = jitter
        m["rx_svc_wait_ms"] = svc_wait
        node.watch.append(lat_p99)
        self.latency_trace[node.nid].append(lat_mean)
        ack_ranges = fresh_recv.ranges()
        self._send_ctrl(node.nid, "ack", ack_ranges,
                        ACK_BYTES + NACK_RANGE_BYTES * len(ack_ranges))
        m["acks_out_pkts"] = float(fresh_recv.total())

    def _latency_stats(self, t: int, node: _Node, delivered: list
                       ) -> tuple[float, float, float, float, float]:
        """Per-tick delivery statistics: latency mean/max/p99 (s), the
        within-tick latency spread, and the receive-side service wait
        (both in ms, the scale their collectors report at)."""
        base = self.base_path_delay[node.nid]
        tx = self.nodes[0]
        sent_now = tx.metrics.get("tx_sent_pkts", 0.0) + tx.metrics.get("tx_retrans_pkts", 0.0)
        n_del = _ranges_total(delivered)
        rx_wait = _queue_wait(n_del, node.svc, self.dt)
        subtick = _queue_wait(sent_now, tx.svc, self.dt) + rx_wait
        # one estimation-error draw per statistic; drawn even on idle ticks so
        # the noise stream stays aligned across scenarios
        err = self.noise[node.nid].normal(0.0, 2e-5, size=5)
        if not delivered:
            return 0.0, 0.0, 0.0, 0.0, 0.0
        lats = []
        for a, b in delivered:
            whole = (t - self._submit_ticks(a, b)) * self.dt
            lats.append(whole)
        lat = np.concatenate(lats) + base + subtick
        return (float(np.mean(lat) + err[0]), float(np.max(lat) + err[1]),
                float(np.percentile(lat, 99) + err[2]),
                float((np.std(lat) + err[3]) * 1e3),
                float((rx_wait + err[4]) * 1e3))

    def _submit_ticks(self, a: int, b: int) -> np.ndarray:
        cum = np.asarray(self.cum_submitted, dtype=np.int64)
        return np.searchsorted(cum, np.arange(a, b), side="right")

    def _send_ctrl(self, src: int, kind: str, payload, nbytes: int) -> None:
        """Receiver-to-root control message; bytes charged along the path."""
        path = self.topology.path_to_root(src)
        for child, parent in zip(path, path[1:]):
            self.links[(parent, child)].ctrl_bytes += nbytes
        self.ctrl_inbox.append((kind, src, payload))

    def _sample_metrics(self, t: int, submitted: int, admitted: int, denied: int) -> None:
        for nid in self.topology.node_ids:
            node = self.nodes[nid]
            m = node.metrics
            m["buf_quota_bytes"] = float(node.quota)
            if node.role is Role.TRANSMITTER:
                pool = (self.admitted_upto - self.released_total) * self.size
                m["buf_used_bytes"] = float(pool)
                m["buf_free_bytes"] = float(node.quota - pool)
                m["buf_admitted_pkts"] = float(admitted)
                m["buf_denied_pkts"] = float(denied)
                vs_extra = pool
            else:
                held = node.held_bytes if node.role is Role.FORWARDER else node.got.total() * self.size
                m["buf_held_bytes"] = float(held)
                m["buf_free_bytes"] = float(node.quota - held)
                vs_extra = held
            m["cpu_capacity_pkts"] = float(node.svc)
            m["proc_vsize_bytes"] = VSIZE_BASE + vs_extra + float(self.noise[nid].normal(0.0, 262144.0))
            m["mon_tx_bytes"] = self.mon_out[nid]
            m["mon_rx_bytes"] = self.mon_in[nid]
            self.mon_out[nid] = 0.0
            self.mon_in[nid] = 0.0
            m.setdefault("cpu_busy_frac", float(self.noise[nid].normal(0.0, 0.004)))
            sample = self.registries[nid].sample()
            self.windows[nid].record_tick(sample)
            self.history[nid].append(np.asarray(sample, dtype=float))
            if node.role is Role.FORWARDER:
                self.latency_trace[nid].append(0.0)

    def _log(self, kind: str, **fields) -> None:
        entry = {"tick": self.tick, "kind": kind}
        entry.update(fields)
        self.event_log.append(entry)

    # -- results -----------------------------------------------------------

    def _result(self) -> "SimResult":
        history = {nid: np.vstack(rows) if rows else np.zeros((0, 0)) for nid, rows in self.history.items()}
        return SimResult(
            scenario=self.scenario,
            topology=self.topology,
            registries=self.registries,
            windows=self.windows,
            history=history,
            event_log=self.event_log,
            links=self.links,
            latency=self.latency_trace,
            transport=self.transport,
            annotations=self.annotations,
            final_state=self,
        )


@dataclass
class SimResult:
    scenario: Scenario
    topology: Topology
    registries: dict[int, MetricRegistry]
    windows: dict[int, MetricWindow]
    history: dict[int, np.ndarray]
    event_log: list[dict]
    links: dict[tuple[int, int], LinkCounters]
    latency: dict[int, list[float]]
    transport: "SimTransport"
    annotations: dict
    final_state: Simulation = field(repr=False)

    def max_missing_run(self) -> int:
        return max((n.max_run_ever for n in self.final_state.nodes.values()), default=0)

    def total_lost_pkts(self) -> int:
        link_drops = sum(lc.dropped_pkts for lc in self.links.values())
        sock = sum(
            e.get("pkts", 0) for e in self.event_log if e["kind"] == "sock_drop"
        )
        return link_drops + sock


class SimTransport:
    """Monitoring-message carrier over the overlay: reliable, byte-accounted.

    Deliveries are immediate (analysis runs between ticks); the cost shows
    up in per-link monitor counters and in the sender's own gauges.
    """

    def __init__(self, sim: Simulation):
        self.sim = sim
        self.bytes_sent: dict[tuple[int, int], int] = {}
        self.messages_sent = 0
        self._queue: deque = deque()
        self._flushing = False

    def reset_counters(self) -> None:
        self.bytes_sent = {}
        self.messages_sent = 0

    def send(self, src: int, dst: int, nbytes: int, deliver: Callable[[], None]) -> None:
        if src == dst or src not in self.sim.nodes or dst not in self.sim.nodes:
            raise TransportFailure(f"bad monitor endpoints ({src}, {dst})")
        if nbytes < 0:
            raise TransportFailure("negative payload size")
        key = (src, dst)
        self.bytes_sent[key] = self.bytes_sent.get(key, 0) + nbytes
        self.messages_sent += 1
        self.sim.mon_out[src] += nbytes
        self.sim.mon_in[dst] += nbytes
        for u, v in self._path_links(src, dst):
            self.sim.links[(u, v)].monitor_bytes += nbytes
        self._queue.append(deliver)

    def _path_links(self, src: int, dst: int) -> list[tuple[int, int]]:
        topo = self.sim.topology
        up = list(topo.path_to_root(src))
        down = list(topo.path_to_root(dst))
        common = set(up) & set(down)
        lca = next(hop for hop in up if hop in common)
        links = []
        for child, parent in zip(up, up[1:]):
            if child == lca:
                break
            links.append((parent, child))
        seg = []
        for child, parent in zip(down, down[1:]):
            if child == lca:
                break
            seg.append((parent, child))
        links.extend(reversed(seg))
        return links

    def flush(self) -> None:
        if self._flushing:
            return
        self._flushing = True
        try:
            while self._queue:
                self._queue.popleft()()
        finally:
            self._flushing = False


def run_scenario(scenario: Scenario, monitor: Callable | None = None, drain: bool = False) -> SimResult:
    return Simulation(scenario, monitor=monitor).run(drain=drain)
