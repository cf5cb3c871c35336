"""Stage orchestration: latency watch, joint analysis, action, evaluation.

The monitor hook runs between simulator ticks. Node watch windows are
scanned in id order; the first node whose recent latency samples exceed
the trigger threshold starts one network-wide analysis (a small suppress
token floods the tree so nobody else starts a second one). The analysis
prunes constant and duplicate columns, pulls cross-node covariance rows
for the parameters most correlated with the target, and solves the shrunk
correlation system with one distributed belief-propagation run. The
resulting ranking feeds a rule-based fault call and, when the top cause
is a memory parameter, a quota raise capped at ten percent that lands on
the next tick.

Every cross-node byte of the exchange goes through the run's overlay
transport, so monitoring overhead is measurable per link and per node.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .collector import MetricWindow, ParameterId, ResourceKind, filter_constant, merge_registry
from .errors import OvermonError
from .gabp import MESSAGE_BYTES
from .kalman import joint_covariance_rows, smooth_columns
from .linalg import empirical_covariance
from .regression import RankEntry, build_report, gls, ols, rank_top_k, rank_top_k_distributed, what_if
from .seeds import derive_rng, derive_seed
from .simnet import FaultKind, FaultSpec, Role, Scenario, Simulation, run_scenario
from .transport import HEADER_BYTES, REAL_BYTES

DEDUP_TOL = 1e-12          # 1 - |corr| below this marks an exact duplicate column
MIN_ROWS = 8               # fewest window rows worth analyzing
SCALE_FLOOR = 1e-12        # smoothed columns flatter than this are unusable
GAP_RUN_THRESHOLD = 50     # consecutive missing pkts separating burst loss from thin loss
QUOTA_RAISE_FRAC = 0.10    # hard cap on a single corrective quota step
ACTION_BYTES = HEADER_BYTES + 16


class AnalysisError(OvermonError):
    """The joint analysis could not produce a usable ranking."""


@dataclass(frozen=True)
class Trigger:
    """Where and when the latency watch fired."""

    tick: int
    node: int
    observed: float
    threshold: float
    deadline_s: float

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "node": self.node,
            "observed": self.observed,
            "threshold": self.threshold,
            "deadline_s": self.deadline_s,
        }


def detect_trigger(samples, deadline_s: float, alpha: float = 0.8,
                   node: int = 0, tick: int = 0) -> Trigger | None:
    """Latency watch rule: the trailing samples sit beyond alpha * deadline.

    The last sample must exceed the threshold, and so must the one before
    it when the window holds more than one (a single spike never fires).
    An empty window never fires.
    """
    vals = list(samples)
    threshold = alpha * deadline_s
    if not vals or vals[-1] <= threshold:
        return None
    if len(vals) >= 2 and vals[-2] <= threshold:
        return None
    return Trigger(tick=tick, node=node, observed=float(vals[-1]),
                   threshold=threshold, deadline_s=deadline_s)


@dataclass(frozen=True)
class FaultCall:
    """Rule-based verdict: one fault kind, or an ambiguity class."""

    kinds: tuple[str, ...]
    node: int | None
    reason: str

    @property
    def distinguishable(self) -> bool:
        return len(self.kinds) == 1

    def to_dict(self) -> dict:
        return {"kinds": list(self.kinds), "node": self.node,
                "distinguishable": self.distinguishable, "reason": self.reason}


def classify_fault(ranking, topology, gap_events: float, gap_max_run: float,
                   trigger: Trigger | None = None,
                   quota_moves: tuple = ()) -> FaultCall:
    """Call the fault family from the ranking plus the evidence channels.

    Long missing runs mean burst loss and resolve on their own. A moved
    allowance names the node whose quota changed, but a cut receiver
    allowance presents to the rest of the tree exactly like a slow
    sender, so that call stays an ambiguity class; likewise short gap
    runs cannot separate a receiver overrun from thin link loss.
    """
    if not ranking:
        return FaultCall(kinds=("A",), node=None, reason="empty ranking")
    top = ranking[0][0]
    if gap_max_run >= GAP_RUN_THRESHOLD:
        rx = next((e[0].node for e in ranking
                   if topology.role_of(e[0].node) is Role.RECEIVER), top.node)
        return FaultCall(("D'",), rx,
                         f"burst loss: max missing run {gap_max_run:.0f}")
    if quota_moves:
        node = max(quota_moves, key=lambda nv: abs(nv[1]))[0]
        if topology.role_of(node) is Role.TRANSMITTER:
            return FaultCall(("F",), node, "transmitter pool allowance moved")
        return FaultCall(("C", "E"), node, "allowance moved mid-path; "
                         "indistinguishable from a slow sender upstream")
    if gap_events > 0:
        rx = next((e[0].node for e in ranking
                   if topology.role_of(e[0].node) is Role.RECEIVER), top.node)
        return FaultCall(("B", "D"), rx,
                         f"thin loss: max missing run {gap_max_run:.0f}")
    if trigger is not None:
        return FaultCall(("C", "E"), top.node,
                         "service slowdown without loss or quota movement")
    return FaultCall(("A",), None, "no fault signature")


@dataclass
class AnalysisRecord:
    """One analysis pass: inputs kept, solver outputs, and its network cost."""

    tick: int
    trigger: Trigger | None
    target: ParameterId
    target_mean: float
    target_scale: float
    params: tuple[ParameterId, ...]
    scales: np.ndarray
    correlations: np.ndarray
    a_std: np.ndarray = field(repr=False)
    dropped_constant: tuple[ParameterId, ...] = ()
    dropped_duplicate: tuple[tuple[ParameterId, ParameterId], ...] = ()
    significant: tuple[ParameterId, ...] = ()
    shrinkage: float = 0.0
    rows_used: int = 0
    report: object = None
    ols_weights: np.ndarray | None = None
    ols_ranking: list[RankEntry] = field(default_factory=list)
    fault_call: FaultCall | None = None
    gabp_payload_bytes: dict = field(default_factory=dict)
    bytes_out: dict = field(default_factory=dict)
    bytes_in: dict = field(default_factory=dict)
    bytes_total: int = 0
    pred_actual_corr: float = 0.0
    gap_events: float = 0.0
    gap_max_run: float = 0.0

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "trigger": None if self.trigger is None else self.trigger.to_dict(),
            "target": {"node": self.target.node, "name": self.target.name},
            "target_mean": self.target_mean,
            "target_scale": self.target_scale,
            "parameters": len(self.params),
            "dropped_constant": len(self.dropped_constant),
            "dropped_duplicate": [
                {"dropped": f"{d.node}:{d.name}", "kept": f"{k.node}:{k.name}"}
                for d, k in self.dropped_duplicate
            ],
            "significant": [f"{p.node}:{p.name}" for p in self.significant],
            "shrinkage": self.shrinkage,
            "rows_used": self.rows_used,
            "gap_events": self.gap_events,
            "gap_max_run": self.gap_max_run,
            "fault_call": None if self.fault_call is None else self.fault_call.to_dict(),
            "gabp_payload_bytes": {
                f"{src}->{dst}": n for (src, dst), n in sorted(self.gabp_payload_bytes.items())
            },
            "bytes_out": {str(k): v for k, v in sorted(self.bytes_out.items())},
            "bytes_in": {str(k): v for k, v in sorted(self.bytes_in.items())},
            "bytes_total": self.bytes_total,
            "pred_actual_corr": self.pred_actual_corr,
            "ols_top": [
                {"node": pid.node, "name": pid.name, "weight": w}
                for pid, _, w in self.ols_ranking
            ],
            "report": self.report.to_dict(),
        }


def _target_gauge(scenario: Scenario, topology, trigger: Trigger | None) -> tuple[int, str]:
    metric = scenario.target_metric
    if metric == "transmitter_latency":
        return 0, "buf_wait_mean_s"
    if metric == "trigger" and trigger is not None:
        if topology.role_of(trigger.node) is Role.TRANSMITTER:
            return trigger.node, "buf_wait_mean_s"
        return trigger.node, "rx_latency_max_s"
    # total packet latency: the triggering receiver, else the lowest-id one
    if trigger is not None and topology.role_of(trigger.node) is Role.RECEIVER:
        return trigger.node, "rx_latency_mean_s"
    return min(topology.receivers()), "rx_latency_mean_s"


def _trimmed_windows(sim, kept_by_node, merged):
    """Per-node windows holding only the kept columns, indexed globally."""
    offsets = {}
    pos = 0
    for nid in sorted(kept_by_node):
        offsets[nid] = pos
        pos += len(kept_by_node[nid])
    windows = {}
    raw = {}
    for nid in sorted(kept_by_node):
        kept = kept_by_node[nid]
        reg = sim.registries[nid]
        cols = [reg.local_index(p.name) for p in kept]
        matrix = sim.windows[nid].window_matrix()[:, cols]
        pids = tuple(merged[offsets[nid]:offsets[nid] + len(kept)])
        w = MetricWindow(matrix.shape[0], sim.windows[nid].dt, len(kept), params=pids)
        for row in matrix:
            w.record_tick(row)
        windows[nid] = w
        raw[nid] = matrix
    return windows, raw


def run_analysis(sim: Simulation, trigger: Trigger | None = None,
                 top_k: int | None = None) -> AnalysisRecord:
    """One joint root-cause pass over the current metric windows.

    Constant columns are dropped per node and exactly duplicated columns
    collapse onto their first copy (lowest node id, then lowest index).
    The shrunk correlation system over the survivors is solved by a single
    distributed belief-propagation execution with per-node ownership, the
    top weights are gathered by convergecast, and a least-squares baseline
    on the same columns is kept alongside for comparison. Solver trouble
    is never swallowed: the recovery ladder's attempts travel inside the
    report's provenance.
    """
    scenario = sim.scenario
    cfg = scenario.monitoring
    topo = sim.topology
    k_rank = top_k if top_k is not None else cfg.top_k

    filled = {nid: w.filled for nid, w in sim.windows.items()}
    n_eff = min(filled.values())
    if n_eff < MIN_ROWS:
        raise AnalysisError(f"only {n_eff} window rows recorded, need {MIN_ROWS}")

    base_bytes = dict(sim.transport.bytes_sent)

    kept_by_node = {}
    dropped_constant: list[ParameterId] = []
    for nid in topo.node_ids:
        kept, dropped = filter_constant(sim.windows[nid])
        kept_by_node[nid] = kept
        dropped_constant.extend(dropped)

    t_node, t_name = _target_gauge(scenario, topo, trigger)
    if all(p.name != t_name for p in kept_by_node.get(t_node, [])):
        raise AnalysisError(f"target gauge {t_name!r} on node {t_node} shows no variation")

    merged = merge_registry(kept_by_node)
    windows, raw = _trimmed_windows(sim, kept_by_node, merged)

    # local smoothing, matching the covariance-row protocol's numerics
    smoothed = {nid: smooth_columns(raw[nid], cfg.sigma2) for nid in sorted(windows)}
    means = np.concatenate([smoothed[nid].mean(axis=0) for nid in sorted(windows)])
    centered = {nid: smoothed[nid] - smoothed[nid].mean(axis=0) for nid in sorted(windows)}
    blocks = {nid: empirical_covariance(centered[nid]) for nid in sorted(windows)}
    scales = np.concatenate([np.sqrt(np.diag(blocks[nid])) for nid in sorted(windows)])
    flat = [p for p in merged if scales[p.global_index] <= SCALE_FLOOR]
    if flat:
        for nid in topo.node_ids:
            kept_by_node[nid] = [p for p in kept_by_node[nid]
                                 if all(f.node != nid or f.name != p.name for f in flat)]
        merged = merge_registry(kept_by_node)
        windows, raw = _trimmed_windows(sim, kept_by_node, merged)
        smoothed = {nid: smooth_columns(raw[nid], cfg.sigma2) for nid in sorted(windows)}
        means = np.concatenate([smoothed[nid].mean(axis=0) for nid in sorted(windows)])
        centered = {nid: smoothed[nid] - smoothed[nid].mean(axis=0) for nid in sorted(windows)}
        blocks = {nid: empirical_covariance(centered[nid]) for nid in sorted(windows)}
        scales = np.concatenate([np.sqrt(np.diag(blocks[nid])) for nid in sorted(windows)])

    target_pid = next(p for p in merged if p.node == t_node and p.name == t_name)
    t_idx = target_pid.global_index
    target_scale = float(scales[t_idx])
    target_mean = float(means[t_idx])

    # every node ships its scale vector to the root for correlation scaling
    for nid in sorted(windows):
        if nid != 0:
            sim.transport.send(nid, 0, REAL_BYTES * windows[nid].k_local + HEADER_BYTES,
                               lambda: None)
    sim.transport.flush()

    target_row = joint_covariance_rows(windows, [target_pid], transport=sim.transport,
                                       sigma2=cfg.sigma2, assemble_at=0)[0]
    corr_c = target_row / (scales * target_scale)

    # pick cross-row anchors by |correlation with the target|, collapsing
    # exact duplicates onto the first copy as their rows come in
    order = sorted((p for p in merged if p is not target_pid),
                   key=lambda p: (-abs(corr_c[p.global_index]), p.node, p.global_index))
    anchors: list[ParameterId] = []
    anchor_rows: dict[ParameterId, np.ndarray] = {}
    duplicate_of: dict[ParameterId, ParameterId] = {}
    for cand in order:
        if len(anchors) >= cfg.significant_m:
            break
        if cand in duplicate_of:
            continue
        row = joint_covariance_rows(windows, [cand], transport=sim.transport,
                                    sigma2=cfg.sigma2, assemble_at=0)[0]
        row = row / (scales * scales[cand.global_index])
        taken = set(anchors)
        for other in merged[cand.global_index + 1:]:
            if other is target_pid or other in duplicate_of or other in taken:
                continue
            if abs(row[other.global_index]) >= 1.0 - DEDUP_TOL:
                duplicate_of[other] = cand
        anchors.append(cand)
        anchor_rows[cand] = row

    survivors = [p for p in merged if p is not target_pid and p not in duplicate_of]
    if not survivors:
        raise AnalysisError("no varying parameters besides the target")
    keep_idx = np.array([p.global_index for p in merged if p is not target_pid
                         and p not in duplicate_of])
    solver_params = tuple(ParameterId(p.node, p.name, i, p.resource_kind)
                          for i, p in enumerate(survivors))
    new_index = {old.global_index: i for i, old in enumerate(survivors)}

    k = len(survivors)
    corr = np.zeros((k, k))
    for nid in sorted(windows):
        local = [(i, new_index[p.global_index]) for i, p in enumerate(windows[nid].params)
                 if p.global_index in new_index]
        if not local:
            continue
        li = np.array([i for i, _ in local])
        gi = np.array([g for _, g in local])
        sub = blocks[nid][np.ix_(li, li)]
        s = scales[[windows[nid].params[i].global_index for i in li]]
        corr[np.ix_(gi, gi)] = sub / np.outer(s, s)
    for pid in anchors:
        i = new_index[pid.global_index]
        row = anchor_rows[pid][keep_idx]
        corr[i, :] = row
        corr[:, i] = row
    np.fill_diagonal(corr, 1.0)

    lam = cfg.shrinkage
    if k > 1:
        # wide systems need heavier shrinkage: keeping the off-diagonal row
        # mass (k-1)(1-lam) under 1 keeps the system diagonally dominant, so
        # the message solver converges at any width
        lam = max(lam, 1.0 - 1.0 / (k - 1))
    p_joint = (1.0 - lam) * corr
    np.fill_diagonal(p_joint, 1.0)
    c = corr_c[keep_idx]
    owners = np.array([p.node for p in solver_params])

    x, provenance = gls(p_joint, c, owner=owners, net=sim.transport)

    local_weights = {}
    for pid, w in zip(solver_params, x):
        local_weights.setdefault(pid.node, []).append((pid, float(w)))
    children = {nid: list(topo.children_of(nid)) for nid in topo.node_ids}
    ranking = rank_top_k_distributed(local_weights, children, root=0, k=k_rank,
                                     transport=sim.transport)

    a_std_cols = []
    for nid in sorted(windows):
        s = np.array([scales[p.global_index] for p in windows[nid].params])
        a_std_cols.append(centered[nid] / s)
    a_std_full = np.concatenate(a_std_cols, axis=1)
    a_std = a_std_full[:, keep_idx]
    b_std = a_std_full[:, t_idx]

    report = build_report(a_std, b_std, x, solver_params, k=k_rank, provenance=provenance)
    if ranking != report.ranking:
        raise AnalysisError("distributed ranking diverged from the central sort")

    # naive central baseline: plain least squares over every varying column,
    # before the duplicate collapse the distributed protocol applies
    pre_dedup = [p for p in merged if p is not target_pid]
    ols_params = tuple(ParameterId(p.node, p.name, i, p.resource_kind)
                       for i, p in enumerate(pre_dedup))
    a_std_pre = a_std_full[:, [p.global_index for p in pre_dedup]]
    ols_weights = ols(a_std_pre, b_std)
    ols_ranking = rank_top_k(ols_weights, ols_params, k=k_rank)

    # loss evidence: two numbers per receiver travel to the root
    gap_events = 0.0
    gap_max_run = 0.0
    for nid in topo.receivers():
        reg = sim.registries[nid]
        m = sim.windows[nid].window_matrix()
        gap_events += float(m[:, reg.local_index("rx_gap_events")].sum())
        gap_max_run = max(gap_max_run, float(m[:, reg.local_index("rx_gap_max_run")].max()))
        if nid != 0:
            sim.transport.send(nid, 0, HEADER_BYTES + 2 * REAL_BYTES, lambda: None)
    sim.transport.flush()

    # allowance evidence: any node whose quota gauge moved inside the
    # window reports the movement alongside the loss counters
    quota_moves: list[tuple[int, float]] = []
    for nid in sorted(sim.registries):
        col = sim.registries[nid].local_index("buf_quota_bytes")
        series = sim.windows[nid].window_matrix()[:, col]
        delta = float(series[-1] - series[0])
        if delta != 0.0:
            quota_moves.append((nid, delta))
            if nid != 0:
                sim.transport.send(nid, 0, HEADER_BYTES + 2 * REAL_BYTES, lambda: None)
    sim.transport.flush()

    fault_call = classify_fault(ranking, topo, gap_events, gap_max_run, trigger,
                                quota_moves=tuple(quota_moves))

    pair_edges: Counter = Counter()
    for i in range(k):
        for j in range(k):
            if i != j and owners[i] != owners[j] and p_joint[i, j] != 0.0:
                pair_edges[(int(owners[i]), int(owners[j]))] += 1
    payloads = {pair: HEADER_BYTES + MESSAGE_BYTES * n for pair, n in pair_edges.items()}

    bytes_out: dict[int, int] = {nid: 0 for nid in topo.node_ids}
    bytes_in: dict[int, int] = {nid: 0 for nid in topo.node_ids}
    total = 0
    for (src, dst), n in sim.transport.bytes_sent.items():
        delta = n - base_bytes.get((src, dst), 0)
        if delta:
            bytes_out[src] += delta
            bytes_in[dst] += delta
            total += delta

    predicted = report.predicted
    actual = report.actual
    if float(np.std(predicted)) > 0 and float(np.std(actual)) > 0:
        pred_corr = float(np.corrcoef(predicted, actual)[0, 1])
    else:
        pred_corr = 0.0

    return AnalysisRecord(
        tick=sim.tick,
        trigger=trigger,
        target=target_pid,
        target_mean=target_mean,
        target_scale=target_scale,
        params=solver_params,
        scales=scales[keep_idx],
        correlations=c,
        a_std=a_std,
        dropped_constant=tuple(dropped_constant),
        dropped_duplicate=tuple((dup, anchor) for dup, anchor in duplicate_of.items()),
        significant=tuple(anchors),
        shrinkage=lam,
        rows_used=n_eff,
        report=report,
        ols_weights=ols_weights,
        ols_ranking=ols_ranking,
        fault_call=fault_call,
        gabp_payload_bytes=payloads,
        bytes_out=bytes_out,
        bytes_in=bytes_in,
        bytes_total=total,
        pred_actual_corr=pred_corr,
        gap_events=gap_events,
        gap_max_run=gap_max_run,
    )


@dataclass(frozen=True)
class CorrectiveAction:
    """A quota adjustment decided by one analysis."""

    tick: int
    node: int
    param: ParameterId
    old_quota: float
    new_quota: float
    predicted_change: float
    applied: bool

    def __post_init__(self):
        if self.new_quota > self.old_quota * (1.0 + QUOTA_RAISE_FRAC) * (1 + 1e-12):
            raise ValueError("quota step exceeds the corrective cap")

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "node": self.node,
            "param": self.param.name,
            "old_quota": self.old_quota,
            "new_quota": self.new_quota,
            "predicted_change": self.predicted_change,
            "applied": self.applied,
        }


def predict_quota_raise(sim: Simulation, record: AnalysisRecord, node: int,
                        frac: float = QUOTA_RAISE_FRAC) -> float | None:
    """Predicted mean-target shift if the node's byte allowance grows by frac.

    Uses the fitted weight of the node's quota gauge; None when that gauge
    never varied in the analysis window (no learnable quota channel).
    """
    for i, pid in enumerate(record.params):
        if pid.node == node and pid.name == "buf_quota_bytes":
            sigma = float(record.scales[i])
            if sigma <= 0:
                return None
            quota_now = float(sim.nodes[node].quota)
            weight = float(record.report.weights[i])
            return weight * (frac * quota_now / sigma) * record.target_scale
    return None


def corrective_action(sim: Simulation, record: AnalysisRecord) -> CorrectiveAction | None:
    """Raise the top-ranked node's memory allowance by at most ten percent.

    Only memory-kind causes act; the raise lands on the next tick and only
    when the fitted model predicts the target improves. Non-memory causes
    stay report-only.
    """
    ranking = record.report.ranking
    if not ranking:
        return None
    pid = ranking[0][0]
    if pid.resource_kind is not ResourceKind.MEMORY:
        return None
    old = float(sim.nodes[pid.node].quota)
    predicted = predict_quota_raise(sim, record, pid.node)
    if predicted is None:
        # no quota channel: replay the fit at the latest operating point
        i = record.params.index(pid)
        _, b_raw = what_if(record.a_std, record.report.weights, i, QUOTA_RAISE_FRAC,
                           target_mean=record.target_mean, target_scale=record.target_scale)
        base = record.target_mean + record.target_scale * float(record.report.predicted[-1])
        predicted = float(b_raw[-1]) - base
    applied = predicted < 0.0
    new = old * (1.0 + QUOTA_RAISE_FRAC) if applied else old
    if applied:
        sim.raise_quota(pid.node, new)
        if pid.node != 0:
            sim.transport.send(0, pid.node, ACTION_BYTES, lambda: None)
            sim.transport.flush()
    return CorrectiveAction(tick=record.tick, node=pid.node, param=pid,
                            old_quota=old, new_quota=new,
                            predicted_change=predicted, applied=applied)


def _flood_suppress(sim: Simulation, origin: int) -> None:
    # token up to the root, then down every tree edge: nobody else analyzes
    topo = sim.topology
    path = topo.path_to_root(origin)
    for child, parent in zip(path, path[1:]):
        sim.transport.send(child, parent, HEADER_BYTES, lambda: None)
    for nid in topo.node_ids:
        for child in topo.children_of(nid):
            sim.transport.send(nid, child, HEADER_BYTES, lambda: None)
    sim.transport.flush()


class MonitorPipeline:
    """Per-tick watcher owning trigger debounce, analyses, and actions.

    Attach as the simulation's monitor hook. ``act=False`` keeps the full
    analysis but never touches quotas (useful for what-if ground truth).
    """

    def __init__(self, top_k: int | None = None, act: bool = True):
        self.top_k = top_k
        self.act = act
        self.triggers: list[Trigger] = []
        self.analyses: list[AnalysisRecord] = []
        self.actions: list[CorrectiveAction] = []
        self.errors: list[str] = []
        self.cooldown_until = -1

    def __call__(self, sim: Simulation, t: int) -> None:
        if t < self.cooldown_until:
            return
        cfg = sim.scenario.monitoring
        trigger = None
        for nid in sim.topology.node_ids:
            trigger = detect_trigger(sim.nodes[nid].watch, sim.scenario.deadline_s,
                                     cfg.alpha, node=nid, tick=t)
            if trigger is not None:
                break
        if trigger is None:
            return
        self.triggers.append(trigger)
        _flood_suppress(sim, trigger.node)
        if min(w.filled for w in sim.windows.values()) < MIN_ROWS:
            self.cooldown_until = t + 5
            return
        record = run_analysis(sim, trigger=trigger, top_k=self.top_k)
        self.analyses.append(record)
        if self.act:
            action = corrective_action(sim, record)
            if action is not None:
                self.actions.append(action)
        self.cooldown_until = t + cfg.cooldown_ticks


def run_pipeline(scenario: Scenario, drain: bool = False,
                 act: bool = True, top_k: int | None = None):
    """Run a scenario with the monitoring loop attached.

    Returns the simulation result and the pipeline with its triggers,
    analyses, and actions.
    """
    pipe = MonitorPipeline(top_k=top_k, act=act)
    result = run_scenario(scenario, monitor=pipe, drain=drain)
    return result, pipe


_EVAL_KINDS = (FaultKind.B, FaultKind.C, FaultKind.D, FaultKind.DP,
               FaultKind.E, FaultKind.F)


@dataclass(frozen=True)
class TrialOutcome:
    """Scorecard for one randomized fault-injection trial."""

    index: int
    seed: int
    fault_kind: str
    fault_target: int
    onset: int
    trigger_tick: int | None
    trigger_delay: int | None
    top_node: int | None
    top_param: str | None
    node_correct: bool
    top_is_receiver: bool
    call_kinds: tuple[str, ...]
    call_contains_truth: bool
    distinguishable: bool
    analyses: int

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "fault_kind": self.fault_kind,
            "fault_target": self.fault_target,
            "onset": self.onset,
            "trigger_tick": self.trigger_tick,
            "trigger_delay": self.trigger_delay,
            "top_node": self.top_node,
            "top_param": self.top_param,
            "node_correct": self.node_correct,
            "top_is_receiver": self.top_is_receiver,
            "call_kinds": list(self.call_kinds),
            "call_contains_truth": self.call_contains_truth,
            "distinguishable": self.distinguishable,
            "analyses": self.analyses,
        }


@dataclass
class EvalSummary:
    """Aggregate of randomized trials, grouped by injected fault kind."""

    scenario_name: str
    master_seed: int
    outcomes: tuple[TrialOutcome, ...]

    def by_kind(self) -> dict[str, dict]:
        groups: dict[str, list[TrialOutcome]] = {}
        for o in self.outcomes:
            groups.setdefault(o.fault_kind, []).append(o)
        table = {}
        for kind in sorted(groups):
            rows = groups[kind]
            analyzed = [o for o in rows if o.analyses > 0]
            calls = Counter("+".join(o.call_kinds) for o in analyzed)
            table[kind] = {
                "trials": len(rows),
                "triggered": sum(1 for o in rows if o.trigger_tick is not None),
                "node_correct": (sum(1 for o in analyzed if o.node_correct) / len(analyzed)
                                 if analyzed else 0.0),
                "top_is_receiver": (sum(1 for o in analyzed if o.top_is_receiver) / len(analyzed)
                                    if analyzed else 0.0),
                "contains_truth": (sum(1 for o in analyzed if o.call_contains_truth) / len(analyzed)
                                   if analyzed else 0.0),
                "calls": dict(sorted(calls.items())),
            }
        return table

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario_name,
            "master_seed": self.master_seed,
            "trials": [o.to_dict() for o in self.outcomes],
            "by_kind": self.by_kind(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        header = (f"{'fault':<6} {'trials':>6} {'trig':>5} {'node%':>6} "
                  f"{'rx%':>6} {'truth%':>7}  calls")
        lines = [header, "-" * len(header)]
        for kind, row in self.by_kind().items():
            calls = " ".join(f"{k}:{v}" for k, v in row["calls"].items()) or "-"
            lines.append(
                f"{kind:<6} {row['trials']:>6} {row['triggered']:>5} "
                f"{row['node_correct']:>6.2f} {row['top_is_receiver']:>6.2f} "
                f"{row['contains_truth']:>7.2f}  {calls}")
        return "\n".join(lines)


def evaluate_trials(base: Scenario, trials: int, master_seed: int,
                    kinds=None) -> EvalSummary:
    """Randomized fault-injection sweep over fresh tree topologies.

    Each trial draws its own tree seed and fault (kind plus a compatible
    target) from streams derived off the master seed, runs the full
    monitored scenario, and scores the first analysis: is the top-ranked
    parameter owned by the faulted node, and does the rule-based call
    contain the injected kind? Unfaulted trials score as correct when the
    watch stays quiet. Identical inputs reproduce the summary exactly.
    """
    chosen = tuple(kinds) if kinds else _EVAL_KINDS
    outcomes = []
    for i in range(trials):
        rng = derive_rng(master_seed, f"trial:{i}")
        kind = chosen[int(rng.integers(len(chosen)))]
        run_seed = derive_seed(master_seed, f"run:{i}") % (2 ** 63)
        topo_seed = derive_seed(master_seed, f"topology:{i}") % (2 ** 32)
        bare = base.replace(seed=run_seed, topology_seed=topo_seed,
                            name=f"{base.name}-t{i:02d}", fault=None)
        topo = bare.build_topology()
        onset = base.fault.onset if base.fault is not None else 150
        if kind is FaultKind.A:
            scn = bare
            target = 0
        else:
            if kind in (FaultKind.C, FaultKind.F):
                target = 0
            else:
                receivers = sorted(topo.receivers())
                target = int(receivers[int(rng.integers(len(receivers)))])
            scn = bare.replace(fault=FaultSpec(kind=kind, target=target, onset=onset))
        _, pipe = run_pipeline(scn)

        trigger_tick = pipe.triggers[0].tick if pipe.triggers else None
        if pipe.analyses:
            record = pipe.analyses[0]
            top = record.report.ranking[0][0]
            top_node, top_param = top.node, top.name
            call = record.fault_call
            call_kinds = call.kinds
        else:
            top_node = top_param = None
            call_kinds = ("A",)
        if kind is FaultKind.A:
            node_correct = trigger_tick is None
            top_is_receiver = False
        else:
            node_correct = top_node == target
            top_is_receiver = (top_node is not None
                               and topo.role_of(top_node) is Role.RECEIVER)
        outcomes.append(TrialOutcome(
            index=i,
            seed=run_seed,
            fault_kind=kind.value,
            fault_target=target,
            onset=onset,
            trigger_tick=trigger_tick,
            trigger_delay=None if trigger_tick is None else trigger_tick - onset,
            top_node=top_node,
            top_param=top_param,
            node_correct=node_correct,
            top_is_receiver=top_is_receiver,
            call_kinds=call_kinds,
            call_contains_truth=kind.value in call_kinds,
            distinguishable=len(call_kinds) == 1,
            analyses=len(pipe.analyses),
        ))
    return EvalSummary(scenario_name=base.name, master_seed=master_seed,
                       outcomes=tuple(outcomes))
