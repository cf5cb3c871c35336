"""Gaussian belief propagation for symmetric linear systems.

Solves ``A @ x = b`` by iterating message updates on the graph whose edges are
the nonzero off-diagonal entries of ``A``. With messages initialised to zero
and node potentials ``P_ii = A[i,i]``, ``mu_ii = b[i] / A[i,i]``, one
synchronous sweep computes, for every directed edge i -> j:

    P_i\\j  = A[i,i] + sum_{l in N(i), l != j} P_{l->i}
    mu_i\\j = (b[i] + sum_{l in N(i), l != j} P_{l->i} * mu_{l->i}) / P_i\\j
    P_{i->j}  = -A[i,j]**2 / P_i\\j
    mu_{i->j} = (P_i\\j / A[i,j]) * mu_i\\j

and the belief marginals are assembled the same way over the full neighbour
set. Sweeps repeat until the largest coordinate change of the mean vector
falls below ``eps`` while every marginal precision is positive; a settled
mean vector with non-positive precisions is an invalid fixed point (the
implied Gaussians are improper) and is reported as non-convergence so
callers fall back to a direct solve. On loopy graphs convergence is not
guaranteed; when the iteration converges it converges to the exact solution.

The distributed runner partitions variables by an ownership map and exchanges
only cross-partition messages, batched per destination node per sweep. Its
arithmetic is bit-identical to the local solver because both call the same
vectorized sweep kernel on identically shaped arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import OvermonError
from .linalg import solve_direct, symmetrize
from .transport import HEADER_BYTES, InstantTransport

EDGE_EPS = 1e-12
DEGENERATE_EPS = 1e-12
MESSAGE_BYTES = 16  # two float64 per directed edge message

DEFAULT_EPS = 1e-6
DEFAULT_MAX_ITER = 50
LADDER_BASE_LAMBDA = 1e-3
LADDER_RETRIES = 3


class NotConverged(OvermonError):
    """Sweep limit reached before the mean vector settled."""

    def __init__(self, iterations: int, max_delta: float, result: "GabpResult | None" = None):
        super().__init__(f"no convergence after {iterations} iterations (max_delta={max_delta!r})")
        self.iterations = iterations
        self.max_delta = max_delta
        self.result = result


class DivisionDegenerate(OvermonError):
    """A partial precision P_i\\j fell below the degeneracy threshold."""


@dataclass(frozen=True)
class GabpProblem:
    """Symmetric system with a variable -> node ownership map."""

    a: np.ndarray
    b: np.ndarray
    owner: np.ndarray
    loaded: float = 0.0  # cumulative diagonal loading, provenance only

    @classmethod
    def build(cls, a, b, owner=None, loaded: float = 0.0) -> "GabpProblem":
        a = symmetrize(np.asarray(a, dtype=float))
        b = np.asarray(b, dtype=float)
        if b.ndim != 1 or b.shape[0] != a.shape[0]:
            raise ValueError("right-hand side length must match the matrix")
        if owner is None:
            owner = np.zeros(a.shape[0], dtype=int)
        owner = np.asarray(owner, dtype=int)
        if owner.shape != b.shape:
            raise ValueError("ownership map length must match the matrix")
        return cls(a=a, b=b, owner=owner, loaded=loaded)

    @property
    def size(self) -> int:
        return self.a.shape[0]


@dataclass
class GabpResult:
    x: np.ndarray
    converged: bool
    iterations: int
    max_delta: float
    bytes_sent: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_sent.values())


def diagonal_load(problem: GabpProblem, lam: float) -> GabpProblem:
    """Return a copy with ``A[i,i] += lam * (1 + |A[i,i]|)``."""
    if lam <= 0:
        raise ValueError("loading factor must be positive")
    a = problem.a.copy()
    d = a.diagonal().copy()
    a[np.diag_indices_from(a)] = d + lam * (1.0 + np.abs(d))
    return replace(problem, a=a, loaded=problem.loaded + lam)


def _edge_mask(a: np.ndarray) -> np.ndarray:
    mask = np.abs(a) > EDGE_EPS
    np.fill_diagonal(mask, False)
    return mask


def _sweep(a, b, diag, mask, safe_a, pm, mm):
    """One synchronous message sweep; returns the next message matrices.

    ``pm[i, j]`` is the precision of the message i -> j, ``mm[i, j]`` its
    mean. Entries outside ``mask`` are kept at exactly zero so column sums
    need no masking.
    """
    col_p = pm.sum(axis=0)
    col_pm = (pm * mm).sum(axis=0)
    s = diag + col_p
    t = b + col_pm
    p_minus = s[:, None] - pm.T
    if bool(np.any(mask & (np.abs(p_minus) < DEGENERATE_EPS))):
        raise DivisionDegenerate("partial precision below degeneracy threshold")
    num = t[:, None] - pm.T * mm.T
    safe_p = np.where(mask, p_minus, 1.0)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        mu_minus = num / safe_p
        new_pm = np.where(mask, -(a * a) / safe_p, 0.0)
        new_mm = np.where(mask, (safe_p / safe_a) * mu_minus, 0.0)
    return new_pm, new_mm


def _marginals(b, diag, pm, mm):
    col_p = pm.sum(axis=0)
    col_pm = (pm * mm).sum(axis=0)
    precision = diag + col_p
    with np.errstate(invalid="ignore", divide="ignore"):
        x = (b + col_pm) / precision
    return x, precision


def _delta(x_new: np.ndarray, x_old: np.ndarray) -> float:
    d = np.abs(x_new - x_old)
    if not np.all(np.isfinite(d)):
        return float("inf")
    return float(d.max()) if d.size else 0.0


def gabp_solve(problem: GabpProblem, eps: float = DEFAULT_EPS,
               max_iter: int = DEFAULT_MAX_ITER) -> GabpResult:
    """Run synchronous belief propagation locally until convergence.

    Raises NotConverged (with the last iterate attached) when ``max_iter``
    sweeps did not settle on a valid fixed point, and DivisionDegenerate on
    a vanishing partial precision or zero diagonal.
    """
    a, b = problem.a, problem.b
    diag = a.diagonal().copy()
    if bool(np.any(np.abs(diag) < DEGENERATE_EPS)):
        raise DivisionDegenerate("zero diagonal entry")
    mask = _edge_mask(a)
    safe_a = np.where(mask, a, 1.0)
    k = problem.size
    pm = np.zeros((k, k))
    mm = np.zeros((k, k))
    x_prev = b / diag
    last_delta = float("inf")
    for it in range(1, max_iter + 1):
        pm, mm = _sweep(a, b, diag, mask, safe_a, pm, mm)
        x, precision = _marginals(b, diag, pm, mm)
        last_delta = _delta(x, x_prev)
        x_prev = x
        if last_delta < eps and bool(np.all(precision > 0.0)):
            return GabpResult(x=x, converged=True, iterations=it, max_delta=last_delta)
    raise NotConverged(max_iter, last_delta,
                       GabpResult(x=x_prev, converged=False, iterations=max_iter,
                                  max_delta=last_delta))


class _GabpNode:
    """State and per-sweep computation for one owner in the distributed run."""

    def __init__(self, node_id: int, problem: GabpProblem, mask: np.ndarray,
                 safe_a: np.ndarray):
        self.id = node_id
        self._a = problem.a
        self._b = problem.b
        self._diag = problem.a.diagonal().copy()
        self._mask = mask
        self._safe_a = safe_a
        self.owned = np.flatnonzero(problem.owner == node_id)
        k = problem.size
        # Full-size message matrices; only columns of owned variables are
        # authoritative, which is all the sweep reads for owned rows.
        self.pm = np.zeros((k, k))
        self.mm = np.zeros((k, k))
        self.x_prev = self._b[self.owned] / self._diag[self.owned]
        # Directed cross edges grouped by destination owner.
        self.out_edges: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        own_mask = np.zeros(k, dtype=bool)
        own_mask[self.owned] = True
        rows, cols = np.nonzero(mask)
        cross = own_mask[rows] & ~own_mask[cols]
        for dst_node in np.unique(problem.owner[cols[cross]]):
            sel = cross & (problem.owner[cols] == dst_node)
            self.out_edges[int(dst_node)] = (rows[sel], cols[sel])
        self._local_rows = rows[own_mask[rows] & own_mask[cols]]
        self._local_cols = cols[own_mask[rows] & own_mask[cols]]
        self._outbox_pm: np.ndarray | None = None
        self._outbox_mm: np.ndarray | None = None

    def compute(self) -> None:
        new_pm, new_mm = _sweep(self._a, self._b, self._diag, self._mask,
                                self._safe_a, self.pm, self.mm)
        self._outbox_pm, self._outbox_mm = new_pm, new_mm

    def payload_for(self, dst_node: int):
        rows, cols = self.out_edges[dst_node]
        return rows, cols, self._outbox_pm[rows, cols], self._outbox_mm[rows, cols]

    def deliver(self, rows, cols, pvals, mvals) -> None:
        self.pm[rows, cols] = pvals
        self.mm[rows, cols] = mvals

    def commit_local(self) -> None:
        self.deliver(self._local_rows, self._local_cols,
                     self._outbox_pm[self._local_rows, self._local_cols],
                     self._outbox_mm[self._local_rows, self._local_cols])

    def finish_round(self) -> tuple[float, bool]:
        x_full, precision = _marginals(self._b, self._diag, self.pm, self.mm)
        x = x_full[self.owned]
        d = _delta(x, self.x_prev)
        self.x_prev = x
        valid = bool(np.all(precision[self.owned] > 0.0))
        return d, valid


def gabp_solve_distributed(problem: GabpProblem, net=None, eps: float = DEFAULT_EPS,
                           max_iter: int = DEFAULT_MAX_ITER) -> GabpResult:
    """Distributed synchronous belief propagation over a message transport.

    Every sweep, each owner batches the messages of its outgoing cross edges
    into one payload per destination owner (16 bytes per edge message plus a
    24-byte batch header). Numerics are identical to ``gabp_solve``; with a
    single owner no messages are exchanged at all and the result is
    bit-identical to the local solver.
    """
    if net is None:
        net = InstantTransport()
    a = problem.a
    diag = a.diagonal().copy()
    if bool(np.any(np.abs(diag) < DEGENERATE_EPS)):
        raise DivisionDegenerate("zero diagonal entry")
    mask = _edge_mask(a)
    safe_a = np.where(mask, a, 1.0)
    node_ids = [int(v) for v in np.unique(problem.owner)]
    nodes = {nid: _GabpNode(nid, problem, mask, safe_a) for nid in node_ids}
    bytes_sent: dict[tuple[int, int], int] = {}

    last_delta = float("inf")
    for it in range(1, max_iter + 1):
        for nid in node_ids:
            nodes[nid].compute()
        for nid in node_ids:
            node = nodes[nid]
            node.commit_local()
            for dst in sorted(node.out_edges):
                rows, cols, pvals, mvals = node.payload_for(dst)
                nbytes = MESSAGE_BYTES * len(rows) + HEADER_BYTES
                key = (nid, dst)
                bytes_sent[key] = bytes_sent.get(key, 0) + nbytes
                peer = nodes[dst]
                net.send(nid, dst, nbytes,
                         lambda peer=peer, rows=rows, cols=cols, pvals=pvals,
                                mvals=mvals: peer.deliver(rows, cols, pvals, mvals))
        net.flush()
        reports = [nodes[nid].finish_round() for nid in node_ids]
        last_delta = max(d for d, _ in reports)
        if last_delta < eps and all(ok for _, ok in reports):
            x = np.empty(problem.size)
            for nid in node_ids:
                x[nodes[nid].owned] = nodes[nid].x_prev
            return GabpResult(x=x, converged=True, iterations=it,
                              max_delta=last_delta, bytes_sent=bytes_sent)
    x = np.empty(problem.size)
    for nid in node_ids:
        x[nodes[nid].owned] = nodes[nid].x_prev
    raise NotConverged(max_iter, last_delta,
                       GabpResult(x=x, converged=False, iterations=max_iter,
                                  max_delta=last_delta, bytes_sent=bytes_sent))


@dataclass
class SolveAttempt:
    method: str
    loading: float
    iterations: int
    converged: bool
    max_delta: float
    bytes_total: int


@dataclass
class SolveProvenance:
    """What it took to produce a solution; shipped inside analysis reports."""

    attempts: list[SolveAttempt] = field(default_factory=list)
    method: str = "gabp"
    loading: float = 0.0
    regularization: dict = field(default_factory=dict)

    @property
    def iterations_total(self) -> int:
        return sum(a.iterations for a in self.attempts)

    @property
    def bytes_total(self) -> int:
        return sum(a.bytes_total for a in self.attempts)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "loading": self.loading,
            "regularization": dict(sorted(self.regularization.items())),
            "attempts": [
                {"method": a.method, "loading": a.loading, "iterations": a.iterations,
                 "converged": a.converged, "max_delta": a.max_delta,
                 "bytes_total": a.bytes_total}
                for a in self.attempts
            ],
        }


def solve_with_fallback(problem: GabpProblem, net=None, eps: float = DEFAULT_EPS,
                        max_iter: int = DEFAULT_MAX_ITER,
                        direct_cb=None) -> tuple[np.ndarray, SolveProvenance]:
    """GaBP with the standard recovery ladder.

    Non-convergence triggers up to LADDER_RETRIES reruns with diagonal loading
    doubled from LADDER_BASE_LAMBDA, then a direct pivoted solve of the
    original system. ``direct_cb`` lets callers substitute an accounted
    central solve (the distributed pipeline collects matrix blocks first);
    it defaults to a plain local ``solve_direct``. Every attempt is recorded.
    """
    prov = SolveProvenance()

    def _attempt(prob: GabpProblem, lam: float):
        try:
            if net is None:
                res = gabp_solve(prob, eps=eps, max_iter=max_iter)
            else:
                res = gabp_solve_distributed(prob, net=net, eps=eps, max_iter=max_iter)
            prov.attempts.append(SolveAttempt("gabp", lam, res.iterations, True,
                                              res.max_delta, res.total_bytes))
            return res
        except NotConverged as exc:
            partial = exc.result
            prov.attempts.append(SolveAttempt(
                "gabp", lam, exc.iterations, False, exc.max_delta,
                partial.total_bytes if partial is not None else 0))
            return None
        except DivisionDegenerate:
            prov.attempts.append(SolveAttempt("gabp", lam, 0, False, float("inf"), 0))
            return None

    res = _attempt(problem, 0.0)
    if res is not None:
        prov.method = "gabp"
        return res.x, prov

    lam = LADDER_BASE_LAMBDA
    for _ in range(LADDER_RETRIES):
        loaded = diagonal_load(problem, lam)
        res = _attempt(loaded, lam)
        if res is not None:
            prov.method = "gabp+load"
            prov.loading = lam
            return res.x, prov
        lam *= 2.0

    if direct_cb is None:
        x = solve_direct(problem.a, problem.b)
    else:
        x = direct_cb(problem)
    prov.attempts.append(SolveAttempt("direct", 0.0, 0, True, 0.0, 0))
    prov.method = "direct"
    return x, prov
