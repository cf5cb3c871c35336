"""Root-cause regression over collected metrics.

Given standardized observation columns and a performance target, this
module fits a weight per parameter (ordinary least squares centrally, or
generalized least squares from covariance data so one belief-propagation
solve does the whole job), ranks the heaviest parameters, and answers
what-if questions about scaling a single weight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .collector import ParameterId
from .errors import OvermonError
from .gabp import GabpProblem, SolveProvenance, solve_with_fallback
from .linalg import SingularMatrix, as_matrix, as_vector, solve_direct
from .transport import HEADER_BYTES, InstantTransport

RIDGE = 1e-8
DEFAULT_TOP_K = 10
# (node, index, magnitude, weight) per ranking entry on the wire.
TRIPLE_BYTES = 24

RankEntry = tuple[ParameterId, float, float]


class SingularNormalEquations(OvermonError):
    """The ridge-stabilized normal equations still failed to solve."""


@dataclass(frozen=True)
class RegressionInput:
    """Stage-III problem statement.

    ``a_std``/``b_std`` are centered and standardized; ``params`` orders the
    columns by global index; means and scales come from the standardizer so
    predictions can be mapped back to raw target units.
    """

    a_std: np.ndarray
    b_std: np.ndarray
    params: tuple[ParameterId, ...]
    col_means: np.ndarray
    col_scales: np.ndarray
    target_mean: float
    target_scale: float

    def __post_init__(self):
        if self.a_std.shape[1] != len(self.params):
            raise ValueError("params must label every column")
        if self.a_std.shape[0] != self.b_std.shape[0]:
            raise ValueError("observation counts differ")


def ols(a_std, b_std) -> np.ndarray:
    """Least-squares weights via ridge-stabilized normal equations."""
    a = as_matrix(a_std)
    b = as_vector(b_std)
    if a.shape[0] != b.shape[0]:
        raise ValueError("observation counts differ")
    gram = a.T @ a + RIDGE * np.eye(a.shape[1])
    try:
        return solve_direct(gram, a.T @ b)
    except SingularMatrix as exc:
        raise SingularNormalEquations(str(exc)) from exc


def gls(p_joint, c, owner=None, net=None, eps: float = 1e-6,
        max_iter: int = 50, direct_cb=None) -> tuple[np.ndarray, SolveProvenance]:
    """Weights from covariance data: solve P_joint x = c.

    One belief-propagation execution (distributed when ``owner`` assigns
    variables to nodes), with the standard recovery ladder behind it. The
    provenance records every attempt for the analysis report.
    """
    problem = GabpProblem.build(p_joint, c, owner=owner)
    return solve_with_fallback(problem, net=net, eps=eps, max_iter=max_iter,
                               direct_cb=direct_cb)


def _rank_key(entry: RankEntry):
    pid, magnitude, _ = entry
    return (-magnitude, pid.node, pid.global_index)


def rank_top_k(x, params: Sequence[ParameterId], k: int = DEFAULT_TOP_K
               ) -> list[RankEntry]:
    """Top-``k`` parameters by |weight|, ties by (node, index) ascending."""
    x = as_vector(x)
    if x.shape[0] != len(params):
        raise ValueError("weight vector and params disagree")
    entries = [(pid, float(abs(w)), float(w)) for pid, w in zip(params, x)]
    entries.sort(key=_rank_key)
    return entries[:k]


def rank_top_k_distributed(local_weights: Mapping[int, Sequence[tuple[ParameterId, float]]],
                           children: Mapping[int, Sequence[int]], root: int,
                           k: int = DEFAULT_TOP_K,
                           transport: InstantTransport | None = None
                           ) -> list[RankEntry]:
    """Convergecast ranking up an overlay tree.

    Each node merges its own entries with its children's top-``k`` lists and
    forwards at most ``k`` triples to its parent; the root's list equals the
    central sort exactly.
    """
    if transport is None:
        transport = InstantTransport()

    def subtree(node: int) -> list[RankEntry]:
        entries = [(pid, float(abs(w)), float(w))
                   for pid, w in local_weights.get(node, [])]
        for child in sorted(children.get(node, [])):
            child_top = subtree(child)
            nbytes = HEADER_BYTES + TRIPLE_BYTES * len(child_top)
            transport.send(child, node, nbytes, lambda: None)
            entries.extend(child_top)
        entries.sort(key=_rank_key)
        return entries[:k]

    result = subtree(root)
    transport.flush()
    return result


def predict(a_std, x) -> np.ndarray:
    """Model output for every observation row."""
    return as_matrix(a_std) @ as_vector(x)


def fit_rmse(predicted, actual) -> float:
    predicted = as_vector(predicted)
    actual = as_vector(actual)
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def what_if(a_std, x, i: int, delta: float = 0.2, *,
            target_mean: float = 0.0, target_scale: float = 1.0
            ) -> tuple[np.ndarray, np.ndarray]:
    """Scale weight ``i`` by (1 + delta) and replay the model.

    Returns the adjusted weights and the predicted target in raw units.
    """
    x = as_vector(x).copy()
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"parameter index {i} out of range")
    x[i] *= 1.0 + delta
    b_hat = predict(a_std, x) * target_scale + target_mean
    return x, b_hat


@dataclass
class RootCauseReport:
    """Everything Stage III hands to reporting and Stage IV."""

    weights: np.ndarray
    ranking: list[RankEntry]
    predicted: np.ndarray
    actual: np.ndarray
    fit_rmse: float
    solver_provenance: SolveProvenance = field(default_factory=SolveProvenance)

    def to_dict(self) -> dict:
        return {
            "fit_rmse": self.fit_rmse,
            "weights": [float(w) for w in self.weights],
            "ranking": [
                {"node": pid.node, "name": pid.name,
                 "global_index": pid.global_index,
                 "resource_kind": pid.resource_kind.value,
                 "magnitude": magnitude, "weight": weight}
                for pid, magnitude, weight in self.ranking
            ],
            "solver": self.solver_provenance.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        """Ranking as an aligned text table."""
        header = f"{'rank':>4}  {'node':>4}  {'parameter':<32}  {'weight':>12}"
        lines = [header, "-" * len(header)]
        for pos, (pid, _, weight) in enumerate(self.ranking, start=1):
            lines.append(
                f"{pos:>4}  {pid.node:>4}  {pid.name:<32}  {weight:>12.6f}")
        return "\n".join(lines)


def build_report(a_std, b_std, x, params: Sequence[ParameterId],
                 k: int = DEFAULT_TOP_K,
                 provenance: SolveProvenance | None = None) -> RootCauseReport:
    b_hat = predict(a_std, x)
    return RootCauseReport(
        weights=as_vector(x),
        ranking=rank_top_k(x, params, k),
        predicted=b_hat,
        actual=as_vector(b_std),
        fit_rmse=fit_rmse(b_hat, b_std),
        solver_provenance=provenance if provenance is not None else SolveProvenance(),
    )


def dump_prediction_csv(report: RootCauseReport, fh) -> None:
    """Rows of (row, actual, predicted) for plotting fit quality."""
    fh.write("row,actual,predicted\n")
    for i, (act, pred) in enumerate(zip(report.actual, report.predicted)):
        fh.write(f"{i},{float(act)!r},{float(pred)!r}\n")
