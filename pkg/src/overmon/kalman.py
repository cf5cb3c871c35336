"""Kalman filtering for metric series.

Three consumers share this module: the generic matrix-form filter
(predict/update), the per-parameter scalar smoother used on every metric
column, and the distributed protocol that turns smoothed windows into rows
of the deployment-wide joint covariance matrix. The gain solve in update()
can run through the belief-propagation solver, one execution per gain
column, or through plain LU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .collector import MetricWindow, ParameterId
from .errors import OvermonError
from .gabp import DivisionDegenerate, GabpProblem, gabp_solve
from .linalg import SingularMatrix, as_matrix, as_vector, solve_columns
from .transport import HEADER_BYTES, REAL_BYTES, InstantTransport

DEFAULT_SIGMA2 = 0.01


class DimensionMismatch(OvermonError):
    """Model, state, or measurement dimensions do not line up."""


class SingularInnovation(OvermonError):
    """The innovation covariance cannot be inverted."""


class MisalignedWindows(OvermonError):
    """Per-node windows disagree on length or tick position."""


def _resym(m: np.ndarray) -> np.ndarray:
    # (m + m.T)/2 is exactly symmetric: both mirror entries compute the
    # same floating sum.
    return (m + m.T) / 2.0


@dataclass(frozen=True)
class StateSpaceModel:
    """Linear system x_{k+1} = A x_k + w, z_k = H x_k + v.

    w ~ N(0, Q) and v ~ N(0, R); Q and R must be symmetric with
    nonnegative diagonals.
    """

    a: np.ndarray
    h: np.ndarray
    q: np.ndarray
    r: np.ndarray

    @classmethod
    def build(cls, a, h, q, r) -> "StateSpaceModel":
        a = as_matrix(a)
        h = as_matrix(h)
        q = as_matrix(q)
        r = as_matrix(r)
        s = a.shape[0]
        m = h.shape[0]
        if a.shape != (s, s):
            raise DimensionMismatch("transition matrix must be square")
        if h.shape[1] != s:
            raise DimensionMismatch("measurement matrix has wrong state width")
        if q.shape != (s, s):
            raise DimensionMismatch("process noise must be state-sized")
        if r.shape != (m, m):
            raise DimensionMismatch("measurement noise must be measurement-sized")
        for name, mat in (("q", q), ("r", r)):
            if not np.allclose(mat, mat.T, rtol=0, atol=1e-12):
                raise DimensionMismatch(f"{name} must be symmetric")
            if bool(np.any(mat.diagonal() < 0)):
                raise DimensionMismatch(f"{name} needs a nonnegative diagonal")
        return cls(a=a, h=h, q=q, r=r)

    @classmethod
    def random_walk(cls, s: int, sigma2: float = DEFAULT_SIGMA2) -> "StateSpaceModel":
        """Identity dynamics and observation with equal diagonal noise."""
        eye = np.eye(s)
        return cls(a=eye, h=eye.copy(), q=sigma2 * np.eye(s), r=sigma2 * np.eye(s))

    @property
    def state_dim(self) -> int:
        return self.a.shape[0]

    @property
    def measurement_dim(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class KalmanState:
    x_hat: np.ndarray
    p: np.ndarray
    k: int = 0

    @classmethod
    def build(cls, x_hat, p, k: int = 0) -> "KalmanState":
        x_hat = as_vector(x_hat)
        p = as_matrix(p)
        if p.shape != (x_hat.shape[0], x_hat.shape[0]):
            raise DimensionMismatch("covariance does not match state length")
        return cls(x_hat=x_hat, p=_resym(p), k=k)


@dataclass(frozen=True)
class KalmanTrace:
    """Internals of one measurement step, kept for reporting."""

    gain: np.ndarray
    innovation: np.ndarray
    x_hat_prior: np.ndarray
    p_prior: np.ndarray


def predict(state: KalmanState, model: StateSpaceModel) -> KalmanState:
    """Time step: x^- = A x, P^- = A P A^T + Q, re-symmetrized."""
    if model.state_dim != state.x_hat.shape[0]:
        raise DimensionMismatch("state length does not match model")
    x_prior = model.a @ state.x_hat
    p_prior = _resym(model.a @ state.p @ model.a.T + model.q)
    return KalmanState(x_hat=x_prior, p=p_prior, k=state.k)


def update(prior: KalmanState, z, model: StateSpaceModel,
           solver: str = "direct") -> tuple[KalmanState, KalmanTrace]:
    """Measurement step.

    The gain comes from solving S K^T = H P^- column by column, where
    S = H P^- H^T + R; with solver="gabp" each column is one belief
    propagation execution. Raises SingularInnovation when S cannot be
    inverted.
    """
    z = as_vector(z)
    if model.state_dim != prior.x_hat.shape[0]:
        raise DimensionMismatch("state length does not match model")
    if z.shape[0] != model.measurement_dim:
        raise DimensionMismatch("measurement length does not match model")
    if solver not in ("direct", "gabp"):
        raise ValueError(f"unknown solver {solver!r}")
    hp = model.h @ prior.p
    s_mat = _resym(hp @ model.h.T + model.r)
    if solver == "direct":
        try:
            k_t = solve_columns(s_mat, hp)
        except SingularMatrix as exc:
            raise SingularInnovation(str(exc)) from exc
    else:
        cols = []
        for j in range(hp.shape[1]):
            try:
                res = gabp_solve(GabpProblem.build(s_mat, hp[:, j]))
            except DivisionDegenerate as exc:
                raise SingularInnovation(str(exc)) from exc
            cols.append(res.x)
        k_t = np.column_stack(cols) if cols else np.zeros((s_mat.shape[0], 0))
    gain = k_t.T
    innovation = z - model.h @ prior.x_hat
    x_hat = prior.x_hat + gain @ innovation
    p = _resym((np.eye(prior.p.shape[0]) - gain @ model.h) @ prior.p)
    state = KalmanState(x_hat=x_hat, p=p, k=prior.k + 1)
    trace = KalmanTrace(gain=gain, innovation=innovation,
                        x_hat_prior=prior.x_hat, p_prior=prior.p)
    return state, trace


def smooth_series(series, sigma2: float = DEFAULT_SIGMA2
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Scalar filter over one metric series.

    Unit transition and observation, process and measurement noise both
    sigma2. The filter starts at the first sample with variance sigma2 and
    consumes the remaining samples one predict+update round each. Returns
    the filtered mean and variance at every step.
    """
    series = as_vector(series)
    n = series.shape[0]
    if n < 1:
        raise ValueError("series must hold at least one sample")
    means = np.empty(n)
    variances = np.empty(n)
    x = float(series[0])
    p = float(sigma2)
    means[0] = x
    variances[0] = p
    for i in range(1, n):
        p_prior = p + sigma2
        gain = p_prior / (p_prior + sigma2)
        x = x + gain * (series[i] - x)
        p = (1.0 - gain) * p_prior
        means[i] = x
        variances[i] = p
    return means, variances


def smooth_columns(matrix: np.ndarray, sigma2: float = DEFAULT_SIGMA2) -> np.ndarray:
    """Filtered means of every column of an n x k window matrix."""
    out = np.empty_like(matrix, dtype=float)
    for j in range(matrix.shape[1]):
        out[:, j] = smooth_series(matrix[:, j], sigma2)[0]
    return out


def _check_alignment(windows: Mapping[int, MetricWindow]) -> int:
    if not windows:
        raise ValueError("no windows given")
    filled = {w.filled for w in windows.values()}
    ticks = {w.tick for w in windows.values()}
    if len(filled) > 1 or len(ticks) > 1:
        raise MisalignedWindows(
            f"windows disagree: filled={sorted(filled)} tick={sorted(ticks)}")
    n = filled.pop()
    if n < 2:
        raise MisalignedWindows("windows hold fewer than 2 aligned samples")
    return n


def joint_covariance_rows(windows: Mapping[int, MetricWindow],
                          targets: Sequence[ParameterId],
                          transport: InstantTransport | None = None,
                          sigma2: float = DEFAULT_SIGMA2,
                          assemble_at: int | None = None) -> np.ndarray:
    """Distributed rows of the joint covariance of smoothed metrics.

    Every node smooths and centers its own columns. For each target the
    owning node ships the centered smoothed target series (n reals) to each
    peer; each peer answers with its slice of covariances against its local
    columns, and the rows land on ``assemble_at`` (the first target's owner
    by default). Entries use the n-1 denominator, so the result matches the
    centrally computed empirical covariance of the concatenated smoothed
    windows.

    Window params must carry deployment-wide dense global indices.
    """
    if not targets:
        raise ValueError("targets must be nonempty")
    if transport is None:
        transport = InstantTransport()
    n = _check_alignment(windows)
    if assemble_at is None:
        assemble_at = targets[0].node
    if assemble_at not in windows:
        raise ValueError(f"assembly node {assemble_at} has no window")

    k_total = sum(w.k_local for w in windows.values())
    centered: dict[int, np.ndarray] = {}
    slices: dict[int, np.ndarray] = {}
    for node, w in sorted(windows.items()):
        if w.params is None:
            raise ValueError(f"node {node}: window carries no parameter ids")
        smoothed = smooth_columns(w.window_matrix(), sigma2)
        centered[node] = smoothed - smoothed.mean(axis=0)
        slices[node] = np.array([p.global_index for p in w.params])
        if bool(np.any(slices[node] >= k_total)):
            raise ValueError("window params are not densely indexed")

    rows = np.zeros((len(targets), k_total))
    series_bytes = REAL_BYTES * n + HEADER_BYTES

    for t_pos, target in enumerate(targets):
        owner = target.node
        if owner not in windows:
            raise ValueError(f"target {target.name!r} owner {owner} has no window")
        local = [i for i, p in enumerate(windows[owner].params)
                 if p.name == target.name]
        if not local:
            raise ValueError(f"target {target.name!r} not in node {owner} window")
        t_series = centered[owner][:, local[0]]

        def slice_for(node: int, series: np.ndarray = t_series) -> np.ndarray:
            return centered[node].T @ series / (n - 1)

        for node in sorted(windows):
            if node == owner:
                rows[t_pos, slices[node]] = slice_for(node)
                if owner != assemble_at:
                    nbytes = REAL_BYTES * len(slices[node]) + HEADER_BYTES
                    transport.send(owner, assemble_at, nbytes, lambda: None)
                continue

            def receive(node: int = node, t_pos: int = t_pos) -> None:
                vals = slice_for(node)
                rows[t_pos, slices[node]] = vals
                if node != assemble_at:
                    nbytes = REAL_BYTES * len(vals) + HEADER_BYTES
                    transport.send(node, assemble_at, nbytes, lambda: None)

            transport.send(owner, node, series_bytes, receive)
        transport.flush()
    return rows
