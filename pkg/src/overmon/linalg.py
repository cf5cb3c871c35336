"""Dense linear algebra kernels used by the monitoring stack.

Everything here operates on plain numpy float64 arrays. ``solve_direct`` is a
pivoted LU solve with one round of iterative refinement; it doubles as the
reference solver that the message-passing solver is checked against, so it is
kept deliberately independent of any iterative scheme.
"""

from __future__ import annotations

import numpy as np

from .errors import OvermonError

PIVOT_EPS = 1e-12
SCALE_EPS = 1e-9
SYMMETRY_EPS = 1e-12


class SingularMatrix(OvermonError):
    """A pivot below PIVOT_EPS was met during factorization."""


class InsufficientSamples(OvermonError):
    """Covariance requested from fewer than two samples."""


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    return a


def as_vector(b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.ndim != 1:
        raise ValueError(f"expected a 1-d array, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError("vector entries must be finite")
    return b


def symmetrize(a: np.ndarray, eps: float = SYMMETRY_EPS) -> np.ndarray:
    """Return the exactly symmetric version of ``a``.

    Asymmetry beyond ``eps`` (relative to the largest entry) is a caller bug.
    """
    a = as_matrix(a)
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if a.shape[0] != a.shape[1] or np.max(np.abs(a - a.T), initial=0.0) > eps * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    upper = np.triu(a)
    return upper + np.triu(a, 1).T


def lu_factor(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """LU with partial pivoting. Returns (packed LU, row permutation)."""
    lu = np.array(as_matrix(a), copy=True)
    k, cols = lu.shape
    if k != cols:
        raise ValueError("matrix must be square")
    perm = np.arange(k)
    for col in range(k):
        rel = int(np.argmax(np.abs(lu[col:, col])))
        p = col + rel
        if abs(lu[p, col]) < PIVOT_EPS:
            raise SingularMatrix(f"pivot {lu[p, col]!r} below {PIVOT_EPS} at column {col}")
        if p != col:
            lu[[col, p]] = lu[[p, col]]
            perm[[col, p]] = perm[[p, col]]
        lu[col + 1:, col] /= lu[col, col]
        lu[col + 1:, col + 1:] -= np.outer(lu[col + 1:, col], lu[col, col + 1:])
    return lu, perm


def lu_solve(lu: np.ndarray, perm: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = lu.shape[0]
    x = np.array(b, dtype=float)[perm]
    for i in range(1, k):
        x[i] -= lu[i, :i] @ x[:i]
    for i in range(k - 1, -1, -1):
        x[i] -= lu[i, i + 1:] @ x[i + 1:]
        x[i] /= lu[i, i]
    return x


def solve_direct(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` by pivoted LU plus one refinement step.

    Raises SingularMatrix when any pivot magnitude falls below PIVOT_EPS.
    """
    a = as_matrix(a)
    b = as_vector(b)
    if a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if a.shape[0] != b.shape[0]:
        raise ValueError("matrix/vector size mismatch")
    lu, perm = lu_factor(a)
    x = lu_solve(lu, perm, b)
    # One refinement pass keeps the residual near machine precision even for
    # moderately ill-conditioned systems.
    residual = b - a @ x
    x = x + lu_solve(lu, perm, residual)
    return x


def solve_columns(a, rhs) -> np.ndarray:
    """Solve ``a @ X = rhs`` column by column, factoring ``a`` once."""
    a = as_matrix(a)
    rhs = as_matrix(rhs)
    lu, perm = lu_factor(a)
    out = np.empty_like(rhs)
    for j in range(rhs.shape[1]):
        col = lu_solve(lu, perm, rhs[:, j])
        col = col + lu_solve(lu, perm, rhs[:, j] - a @ col)
        out[:, j] = col
    return out


def empirical_covariance(w) -> np.ndarray:
    """Sample covariance ``w.T @ w / (n - 1)`` of already-centered columns."""
    w = as_matrix(w)
    n = w.shape[0]
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {n}")
    means = np.abs(w.mean(axis=0))
    if means.size and float(means.max()) > 1e-6 * max(1.0, float(np.abs(w).max())):
        raise ValueError("columns must be centered before covariance")
    c = w.T @ w / (n - 1)
    # Mirror the upper triangle so the result is exactly symmetric.
    upper = np.triu(c)
    return upper + np.triu(c, 1).T


def center_and_standardize(w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column z-scoring with explicit zero-variance flagging.

    Returns ``(standardized, means, scales)``. Columns whose sample standard
    deviation falls below SCALE_EPS get scale 0.0 and an all-zero output
    column; callers treat scale == 0 as "constant column".
    """
    w = as_matrix(w)
    if w.shape[0] < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {w.shape[0]}")
    means = w.mean(axis=0)
    centered = w - means
    stds = centered.std(axis=0, ddof=1)
    scales = np.where(stds >= SCALE_EPS, stds, 0.0)
    out = np.zeros_like(centered)
    live = scales > 0
    out[:, live] = centered[:, live] / scales[live]
    return out, means, scales


def destandardize(columns: np.ndarray, means: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Inverse of center_and_standardize for live columns; constants restore to their mean."""
    return columns * scales + means


def dump_matrix(a) -> str:
    """Text form: first line "rows cols", then one space-separated line per row."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    for row in a:
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def load_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty matrix text")
    head = lines[0].split()
    if len(head) != 2:
        raise ValueError("first line must be 'rows cols'")
    rows, cols = int(head[0]), int(head[1])
    if len(lines) - 1 != rows:
        raise ValueError(f"expected {rows} rows, got {len(lines) - 1}")
    data = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != cols:
            raise ValueError(f"row with {len(parts)} values, expected {cols}")
        data.append([float(p) for p in parts])
    return np.asarray(data, dtype=float).reshape(rows, cols)


def dump_vector(b) -> str:
    b = np.asarray(b, dtype=float).reshape(-1, 1)
    return dump_matrix(b)


def load_vector(text: str) -> np.ndarray:
    m = load_matrix(text)
    if 1 not in m.shape and m.size != max(m.shape):
        raise ValueError("vector file must be k x 1 or 1 x k")
    return m.reshape(-1)
