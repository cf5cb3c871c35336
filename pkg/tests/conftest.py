from __future__ import annotations

import numpy as np
import pytest


def make_spd(k: int, rng: np.random.Generator, dominance: float = 2.5) -> np.ndarray:
    """Random symmetric matrix made diagonally dominant (hence SPD)."""
    m = rng.uniform(-1.0, 1.0, size=(k, k))
    a = (m + m.T) / 2.0
    np.fill_diagonal(a, 0.0)
    row = np.abs(a).sum(axis=1)
    np.fill_diagonal(a, dominance * np.maximum(row, 1e-3))
    return a


@pytest.fixture
def rng():
    return np.random.default_rng(20731)
