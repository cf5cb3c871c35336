from __future__ import annotations

import math

import numpy as np
import pytest

from overmon import linalg
from overmon.linalg import (
    InsufficientSamples,
    SingularMatrix,
    center_and_standardize,
    dump_matrix,
    dump_vector,
    empirical_covariance,
    load_matrix,
    load_vector,
    solve_columns,
    solve_direct,
)


def test_solve_direct_matches_numpy_oracle(rng):
    for k in (1, 2, 7, 40):
        a = rng.normal(size=(k, k)) + k * np.eye(k)
        b = rng.normal(size=k)
        x = solve_direct(a, b)
        np.testing.assert_allclose(x, np.linalg.solve(a, b), rtol=0, atol=1e-8)


def test_solve_direct_residual_contract(rng):
    # Includes poorly scaled systems; the residual bound must still hold.
    for trial in range(30):
        k = int(rng.integers(2, 60))
        a = rng.normal(size=(k, k)) * (10.0 ** rng.integers(-3, 4))
        a += np.eye(k) * rng.uniform(0.5, 2.0)
        b = rng.normal(size=k) * (10.0 ** rng.integers(-3, 4))
        x = solve_direct(a, b)
        resid = float(np.max(np.abs(a @ x - b)))
        assert resid <= 1e-9 * (1.0 + float(np.max(np.abs(b))))


def test_solve_direct_rejects_singular():
    a = [[1.0, 2.0], [2.0, 4.0]]
    with pytest.raises(SingularMatrix):
        solve_direct(a, [1.0, 1.0])


def test_solve_direct_near_singular_pivot():
    a = [[1e-13, 0.0], [0.0, 1.0]]
    with pytest.raises(SingularMatrix):
        solve_direct(a, [1.0, 1.0])


def test_solve_columns_matches_column_solves(rng):
    a = rng.normal(size=(8, 8)) + 8 * np.eye(8)
    rhs = rng.normal(size=(8, 3))
    out = solve_columns(a, rhs)
    for j in range(3):
        np.testing.assert_allclose(out[:, j], solve_direct(a, rhs[:, j]), atol=1e-10)


def test_empirical_covariance_frozen_example():
    w = np.array([[1.0, 2.0], [-1.0, -2.0], [0.0, 0.0]])
    c = empirical_covariance(w)
    np.testing.assert_allclose(c, [[1.0, 2.0], [2.0, 4.0]], atol=1e-15)


def test_empirical_covariance_exact_symmetry(rng):
    w = rng.normal(size=(50, 12))
    w -= w.mean(axis=0)
    c = empirical_covariance(w)
    assert np.array_equal(c, c.T)


def test_empirical_covariance_needs_two_samples():
    with pytest.raises(InsufficientSamples):
        empirical_covariance(np.ones((1, 3)))


def test_center_and_standardize_frozen_example():
    w = np.array([[0.0], [2.0]])
    std, means, scales = center_and_standardize(w)
    assert means[0] == pytest.approx(1.0)
    assert scales[0] == pytest.approx(math.sqrt(2.0))
    np.testing.assert_allclose(std[:, 0], [-1 / math.sqrt(2), 1 / math.sqrt(2)])


def test_center_and_standardize_flags_constant_column(rng):
    w = np.column_stack([rng.normal(size=20), np.full(20, 7.25)])
    std, means, scales = center_and_standardize(w)
    assert scales[1] == 0.0
    assert np.all(std[:, 1] == 0.0)
    assert means[1] == pytest.approx(7.25)


def test_standardize_round_trip(rng):
    w = rng.normal(size=(30, 5)) * rng.uniform(0.5, 50.0, size=5) + rng.normal(size=5)
    std, means, scales = center_and_standardize(w)
    back = linalg.destandardize(std, means, scales)
    np.testing.assert_allclose(back, w, atol=1e-9)
    np.testing.assert_allclose(std.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(std.std(axis=0, ddof=1), 1.0, atol=1e-12)


def test_matrix_text_round_trip(rng):
    a = rng.normal(size=(3, 4))
    text = dump_matrix(a)
    assert text.splitlines()[0] == "3 4"
    np.testing.assert_array_equal(load_matrix(text), a)
    v = rng.normal(size=6)
    np.testing.assert_array_equal(load_vector(dump_vector(v)), v)


def test_load_matrix_validates_shape():
    with pytest.raises(ValueError):
        load_matrix("2 2\n1.0 2.0\n")
    with pytest.raises(ValueError):
        load_matrix("1 2\n1.0 2.0 3.0\n")
