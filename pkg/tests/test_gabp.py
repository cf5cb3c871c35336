from __future__ import annotations

import numpy as np
import pytest

from conftest import make_spd
from overmon.gabp import (
    DivisionDegenerate,
    GabpProblem,
    NotConverged,
    diagonal_load,
    gabp_solve,
    gabp_solve_distributed,
    solve_with_fallback,
)
from overmon.linalg import solve_direct
from overmon.transport import InstantTransport


def test_two_by_two_frozen_example():
    p = GabpProblem.build([[2.0, 1.0], [1.0, 2.0]], [3.0, 3.0])
    res = gabp_solve(p)
    assert res.converged
    assert res.iterations <= 5
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-9)


def test_identity_converges_in_one_sweep(rng):
    b = rng.normal(size=6)
    res = gabp_solve(GabpProblem.build(np.eye(6), b))
    assert res.converged and res.iterations == 1
    np.testing.assert_array_equal(res.x, b)


def test_non_walk_summable_system_does_not_converge():
    p = GabpProblem.build([[1.0, 2.0], [2.0, 1.0]], [1.0, 1.0])
    with pytest.raises(NotConverged) as exc_info:
        gabp_solve(p)
    assert exc_info.value.iterations == 50
    assert exc_info.value.result is not None
    assert not exc_info.value.result.converged


def test_rejected_fixed_point_still_carries_exact_means():
    # On a single-edge graph the mean iteration settles on the true
    # solution even for an indefinite matrix; the marginal precisions go
    # negative there, so the run must still be reported as failed.
    p = GabpProblem.build([[1.0, 2.0], [2.0, 1.0]], [3.0, 0.0])
    with pytest.raises(NotConverged) as exc_info:
        gabp_solve(p)
    np.testing.assert_allclose(exc_info.value.result.x,
                               solve_direct(p.a, p.b), atol=1e-9)


def test_matches_direct_solver_on_dominant_spd(rng):
    a = make_spd(50, rng)
    b = rng.normal(size=50)
    res = gabp_solve(GabpProblem.build(a, b))
    assert res.converged
    assert res.iterations <= 15
    np.testing.assert_allclose(res.x, solve_direct(a, b), rtol=0, atol=1e-6)


def test_zero_diagonal_is_degenerate():
    with pytest.raises(DivisionDegenerate):
        gabp_solve(GabpProblem.build([[0.0, 1.0], [1.0, 1.0]], [1.0, 1.0]))


def test_diagonal_load_frozen_example():
    p = GabpProblem.build([[1.0, 5.0], [5.0, 2.0]], [1.0, 1.0])
    loaded = diagonal_load(p, 0.1)
    np.testing.assert_allclose(loaded.a.diagonal(), [1.2, 2.3])
    assert loaded.loaded == pytest.approx(0.1)
    # Off-diagonal untouched.
    assert loaded.a[0, 1] == 5.0


def test_diagonal_load_can_rescue_divergent_system():
    p = GabpProblem.build([[1.0, 2.0], [2.0, 1.0]], [1.0, 1.0])
    loaded = diagonal_load(p, 1.0)
    res = gabp_solve(loaded)
    assert res.converged
    np.testing.assert_allclose(res.x, solve_direct(loaded.a, loaded.b), atol=1e-6)
    # The loaded solution is a different system's answer, not the original's.
    assert not np.allclose(res.x, solve_direct(p.a, p.b))


def test_distributed_single_owner_bit_identical(rng):
    a = make_spd(12, rng)
    b = rng.normal(size=12)
    p = GabpProblem.build(a, b)
    local = gabp_solve(p)
    dist = gabp_solve_distributed(p, net=InstantTransport())
    assert np.array_equal(local.x, dist.x)
    assert local.iterations == dist.iterations
    assert dist.bytes_sent == {}


def test_distributed_two_owner_two_by_two():
    p = GabpProblem.build([[2.0, 1.0], [1.0, 2.0]], [3.0, 3.0], owner=[0, 1])
    res = gabp_solve_distributed(p, net=InstantTransport())
    assert res.converged
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-9)
    # One cross edge per direction: one 16-byte message + 24-byte header
    # per neighbour payload per sweep, in each direction.
    per_round = 16 + 24
    assert res.bytes_sent[(0, 1)] == res.iterations * per_round
    assert res.bytes_sent[(1, 0)] == res.iterations * per_round


def test_distributed_matches_local_on_random_partitions(rng):
    for trial in range(6):
        k = int(rng.integers(3, 40))
        a = make_spd(k, rng)
        b = rng.normal(size=k)
        owner = rng.integers(0, int(rng.integers(2, 5)), size=k)
        local = gabp_solve(GabpProblem.build(a, b))
        dist = gabp_solve_distributed(GabpProblem.build(a, b, owner=owner),
                                      net=InstantTransport())
        assert dist.iterations == local.iterations
        np.testing.assert_allclose(dist.x, local.x, rtol=0, atol=1e-9)


def test_distributed_byte_accounting_exact(rng):
    k = 10
    a = make_spd(k, rng)
    b = rng.normal(size=k)
    owner = np.array([0] * 5 + [1] * 5)
    p = GabpProblem.build(a, b, owner=owner)
    res = gabp_solve_distributed(p, net=InstantTransport())
    mask = np.abs(p.a) > 1e-12
    np.fill_diagonal(mask, False)
    cross_01 = int(np.sum(mask[:5, 5:]))
    cross_10 = int(np.sum(mask[5:, :5]))
    assert res.bytes_sent[(0, 1)] == res.iterations * (16 * cross_01 + 24)
    assert res.bytes_sent[(1, 0)] == res.iterations * (16 * cross_10 + 24)
    # Symmetric systems have symmetric cross-edge counts.
    assert cross_01 == cross_10


def test_fallback_ladder_records_attempts():
    p = GabpProblem.build([[1.0, 2.0], [2.0, 1.0]], [3.0, 0.0])
    x, prov = solve_with_fallback(p)
    np.testing.assert_allclose(x, solve_direct(p.a, p.b), atol=1e-9)
    methods = [a.method for a in prov.attempts]
    assert methods[0] == "gabp"
    assert methods[-1] == "direct"
    lams = [a.loading for a in prov.attempts if a.method == "gabp"]
    assert lams == [0.0, 1e-3, 2e-3, 4e-3]
    assert prov.method == "direct"


def test_fallback_not_needed_on_good_system(rng):
    a = make_spd(20, rng)
    b = rng.normal(size=20)
    x, prov = solve_with_fallback(GabpProblem.build(a, b))
    assert prov.method == "gabp"
    assert len(prov.attempts) == 1
    np.testing.assert_allclose(x, solve_direct(a, b), atol=1e-6)
