import io
import json

import numpy as np
import pytest

from overmon.collector import ParameterId
from overmon.gabp import SolveProvenance
from overmon.linalg import solve_direct
from overmon.regression import (
    RootCauseReport,
    build_report,
    dump_prediction_csv,
    fit_rmse,
    gls,
    ols,
    predict,
    rank_top_k,
    rank_top_k_distributed,
    what_if,
)
from overmon.transport import InstantTransport

from conftest import make_spd


def pid(i, node=0, name=None):
    return ParameterId(node, name or f"p{i}", i)


def test_ols_recovers_exact_solution(rng):
    a = rng.normal(size=(8, 8)) + 4 * np.eye(8)
    x_true = rng.normal(size=8)
    x = ols(a, a @ x_true)
    np.testing.assert_allclose(x, x_true, rtol=0, atol=1e-8)


def test_ols_orthonormal_columns(rng):
    q, _ = np.linalg.qr(rng.normal(size=(30, 5)))
    b = rng.normal(size=30)
    np.testing.assert_allclose(ols(q, b), q.T @ b, rtol=0, atol=1e-6)


def test_ols_matches_normal_equation_oracle(rng):
    a = rng.normal(size=(100, 10))
    x_true = rng.normal(size=10)
    b = a @ x_true + 0.01 * rng.normal(size=100)
    oracle = np.linalg.solve(a.T @ a + 1e-8 * np.eye(10), a.T @ b)
    np.testing.assert_allclose(ols(a, b), oracle, rtol=0, atol=1e-9)


def test_gls_identity_covariance_returns_cross_covariance():
    c = np.array([0.5, -1.5, 2.0])
    x, prov = gls(np.eye(3), c)
    np.testing.assert_allclose(x, c, rtol=0, atol=1e-9)
    assert prov.method == "gabp"


def test_gls_diagonal_covariance():
    p = np.diag([2.0, 4.0, 8.0])
    c = np.array([2.0, 2.0, 2.0])
    x, _ = gls(p, c)
    np.testing.assert_allclose(x, [1.0, 0.5, 0.25], rtol=0, atol=1e-9)


def test_gls_matches_direct_solver(rng):
    p = make_spd(12, rng)
    c = rng.normal(size=12)
    x, prov = gls(p, c)
    np.testing.assert_allclose(x, solve_direct(p, c), rtol=0, atol=1e-6)
    assert prov.attempts[0].converged


def test_gls_distributed_matches_local(rng):
    p = make_spd(10, rng)
    c = rng.normal(size=10)
    owner = np.array([0] * 5 + [1] * 5)
    local_x, _ = gls(p, c)
    dist_x, prov = gls(p, c, owner=owner, net=InstantTransport())
    np.testing.assert_allclose(dist_x, local_x, rtol=0, atol=1e-9)
    assert prov.attempts[0].bytes_total > 0


def test_gls_on_exactly_standardized_orthogonal_data_matches_ols(rng):
    n, k = 200, 6
    q, _ = np.linalg.qr(rng.normal(size=(n, k)))
    q -= q.mean(axis=0)
    a = q / q.std(axis=0, ddof=1)
    b = rng.normal(size=n)
    b -= b.mean()
    x_ols = ols(a, b)
    x_gls, _ = gls(a.T @ a / (n - 1), a.T @ b / (n - 1))
    np.testing.assert_allclose(x_gls, x_ols, rtol=0, atol=1e-4)


def test_rank_orders_by_magnitude():
    params = [pid(0), pid(1), pid(2)]
    top = rank_top_k([0.1, -5.0, 2.0], params, k=2)
    assert [e[0].global_index for e in top] == [1, 2]
    assert top[0][1] == 5.0
    assert top[0][2] == -5.0


def test_rank_breaks_ties_by_node_then_index():
    params = [ParameterId(1, "b", 1), ParameterId(0, "a", 0),
              ParameterId(1, "c", 2)]
    top = rank_top_k([3.0, -3.0, 3.0], params, k=3)
    assert [(e[0].node, e[0].global_index) for e in top] == [(0, 0), (1, 1), (1, 2)]


def test_rank_k_larger_than_length():
    params = [pid(0), pid(1)]
    assert len(rank_top_k([1.0, 2.0], params, k=10)) == 2


def test_distributed_rank_equals_central(rng):
    for trial in range(8):
        n_nodes = int(rng.integers(1, 6))
        weights = []
        local = {}
        idx = 0
        for node in range(n_nodes):
            count = int(rng.integers(1, 7))
            mine = []
            for _ in range(count):
                w = float(rng.normal())
                mine.append((ParameterId(node, f"m{idx}", idx), w))
                idx += 1
            local[node] = mine
            weights.extend(mine)
        # Random tree rooted at 0.
        children = {n: [] for n in range(n_nodes)}
        for node in range(1, n_nodes):
            children[int(rng.integers(0, node))].append(node)
        k = int(rng.integers(1, 8))
        central = rank_top_k([w for _, w in weights],
                             [p for p, _ in weights], k)
        dist = rank_top_k_distributed(local, children, root=0, k=k)
        assert dist == central


def test_distributed_rank_accounts_bytes():
    local = {0: [(ParameterId(0, "a", 0), 1.0)],
             1: [(ParameterId(1, "b", 1), 2.0), (ParameterId(1, "c", 2), 0.5)]}
    net = InstantTransport()
    rank_top_k_distributed(local, {0: [1], 1: []}, root=0, k=10, transport=net)
    assert net.bytes_sent == {(1, 0): 24 + 24 * 2}


def test_predict_is_linear(rng):
    a = rng.normal(size=(20, 4))
    x1 = rng.normal(size=4)
    x2 = rng.normal(size=4)
    lhs = predict(a, x1 + x2)
    rhs = predict(a, x1) + predict(a, x2)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_zero_weights_rmse_is_target_spread(rng):
    b = rng.normal(size=500)
    b -= b.mean()
    rmse = fit_rmse(np.zeros(500), b)
    assert rmse == pytest.approx(float(b.std()), rel=1e-12)


def test_exact_fit_has_tiny_rmse(rng):
    a = rng.normal(size=(40, 5))
    x = rng.normal(size=5)
    b = a @ x
    assert fit_rmse(predict(a, x), b) <= 1e-8


def test_what_if_zero_delta_is_plain_prediction(rng):
    a = rng.normal(size=(15, 3))
    x = rng.normal(size=3)
    _, b_hat = what_if(a, x, 1, delta=0.0)
    np.testing.assert_allclose(b_hat, predict(a, x), rtol=0, atol=1e-12)


def test_what_if_single_column_scales_output(rng):
    a = rng.normal(size=(10, 1))
    x = np.array([1.5])
    x_hat, b_hat = what_if(a, x, 0, delta=0.2)
    assert x_hat[0] == pytest.approx(1.8)
    np.testing.assert_allclose(b_hat, 1.2 * (a @ x), rtol=0, atol=1e-12)


def test_what_if_reports_raw_target_units(rng):
    a = rng.normal(size=(10, 2))
    x = rng.normal(size=2)
    _, b_hat = what_if(a, x, 0, delta=0.0, target_mean=5.0, target_scale=2.0)
    np.testing.assert_allclose(b_hat, 2.0 * predict(a, x) + 5.0,
                               rtol=0, atol=1e-12)


def test_positive_target_scaling_keeps_ranking_order(rng):
    a = rng.normal(size=(60, 6))
    b = rng.normal(size=60)
    params = [pid(i) for i in range(6)]
    x1 = ols(a, b)
    x2 = ols(a, 7.5 * b)
    np.testing.assert_allclose(x2, 7.5 * x1, rtol=1e-9, atol=1e-12)
    order1 = [e[0].global_index for e in rank_top_k(x1, params)]
    order2 = [e[0].global_index for e in rank_top_k(x2, params)]
    assert order1 == order2


def test_report_serialization_round_trip(rng):
    a = rng.normal(size=(12, 3))
    b = rng.normal(size=12)
    params = [pid(i, name=f"metric_{i}") for i in range(3)]
    report = build_report(a, b, ols(a, b), params, k=2)
    data = json.loads(report.to_json())
    assert len(data["ranking"]) == 2
    assert data["ranking"][0]["magnitude"] >= data["ranking"][1]["magnitude"]
    assert data["fit_rmse"] == pytest.approx(report.fit_rmse)
    table = report.format_table()
    assert "metric_" in table
    assert table.splitlines()[2].startswith("   1")


def test_prediction_csv_layout():
    report = RootCauseReport(
        weights=np.array([1.0]),
        ranking=[(pid(0), 1.0, 1.0)],
        predicted=np.array([0.5, 1.5]),
        actual=np.array([1.0, 2.0]),
        fit_rmse=0.5,
        solver_provenance=SolveProvenance(),
    )
    buf = io.StringIO()
    dump_prediction_csv(report, buf)
    assert buf.getvalue().splitlines() == [
        "row,actual,predicted",
        "0,1.0,0.5",
        "1,2.0,1.5",
    ]
