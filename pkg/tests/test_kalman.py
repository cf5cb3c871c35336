import numpy as np
import pytest

from overmon.collector import MetricWindow, ParameterId
from overmon.kalman import (
    DimensionMismatch,
    KalmanState,
    MisalignedWindows,
    SingularInnovation,
    StateSpaceModel,
    joint_covariance_rows,
    predict,
    smooth_columns,
    smooth_series,
    update,
)
from overmon.linalg import empirical_covariance
from overmon.transport import InstantTransport

from conftest import make_spd


def scalar_reference(series, sigma2):
    """Textbook scalar recursion, written out step by step."""
    xs = [float(series[0])]
    ps = [float(sigma2)]
    x_hat, p = xs[0], ps[0]
    for z in series[1:]:
        x_minus = 1.0 * x_hat
        p_minus = 1.0 * p * 1.0 + sigma2
        gain = (p_minus * 1.0) / (1.0 * p_minus * 1.0 + sigma2)
        x_hat = x_minus + gain * (z - 1.0 * x_minus)
        p = (1.0 - gain * 1.0) * p_minus
        xs.append(x_hat)
        ps.append(p)
    return np.array(xs), np.array(ps)


def test_predict_identity_no_noise_is_identity():
    model = StateSpaceModel.build(np.eye(2), np.eye(2), np.zeros((2, 2)),
                                  np.eye(2))
    state = KalmanState.build([1.0, -2.0], [[2.0, 0.5], [0.5, 1.0]])
    prior = predict(state, model)
    np.testing.assert_array_equal(prior.x_hat, state.x_hat)
    np.testing.assert_array_equal(prior.p, state.p)


def test_predict_zero_transition_gives_process_noise():
    q = np.diag([0.3, 0.7])
    model = StateSpaceModel.build(np.zeros((2, 2)), np.eye(2), q, np.eye(2))
    prior = predict(KalmanState.build([5.0, 5.0], np.eye(2)), model)
    np.testing.assert_array_equal(prior.x_hat, [0.0, 0.0])
    np.testing.assert_array_equal(prior.p, q)


def test_predict_scalar_frozen_example():
    model = StateSpaceModel.build([[2.0]], [[1.0]], [[0.5]], [[1.0]])
    prior = predict(KalmanState.build([1.0], [[1.0]]), model)
    assert prior.x_hat[0] == pytest.approx(2.0)
    assert prior.p[0, 0] == pytest.approx(4.5)


def test_update_scalar_frozen_example():
    model = StateSpaceModel.build([[1.0]], [[1.0]], [[0.0]], [[1.0]])
    prior = KalmanState.build([0.0], [[1.0]])
    state, trace = update(prior, [2.0], model)
    assert trace.gain[0, 0] == pytest.approx(0.5)
    assert state.x_hat[0] == pytest.approx(1.0)
    assert state.p[0, 0] == pytest.approx(0.5)
    assert trace.innovation[0] == pytest.approx(2.0)


def test_update_huge_noise_ignores_measurement(rng):
    p0 = make_spd(3, rng)
    model = StateSpaceModel.build(np.eye(3), np.eye(3), np.zeros((3, 3)),
                                  1e12 * np.eye(3))
    prior = KalmanState.build(rng.normal(size=3), p0)
    state, trace = update(prior, rng.normal(size=3), model)
    np.testing.assert_allclose(state.x_hat, prior.x_hat, rtol=0, atol=1e-6)
    np.testing.assert_allclose(trace.gain, 0.0, atol=1e-6)


def test_update_zero_noise_trusts_measurement(rng):
    p0 = make_spd(3, rng)
    model = StateSpaceModel.build(np.eye(3), np.eye(3), np.zeros((3, 3)),
                                  np.zeros((3, 3)))
    z = rng.normal(size=3)
    state, _ = update(KalmanState.build(rng.normal(size=3), p0), z, model)
    np.testing.assert_allclose(state.x_hat, z, rtol=0, atol=1e-9)
    np.testing.assert_allclose(state.p, 0.0, atol=1e-9)


def test_update_gabp_matches_direct(rng):
    p0 = make_spd(6, rng)
    model = StateSpaceModel.random_walk(6)
    prior = predict(KalmanState.build(rng.normal(size=6), p0), model)
    z = rng.normal(size=6)
    direct, _ = update(prior, z, model, solver="direct")
    via_bp, _ = update(prior, z, model, solver="gabp")
    np.testing.assert_allclose(via_bp.x_hat, direct.x_hat, rtol=0, atol=1e-6)
    np.testing.assert_allclose(via_bp.p, direct.p, rtol=0, atol=1e-6)


def test_update_degenerate_innovation_raises():
    model = StateSpaceModel.build(np.eye(2), np.eye(2), np.zeros((2, 2)),
                                  np.zeros((2, 2)))
    prior = KalmanState.build([0.0, 0.0], np.zeros((2, 2)))
    for solver in ("direct", "gabp"):
        with pytest.raises(SingularInnovation):
            update(prior, [1.0, 1.0], model, solver=solver)


def test_covariance_stays_exactly_symmetric(rng):
    model = StateSpaceModel.random_walk(4)
    state = KalmanState.build(rng.normal(size=4), make_spd(4, rng))
    for _ in range(5):
        state = predict(state, model)
        assert np.array_equal(state.p, state.p.T)
        state, _ = update(state, rng.normal(size=4), model)
        assert np.array_equal(state.p, state.p.T)
        assert bool(np.all(state.p.diagonal() >= -1e-9))
    assert state.k == 5


def test_dimension_mismatches_rejected():
    with pytest.raises(DimensionMismatch):
        StateSpaceModel.build(np.eye(2), np.eye(3), np.eye(2), np.eye(3))
    model = StateSpaceModel.random_walk(2)
    with pytest.raises(DimensionMismatch):
        predict(KalmanState.build([1.0, 2.0, 3.0], np.eye(3)), model)
    with pytest.raises(DimensionMismatch):
        update(KalmanState.build([1.0, 2.0], np.eye(2)), [1.0], model)


def test_smooth_constant_series_is_flat():
    means, variances = smooth_series(np.full(50, 3.25))
    np.testing.assert_allclose(means, 3.25, rtol=0, atol=1e-9)
    assert bool(np.all(variances > 0))
    assert bool(np.all(np.diff(variances) <= 0))


def test_smooth_step_input_rises_monotonically():
    series = np.concatenate([np.zeros(20), np.ones(20)])
    means, _ = smooth_series(series)
    after = means[20:]
    assert bool(np.all(np.diff(after) > 0))
    assert bool(np.all(after < 1.0))
    assert after[-1] > 0.9


def test_smooth_matches_reference_recursion(rng):
    for _ in range(50):
        series = rng.normal(size=rng.integers(2, 120))
        means, variances = smooth_series(series)
        ref_m, ref_p = scalar_reference(series, 0.01)
        np.testing.assert_allclose(means, ref_m, rtol=0, atol=1e-12)
        np.testing.assert_allclose(variances, ref_p, rtol=0, atol=1e-12)


def test_smooth_agrees_with_matrix_form_filter(rng):
    series = rng.normal(size=40)
    means, variances = smooth_series(series)
    model = StateSpaceModel.random_walk(1)
    state = KalmanState.build([series[0]], [[0.01]])
    for i in range(1, 40):
        state, _ = update(predict(state, model), [series[i]], model)
        assert state.x_hat[0] == pytest.approx(means[i], abs=1e-12)
        assert state.p[0, 0] == pytest.approx(variances[i], abs=1e-12)


def _two_node_windows(rng, n=30):
    w0 = MetricWindow(n, 1.0, 3, (
        ParameterId(0, "tx_queue", 0),
        ParameterId(0, "tx_pool", 1),
        ParameterId(0, "tx_rate", 2),
    ))
    w1 = MetricWindow(n, 1.0, 2, (
        ParameterId(1, "rx_rate", 3),
        ParameterId(1, "rx_lat", 4),
    ))
    base = rng.normal(size=n)
    for i in range(n):
        w0.record_tick([base[i] + 0.1 * rng.normal(),
                        2 * base[i] + 0.1 * rng.normal(),
                        rng.normal()])
        w1.record_tick([base[i] + 0.1 * rng.normal(), rng.normal()])
    return {0: w0, 1: w1}


def test_joint_rows_match_central_covariance(rng):
    windows = _two_node_windows(rng)
    target = ParameterId(1, "rx_lat", 4)
    rows = joint_covariance_rows(windows, [target])
    raw = np.hstack([windows[0].window_matrix(), windows[1].window_matrix()])
    smoothed = smooth_columns(raw)
    central = empirical_covariance(smoothed - smoothed.mean(axis=0))
    np.testing.assert_allclose(rows[0], central[4], rtol=0, atol=1e-9)


def test_joint_row_diagonal_entry_is_target_variance(rng):
    windows = _two_node_windows(rng)
    target = ParameterId(0, "tx_pool", 1)
    rows = joint_covariance_rows(windows, [target])
    smoothed = smooth_columns(windows[0].window_matrix())
    col = smoothed[:, 1]
    var = float(((col - col.mean()) ** 2).sum() / (len(col) - 1))
    assert rows[0, 1] == pytest.approx(var, abs=1e-9)


def test_joint_rows_duplicate_parameter_matches(rng):
    n = 25
    series = rng.normal(size=n)
    other = rng.normal(size=n)
    w0 = MetricWindow(n, 1.0, 2, (ParameterId(0, "dup", 0),
                                  ParameterId(0, "t", 1)))
    w1 = MetricWindow(n, 1.0, 1, (ParameterId(1, "dup", 2),))
    for i in range(n):
        w0.record_tick([series[i], other[i]])
        w1.record_tick([series[i]])
    rows = joint_covariance_rows({0: w0, 1: w1}, [ParameterId(0, "t", 1)])
    assert rows[0, 0] == pytest.approx(rows[0, 2], abs=1e-12)


def test_joint_rows_byte_accounting(rng):
    windows = _two_node_windows(rng, n=30)
    net = InstantTransport()
    joint_covariance_rows(windows, [ParameterId(0, "tx_rate", 2)], transport=net)
    # Owner 0 ships 30 reals to node 1; node 1 answers with its 2-entry slice.
    assert net.bytes_sent == {(0, 1): 8 * 30 + 24, (1, 0): 8 * 2 + 24}


def test_joint_rows_misaligned_windows_rejected(rng):
    windows = _two_node_windows(rng)
    windows[1].record_tick([0.0, 0.0])
    with pytest.raises(MisalignedWindows):
        joint_covariance_rows(windows, [ParameterId(0, "tx_queue", 0)])
