import io

import numpy as np
import pytest

from overmon.collector import (
    DuplicateName,
    LengthMismatch,
    MetricRegistry,
    MetricWindow,
    ParameterId,
    ResourceKind,
    dump_window_csv,
    filter_constant,
    merge_registry,
)


def make_registry(node, names, kind=ResourceKind.NONE):
    reg = MetricRegistry(node)
    for nm in names:
        reg.register(nm, kind)
    return reg


def test_window_returns_rows_in_order():
    w = MetricWindow(4, 1.0, 2)
    for i in range(3):
        w.record_tick([float(i), float(10 + i)])
    m = w.window_matrix()
    np.testing.assert_array_equal(m, [[0, 10], [1, 11], [2, 12]])
    np.testing.assert_array_equal(w.row_ticks(), [0, 1, 2])


def test_window_evicts_oldest_when_full():
    w = MetricWindow(3, 1.0, 1)
    for i in range(4):
        w.record_tick([float(i)])
    np.testing.assert_array_equal(w.window_matrix(), [[1], [2], [3]])
    np.testing.assert_array_equal(w.row_ticks(), [1, 2, 3])
    assert w.tick == 4
    assert w.filled == 3


def test_record_rejects_wrong_length():
    w = MetricWindow(3, 1.0, 2)
    with pytest.raises(LengthMismatch):
        w.record_tick([1.0])


def test_registry_rejects_duplicate_names():
    reg = MetricRegistry(0)
    reg.register("queue_depth")
    with pytest.raises(DuplicateName):
        reg.register("queue_depth")


def test_registry_samples_gauges_in_order():
    reg = MetricRegistry(1)
    reg.register("a", gauge=lambda: 1.0)
    reg.register("b", gauge=lambda: 2.5)
    w = reg.make_window(5, 1.0)
    reg.sample_tick(w)
    np.testing.assert_array_equal(w.window_matrix(), [[1.0, 2.5]])
    assert [p.name for p in w.params] == ["a", "b"]


def test_filter_drops_constant_columns(rng):
    reg = make_registry(0, ["flat", "noisy", "zero"])
    w = reg.make_window(20, 1.0)
    for _ in range(20):
        w.record_tick([7.0, rng.normal(), 0.0])
    kept, dropped = filter_constant(w)
    assert [p.name for p in kept] == ["noisy"]
    assert [p.name for p in dropped] == ["flat", "zero"]
    # Kept columns are renumbered densely; dropped keep original slots.
    assert kept[0].global_index == 0
    assert [p.global_index for p in dropped] == [0, 2]


def test_filter_keeps_single_outlier_column():
    reg = make_registry(0, ["spike"])
    w = reg.make_window(10, 1.0)
    for i in range(10):
        w.record_tick([1.0 if i == 4 else 0.0])
    kept, dropped = filter_constant(w)
    assert [p.name for p in kept] == ["spike"]
    assert dropped == []


def test_filter_threshold_is_scale_free():
    # Tiny but genuine wiggle on a huge baseline must survive.
    reg = make_registry(0, ["huge"])
    w = reg.make_window(8, 1.0)
    for i in range(8):
        w.record_tick([1e12 + (i % 2) * 1e-3])
    kept, _ = filter_constant(w)
    assert [p.name for p in kept] == ["huge"]


def test_filter_is_idempotent(rng):
    reg = make_registry(0, ["a", "b", "c", "d"])
    w = reg.make_window(15, 1.0)
    for _ in range(15):
        w.record_tick([rng.normal(), 3.0, rng.normal(), 3.0])
    kept, _ = filter_constant(w)
    survivors = [reg.local_index(p.name) for p in kept]
    m = w.window_matrix()[:, survivors]
    w2 = MetricWindow(15, 1.0, len(kept), tuple(kept))
    for row in m:
        w2.record_tick(row)
    kept2, dropped2 = filter_constant(w2)
    assert kept2 == kept
    assert dropped2 == []


def test_merge_two_nodes_yields_dense_global_index():
    a = [ParameterId(0, f"t{i}", i) for i in range(23)]
    b = [ParameterId(1, f"r{i}", i) for i in range(22)]
    merged = merge_registry({0: a, 1: b})
    assert len(merged) == 45
    assert [p.global_index for p in merged] == list(range(45))
    assert all(p.node == 0 for p in merged[:23])
    assert all(p.node == 1 for p in merged[23:])
    assert merged[23].name == "r0"


def test_merge_is_order_independent():
    a = [ParameterId(0, "x", 0), ParameterId(0, "y", 1)]
    b = [ParameterId(2, "x", 0)]
    assert merge_registry({2: b, 0: a}) == merge_registry({0: a, 2: b})


def test_merge_single_node_is_identity():
    ids = [ParameterId(3, "m", 0, ResourceKind.MEMORY), ParameterId(3, "n", 1)]
    assert merge_registry({3: ids}) == ids


def test_merge_rejects_duplicate_name_within_node():
    ids = [ParameterId(0, "x", 0), ParameterId(0, "x", 1)]
    with pytest.raises(DuplicateName):
        merge_registry({0: ids})


def test_csv_dump_round_trip():
    reg = make_registry(0, ["a", "b"])
    w = reg.make_window(3, 1.0)
    w.record_tick([1.0, 2.0])
    w.record_tick([3.0, 4.5])
    buf = io.StringIO()
    dump_window_csv(w, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "tick,a,b"
    assert lines[1] == "0,1.0,2.0"
    assert lines[2] == "1,3.0,4.5"
