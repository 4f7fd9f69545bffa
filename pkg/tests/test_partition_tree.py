import math

import numpy as np
import pytest

from pmtree import _kernels
from pmtree.algebra import ALL_ALGEBRAS, LogSumAdd, SumMul
from pmtree.oracle import DenseState, naive_query
from pmtree.partition_tree import (
    LeafCrossed,
    build_from_hierarchy,
    build_kd_tree,
    build_segment_tree,
    range_query,
    range_update,
    visit_count,
)
from pmtree.set_system import (
    Box,
    Interval,
    build_grid_system,
    build_interval_system,
)


def _dense_mirror(system, algebra, n):
    rows = np.vstack([algebra.sample_value(np.random.default_rng(1000 + x)) for x in range(n)])
    return DenseState(rows.copy(), system), rows


def _leaf_apply(algebra, ds, mask, s):
    for x in np.flatnonzero(mask):
        ds.w[x] = algebra.apply_update(s, ds.w[x])


def test_segment_tree_shape_and_visits():
    sys16 = build_interval_system(16)
    tree = build_segment_tree(sys16, SumMul(), init=np.ones(16))
    assert tree.num_nodes == 31
    out = range_query(tree, Interval(5, 13))
    assert out[0] == pytest.approx(9.0)
    # [5,13] splits into blocks [5], [6,7], [8,11], [12,13]; the walk reaches
    # them through six overlapping internal nodes and prunes everything else
    assert tree.last_op_visits == 10
    stats = visit_count(tree)
    assert stats["last"] == 10 and stats["total"] >= 10


def test_kd_tree_shape():
    grid = build_grid_system(4, 2)
    tree = build_kd_tree(grid, SumMul(), init=np.ones(16))
    assert tree.num_nodes == 31
    out = range_query(tree, Box([0, 0], [3, 3]))
    assert out[0] == pytest.approx(16.0)


def test_update_and_query_visit_same_nodes_on_intervals():
    sys1k = build_interval_system(1024)
    tree = build_segment_tree(sys1k, SumMul(), init=np.ones(1024))
    rng = np.random.default_rng(5)
    for _ in range(50):
        lo = int(rng.integers(0, 1024))
        hi = int(rng.integers(lo, 1024))
        range_query(tree, Interval(lo, hi))
        q = tree.last_op_visits
        range_update(tree, Interval(lo, hi), np.array([1.25]))
        assert tree.last_op_visits == q
        assert q <= 4 * 10 + 2


@pytest.mark.parametrize("algebra", ALL_ALGEBRAS, ids=lambda a: a.name)
def test_segment_tree_matches_dense(algebra):
    n = 64
    system = build_interval_system(n)
    ds, rows = _dense_mirror(system, algebra, n)
    tree = build_segment_tree(system, algebra, init=rows)
    rng = np.random.default_rng(7)
    for _ in range(120):
        lo = int(rng.integers(0, n))
        hi = int(rng.integers(lo, n))
        e = Interval(lo, hi)
        if rng.random() < 0.5:
            s = algebra.sample_update(rng)
            range_update(tree, e, s)
            mask = np.zeros(n, dtype=bool)
            mask[lo : hi + 1] = True
            _leaf_apply(algebra, ds, mask, s)
        else:
            got = range_query(tree, e)
            want = naive_query(ds, e, algebra)
            np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("algebra", ALL_ALGEBRAS, ids=lambda a: a.name)
def test_kd_tree_matches_dense(algebra):
    m = 8
    grid = build_grid_system(m, 2)
    n = grid.n
    ds, rows = _dense_mirror(grid, algebra, n)
    tree = build_kd_tree(grid, algebra, init=rows)
    rng = np.random.default_rng(9)
    from pmtree.oracle import event_mask

    for _ in range(80):
        a = rng.integers(0, m, 2)
        b = rng.integers(0, m, 2)
        e = Box(np.minimum(a, b), np.maximum(a, b))
        if rng.random() < 0.5:
            s = algebra.sample_update(rng)
            range_update(tree, e, s)
            _leaf_apply(algebra, ds, event_mask(grid, e), s)
        else:
            got = range_query(tree, e)
            want = naive_query(ds, e, algebra)
            np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_hierarchy_tree_matches_dense_and_respects_chains():
    n = 16
    system = build_interval_system(n)
    levels = [
        [np.arange(0, 8), np.arange(8, 16)],
        [np.arange(i, i + 4) for i in range(0, 16, 4)],
        [np.array([i]) for i in range(16)],
    ]
    algebra = LogSumAdd()
    ds, rows = _dense_mirror(system, algebra, n)
    tree = build_from_hierarchy(system, algebra, levels, init=rows)
    rng = np.random.default_rng(13)
    for _ in range(60):
        lo = int(rng.integers(0, n))
        hi = int(rng.integers(lo, n))
        e = Interval(lo, hi)
        if rng.random() < 0.5:
            s = algebra.sample_update(rng)
            range_update(tree, e, s)
            mask = np.zeros(n, dtype=bool)
            mask[lo : hi + 1] = True
            _leaf_apply(algebra, ds, mask, s)
        else:
            np.testing.assert_allclose(
                range_query(tree, e), naive_query(ds, e, algebra), rtol=1e-9
            )


def test_block_leaves_raise_on_cut_events():
    n = 8
    system = build_interval_system(n)
    levels = [[np.arange(i, i + 2) for i in range(0, 8, 2)]]
    tree = build_from_hierarchy(system, SumMul(), levels, init=np.ones(8))
    out = range_query(tree, Interval(2, 5))  # aligned: fine
    assert out[0] == pytest.approx(4.0)
    with pytest.raises(LeafCrossed):
        range_query(tree, Interval(1, 4))
    with pytest.raises(LeafCrossed):
        range_update(tree, Interval(0, 2), np.array([2.0]))
    # the failed update must not have moved anything
    assert range_query(tree, Interval(0, 7))[0] == pytest.approx(8.0)


def test_update_inverse_round_trip():
    n = 128
    system = build_interval_system(n)
    algebra = LogSumAdd()
    tree = build_segment_tree(system, algebra, init=np.zeros(n))
    before = range_query(tree, Interval(0, n - 1))[0]
    range_update(tree, Interval(10, 90), np.array([0.8]))
    range_update(tree, Interval(10, 90), np.array([-0.8]))
    after = range_query(tree, Interval(0, n - 1))[0]
    assert after == pytest.approx(before, abs=1e-12)


def test_root_aggregate_always_current():
    n = 256
    system = build_interval_system(n)
    tree = build_segment_tree(system, SumMul(), init=np.ones(n))
    rng = np.random.default_rng(3)
    total = float(n)
    for _ in range(40):
        lo = int(rng.integers(0, n))
        hi = int(rng.integers(lo, n))
        f = float(np.exp(rng.uniform(-0.5, 0.5)))
        seg = range_query(tree, Interval(lo, hi))[0]
        range_update(tree, Interval(lo, hi), np.array([f]))
        total += (f - 1.0) * seg
        assert float(tree.vals[0, 0]) == pytest.approx(total, rel=1e-9)


@pytest.mark.skipif(not _kernels.HAS_NUMBA, reason="compiled path unavailable")
def test_python_walker_matches_kernels():
    n = 512
    system = build_interval_system(n)
    rng = np.random.default_rng(21)
    ops = []
    for _ in range(60):
        lo = int(rng.integers(0, n))
        hi = int(rng.integers(lo, n))
        ops.append((lo, hi, float(rng.normal(0, 0.3))))

    def run():
        tree = build_segment_tree(system, LogSumAdd(), init=np.zeros(n))
        out = []
        for lo, hi, s in ops:
            range_update(tree, Interval(lo, hi), np.array([s]))
            out.append((range_query(tree, Interval(lo, hi))[0], tree.last_op_visits))
        return out

    fast = run()
    saved = _kernels.HAS_NUMBA
    _kernels.HAS_NUMBA = False
    try:
        slow = run()
    finally:
        _kernels.HAS_NUMBA = saved
    for (va, ca), (vb, cb) in zip(fast, slow):
        assert va == pytest.approx(vb, rel=1e-12, abs=1e-12)
        assert ca == cb
