import numpy as np
import pytest

from pmtree.msr_markets import (
    MARKET_TYPES,
    LmsrMarket,
    NegativeDiscriminant,
    PowerMarket,
    QmsrMarket,
    _power_potential,
)
from pmtree.oracle import (
    DenseState,
    event_mask,
    naive_lmsr_cost,
    naive_lmsr_price,
    naive_qmsr_cost,
    naive_qmsr_price,
    numeric_power_cost,
    numeric_power_price,
)
from pmtree.set_system import Explicit, Interval, build_interval_system

SYS4 = build_interval_system(4)
X0 = Interval(0, 0)
X01 = Interval(0, 1)


# ---------------------------------------------------------------------------
# pinned values, n=4, b=1, empty book


def test_lmsr_fresh_book():
    mkt = LmsrMarket.from_system(SYS4, 1.0)
    assert mkt.price(Interval(0, 3)) == pytest.approx(1.0)
    assert mkt.price(X0) == pytest.approx(0.25)
    assert mkt.price(X01) == pytest.approx(0.5)
    # buying the whole space never moves prices and costs exactly s
    assert mkt.buy(Interval(0, 3), 0.7) == pytest.approx(0.7, abs=1e-12)
    assert mkt.price(X0) == pytest.approx(0.25)


def test_lmsr_single_buy_pinned():
    mkt = LmsrMarket.from_system(SYS4, 1.0)
    assert mkt.buy(X0, 1.0) == pytest.approx(0.35737401950878867, abs=1e-15)
    assert mkt.price(X0) == pytest.approx(0.4753668864186717, abs=1e-15)


def test_lmsr_range_buy_pinned():
    mkt = LmsrMarket.from_system(SYS4, 1.0)
    mkt.buy(X01, 0.5)
    assert mkt.price(X0) == pytest.approx(0.31122966560092735, abs=1e-15)


def test_qmsr_pinned():
    mkt = QmsrMarket.from_system(SYS4, 1.0)
    assert mkt.cost(X0, 1.0) == pytest.approx(0.4375, abs=1e-15)
    assert mkt.buy(X0, 1.0) == pytest.approx(0.4375, abs=1e-15)
    assert mkt.price(X0) == pytest.approx(0.625, abs=1e-15)
    mkt2 = QmsrMarket.from_system(SYS4, 1.0)
    mkt2.buy(X01, 2.0)
    assert mkt2.M == pytest.approx(4.0)


def test_power_fresh_book():
    mkt = PowerMarket.from_system(SYS4, 1.0)
    assert _power_potential(mkt.M, mkt.b) == pytest.approx(-0.5, abs=1e-12)
    for x in range(4):
        assert mkt.price(Interval(x, x)) == pytest.approx(0.25, abs=1e-12)
    sol = numeric_power_cost(DenseState(np.zeros(4), SYS4), 1.0)
    assert sol.cost == pytest.approx(-0.5, abs=1e-8)
    assert not sol.boundary
    np.testing.assert_allclose(sol.prices, 0.25, atol=1e-9)


def test_power_full_space_buy_is_translation():
    mkt = PowerMarket.from_system(SYS4, 1.0)
    paid = mkt.buy(Interval(0, 3), 0.3)
    assert paid == pytest.approx(0.3, abs=1e-10)
    assert mkt.price(X01) == pytest.approx(0.5, abs=1e-10)


# ---------------------------------------------------------------------------
# engine vs brute force on random books


def _random_session(kind, n, b, steps, seed):
    rng = np.random.default_rng(seed)
    system = build_interval_system(n)
    mkt = MARKET_TYPES[kind].from_system(system, b)
    ds = DenseState(np.zeros(n), system)
    for _ in range(steps):
        lo = int(rng.integers(0, n))
        hi = int(rng.integers(lo, n))
        e = Interval(lo, hi)
        s = float(rng.normal(0, 0.2))
        op = rng.integers(0, 3)
        if kind == "lmsr":
            want_p, want_c = naive_lmsr_price(ds, e, b), naive_lmsr_cost(ds, e, b, s)
        elif kind == "qmsr":
            want_p, want_c = naive_qmsr_price(ds, e, b), naive_qmsr_cost(ds, e, b, s)
        else:
            # the closed form only holds while every price stays positive,
            # so only commit trades that keep the optimum interior
            want_p = numeric_power_price(ds, e, b)
            shifted = ds.w.copy()
            shifted[event_mask(system, e)] += s
            if numeric_power_cost(shifted, b).boundary:
                continue
            want_c = (
                numeric_power_cost(shifted, b).cost
                - numeric_power_cost(ds.w, b).cost
            )
        if op == 0:
            assert mkt.price(e) == pytest.approx(want_p, rel=1e-7, abs=1e-7)
        elif op == 1:
            assert mkt.cost(e, s) == pytest.approx(want_c, rel=1e-7, abs=1e-9)
        else:
            paid = mkt.buy(e, s)
            ds.w[event_mask(system, e)] += s
            assert paid == pytest.approx(want_c, rel=1e-7, abs=1e-9)


@pytest.mark.parametrize("kind", ["lmsr", "qmsr", "power"])
def test_random_books_match_oracle(kind):
    _random_session(kind, 16, 1.0, 40, seed=17)
    _random_session(kind, 16, 0.5, 40, seed=18)


def test_power_cost_matches_numeric_oracle():
    from conftest import interior_power_weights

    rng = np.random.default_rng(23)
    system = build_interval_system(8)
    for b in (0.5, 1.0, 2.0):
        w = interior_power_weights(rng, 8, b)
        mkt = PowerMarket.from_system(system, b, w0=w)
        sol = numeric_power_cost(DenseState(w.copy(), system), b)
        assert _power_potential(mkt.M, b) == pytest.approx(sol.cost, abs=1e-8)
        for x in range(8):
            assert mkt.price(Interval(x, x)) == pytest.approx(
                sol.prices[x], abs=1e-7
            )


# ---------------------------------------------------------------------------
# mirrors, failure paths, bookkeeping


def test_root_mirrors_stay_in_sync():
    rng = np.random.default_rng(29)
    system = build_interval_system(32)
    lm = LmsrMarket.from_system(system, 1.3)
    qm = QmsrMarket.from_system(system, 1.3)
    for _ in range(25):
        lo = int(rng.integers(0, 32))
        hi = int(rng.integers(lo, 32))
        s = float(rng.normal(0, 0.4))
        lm.buy(Interval(lo, hi), s)
        qm.buy(Interval(lo, hi), s)
        assert lm.logM == pytest.approx(float(lm.tree.vals[0, 0]), abs=1e-12)
        assert qm.M == pytest.approx(float(qm.tree.vals[0, 1]), rel=1e-12, abs=1e-12)


def test_power_rejects_exterior_state():
    mkt = PowerMarket.from_system(SYS4, 1.0)
    with pytest.raises(NegativeDiscriminant):
        mkt.cost(X0, 50.0)
    before = mkt.M.copy()
    with pytest.raises(NegativeDiscriminant):
        mkt.buy(X0, 50.0)
    # the rejected buy must leave the book untouched
    np.testing.assert_allclose(mkt.M, before)
    assert mkt.price(X0) == pytest.approx(0.25, abs=1e-12)


def test_liquidity_must_be_positive():
    with pytest.raises(ValueError):
        LmsrMarket.from_system(SYS4, 0.0)
    with pytest.raises(ValueError):
        QmsrMarket.from_system(SYS4, -2.0)


def test_explicit_events_work():
    system = build_interval_system(8)
    mkt = LmsrMarket.from_system(system, 1.0)
    scattered = Explicit([0, 3, 6])
    assert mkt.price(scattered) == pytest.approx(3.0 / 8.0)
    mkt.buy(scattered, 0.25)
    ds = DenseState(np.zeros(8), system)
    ds.w[[0, 3, 6]] += 0.25
    assert mkt.price(scattered) == pytest.approx(
        naive_lmsr_price(ds, scattered, 1.0), rel=1e-12
    )


def test_op_visits_within_query_budget():
    system = build_interval_system(4096)
    # the power rule needs b ~ sqrt(n) here or a broad buy exits its
    # interior validity region (allowed inventory variance is ~b^2/n)
    liquidity = {"lmsr": 1.0, "qmsr": 1.0, "power": 64.0}
    for kind in MARKET_TYPES:
        mkt = MARKET_TYPES[kind].from_system(system, liquidity[kind])
        e = Interval(100, 3000)
        mkt.price(e)
        base = mkt.tree.last_op_visits
        mkt.price(e)
        assert mkt.last_op_visits <= 4 * base
        mkt.cost(e, 0.1)
        assert mkt.last_op_visits <= 4 * base
        mkt.buy(e, 0.1)
        assert mkt.last_op_visits <= 4 * base


def test_tree_kinds_agree():
    from pmtree.set_system import Box, build_grid_system

    grid = build_grid_system(4, 2)
    flat = build_interval_system(16)
    for kind in MARKET_TYPES:
        seg = MARKET_TYPES[kind].from_system(flat, 1.0)
        kd = MARKET_TYPES[kind].from_system(grid, 1.0, tree_kind="kd")
        # same 6 cells, written as a row in the grid / a run in the line
        box = Box([1, 0], [1, 3])
        run = Interval(4, 7)
        paid_seg = seg.buy(run, 0.4)
        paid_kd = kd.buy(box, 0.4)
        assert paid_kd == pytest.approx(paid_seg, rel=1e-12)
        assert kd.price(box) == pytest.approx(seg.price(run), rel=1e-12)
