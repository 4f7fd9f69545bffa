import math

import numpy as np
import pytest

from pmtree.cfmm import (
    CfmmState,
    MAX_BISECT,
    NegativeInput,
    NoFeasibleScale,
    linear_cfmm,
    linear_phi_after,
    log_cfmm,
    log_phi_after,
    phi,
    trade_backward,
    trade_forward,
    _linear_scale_by_search,
)
from pmtree.oracle import naive_phi_linear, naive_phi_log
from pmtree.set_system import Explicit, Interval, build_interval_system

SYS4 = build_interval_system(4)
SYS256 = build_interval_system(256)


def _dense_w(st):
    """Reserve vector recovered from the tree, for oracle comparisons."""
    return st.w.copy()


def test_log_invariant_fresh():
    st = log_cfmm(SYS4)
    assert phi(st) == pytest.approx(-4.0, abs=1e-12)
    assert phi(st) == pytest.approx(naive_phi_log(np.zeros(4), 1.0), abs=1e-12)


def test_linear_invariant_fresh():
    st = linear_cfmm(SYS4, w0=np.ones(4))
    assert phi(st) == pytest.approx(4.0, abs=1e-12)
    assert phi(st) == pytest.approx(naive_phi_linear(np.ones(4), np.ones(4)), abs=1e-12)


def test_log_swap_pinned():
    # empty book, tender ln(2) on one outcome: the pool's exposure there
    # halves, so the other leg must grow by ln(3/2) to hold the level
    st = log_cfmm(build_interval_system(2), b=1.0)
    got = trade_forward(st, Interval(1, 1), Interval(0, 0), math.log(2.0))
    assert got == pytest.approx(math.log(1.5), abs=1e-10)
    # the invariant level is preserved by the trade
    assert phi(st) == pytest.approx(-2.0, rel=1e-9)
    assert phi(st) == pytest.approx(naive_phi_log(_dense_w(st), 1.0), rel=1e-12)


def test_log_bundle_swap_matches_hand_solution():
    # tender 1 unit of the pair {0, 1}; the single-outcome leg satisfies
    # e^s = 3 - 2/e at the preserved level (tolerance from the search's
    # level-matching stop: 1e-10 relative on phi = -3)
    st = log_cfmm(build_interval_system(3), b=1.0)
    got = trade_forward(st, Interval(2, 2), Interval(0, 1), 1.0)
    assert got == pytest.approx(math.log(3.0 - 2.0 / math.e), abs=1e-9)
    assert phi(st) == pytest.approx(-3.0, rel=1e-9)


def test_linear_closed_form_and_conservation():
    st = linear_cfmm(build_interval_system(4), c=np.ones(4), w0=np.ones(4))
    got = trade_forward(st, Interval(3, 3), Interval(0, 0), 3.0)
    assert got == pytest.approx(3.0, abs=1e-12)  # unit prices: value in == value out
    assert phi(st) == pytest.approx(4.0, abs=1e-12)
    np.testing.assert_allclose(st.w, [4.0, 1.0, 1.0, -2.0])
    # a 3-asset bundle carries 3x the value of a single asset
    st2 = linear_cfmm(build_interval_system(4), c=np.ones(4), w0=np.ones(4))
    got2 = trade_forward(st2, Interval(3, 3), Interval(0, 2), 3.0)
    assert got2 == pytest.approx(9.0, abs=1e-12)
    assert phi(st2) == pytest.approx(4.0, abs=1e-12)
    np.testing.assert_allclose(st2.w, [4.0, 4.0, 4.0, -8.0])


def test_linear_search_agrees_with_closed_form():
    prices = np.array([0.5, 2.0, 1.0, 0.25])
    closed_st = linear_cfmm(build_interval_system(4), c=prices, w0=np.full(4, 2.0))
    closed = trade_forward(closed_st, Interval(0, 1), Interval(2, 3), 0.7)
    search_st = linear_cfmm(build_interval_system(4), c=prices, w0=np.full(4, 2.0))
    searched = _linear_scale_by_search(search_st, Interval(0, 1), Interval(2, 3), 0.7)
    assert searched == pytest.approx(closed, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("kind", ["log", "linear"])
def test_forward_then_inverse_recovers_scale(kind):
    rng = np.random.default_rng(61)
    n = 256
    make = (lambda: log_cfmm(SYS256, w0=rng.uniform(0.5, 1.5, n))) if kind == "log" \
        else (lambda: linear_cfmm(SYS256, c=rng.uniform(0.5, 2.0, n),
                                  w0=rng.uniform(0.5, 1.5, n)))
    skipped = 0
    for _ in range(40):
        st = make()
        j = int(rng.integers(0, n // 2 - 8))
        width = int(rng.integers(1, 8))
        em = Interval(j, j + width - 1)
        ep = Interval(j + width, j + 2 * width - 1)
        sm = float(rng.uniform(0.01, 0.1))
        level0 = phi(st)
        try:
            owed = trade_backward(st, em, ep, sm)
        except NoFeasibleScale:
            skipped += 1
            continue
        assert phi(st) == pytest.approx(level0, rel=1e-9)
        # tendering the withdrawn basket back must cost exactly what the
        # backward quote said, and land on the same invariant level
        back = trade_forward(st, ep, em, sm)
        assert back == pytest.approx(owed, rel=1e-7, abs=1e-8)
        assert phi(st) == pytest.approx(level0, rel=1e-8)
    assert skipped <= 5


def test_invariant_tracks_oracle_through_random_swaps():
    rng = np.random.default_rng(67)
    st = log_cfmm(SYS256, b=1.0, w0=np.ones(256))
    for _ in range(50):
        a = int(rng.integers(0, 248))
        em, ep = Interval(a, a + 3), Interval(a + 4, a + 7)
        try:
            trade_forward(st, em, ep, float(rng.uniform(0.0, 0.2)))
        except NoFeasibleScale:
            continue
        assert phi(st) == pytest.approx(naive_phi_log(_dense_w(st), 1.0), rel=1e-9)
        assert st.last_search_iters <= MAX_BISECT


def test_search_counters_are_consistent():
    st = log_cfmm(SYS256, w0=np.ones(256))
    trade_forward(st, Interval(0, 3), Interval(4, 7), 0.5)
    assert st.last_search_updates == 2 * (st.last_search_iters + 1)
    assert st.last_search_evals == st.last_search_iters + 1


def test_zero_tender_is_free():
    st = log_cfmm(SYS4, w0=np.ones(4))
    before = phi(st)
    assert trade_forward(st, Interval(0, 0), Interval(1, 1), 0.0) == 0.0
    assert trade_backward(st, Interval(0, 0), Interval(1, 1), 0.0) == 0.0
    assert phi(st) == before
    np.testing.assert_allclose(st.w, 1.0)


def test_overlapping_baskets_rejected():
    st = log_cfmm(SYS4, w0=np.ones(4))
    with pytest.raises(ValueError, match="share an outcome"):
        trade_forward(st, Interval(0, 1), Interval(1, 2), 0.5)
    with pytest.raises(ValueError, match="share an outcome"):
        trade_backward(st, Explicit([0, 2]), Explicit([2, 3]), 0.5)


def test_negative_amounts_rejected():
    st = log_cfmm(SYS4, w0=np.ones(4))
    with pytest.raises(NegativeInput):
        trade_forward(st, Interval(0, 0), Interval(1, 1), -0.5)
    with pytest.raises(NegativeInput):
        trade_backward(st, Interval(0, 0), Interval(1, 1), -0.5)


def test_infeasible_forward_restores_state():
    st = log_cfmm(SYS4, w0=np.array([1.0, 1.0, 1.0, 8.0]))
    w_before = st.w.copy()
    level = phi(st)
    # an enormous payout leg cannot be funded by a tiny tender
    with pytest.raises(NoFeasibleScale):
        trade_backward(st, Interval(0, 2), Interval(3, 3), 50.0)
    np.testing.assert_allclose(st.w, w_before)
    assert phi(st) == pytest.approx(level, rel=1e-12)


def test_linear_pools_quote_any_size():
    # value-preserving linear pools lend into negative reserves instead of
    # running out, so even an outsized withdrawal has a quote
    st = linear_cfmm(SYS4, c=np.ones(4), w0=np.ones(4))
    owed = trade_backward(st, Interval(0, 0), Interval(1, 1), 10.0)
    assert owed == pytest.approx(10.0, abs=1e-12)
    assert st.w[0] == pytest.approx(-9.0)
    assert phi(st) == pytest.approx(naive_phi_linear(st.w, np.ones(4)), abs=1e-12)


def test_one_step_invariant_updates():
    w = np.array([0.3, 1.2, -0.4, 2.0])
    b = 1.7
    base = naive_phi_log(w, b)
    shifted = w.copy()
    shifted[2] = 0.9
    assert log_phi_after(base, w[2], 0.9, b) == pytest.approx(
        naive_phi_log(shifted, b), rel=1e-12
    )
    c = np.array([1.0, 2.0, 0.5, 0.25])
    lin = naive_phi_linear(w, c)
    shifted = w.copy()
    shifted[1] = -0.6
    assert linear_phi_after(lin, c[1], w[1], -0.6) == pytest.approx(
        naive_phi_linear(shifted, c), rel=1e-12
    )


def test_constructor_validation():
    with pytest.raises(ValueError):
        CfmmState(SYS4, "geometric")
    with pytest.raises(ValueError):
        log_cfmm(SYS4, b=0.0)
    with pytest.raises(ValueError):
        linear_cfmm(SYS4, c=np.array([1.0, -1.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        log_cfmm(SYS4, lam=0.0)
