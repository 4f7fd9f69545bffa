import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmtree.algebra import (
    ALL_ALGEBRAS,
    AffineSum,
    LogSumAdd,
    PowerMoments,
    SumAddVec,
    SumMul,
    check_algebra_laws,
)

finite = st.floats(-50.0, 50.0, allow_nan=False)


@pytest.mark.parametrize("algebra", ALL_ALGEBRAS, ids=lambda a: a.name)
def test_sampled_laws(algebra):
    assert check_algebra_laws(algebra, sample_count=1000, seed=3) == []


def test_names_and_opcodes_are_distinct():
    names = [a.name for a in ALL_ALGEBRAS]
    opcodes = [a.opcode for a in ALL_ALGEBRAS]
    assert len(set(names)) == len(names)
    assert len(set(opcodes)) == len(opcodes)


def test_log_sum_add_combines_in_log_domain():
    a = LogSumAdd()
    out = a.combine(np.array([0.0]), np.array([0.0]))
    assert out[0] == pytest.approx(math.log(2.0), abs=1e-15)
    # zero mass is the identity
    assert a.combine(a.zero(), np.array([1.5]))[0] == pytest.approx(1.5)


@given(x=finite, y=finite, s=finite)
@settings(max_examples=200, deadline=None)
def test_log_sum_add_matches_dense(x, y, s):
    a = LogSumAdd()
    z = a.apply_update(np.array([s]), a.combine(np.array([x]), np.array([y])))
    direct = np.logaddexp(x + s, y + s)
    assert z[0] == pytest.approx(direct, rel=1e-12, abs=1e-12)


def test_sum_mul_rejects_nonpositive_scale():
    a = SumMul()
    with pytest.raises(ValueError):
        a.compose(np.array([0.0]), np.array([1.0]))


def test_sum_add_vec_count_channel():
    a = SumAddVec(2)
    block = a.combine(np.array([1.0, 3.0]), np.array([1.0, 4.0]))
    assert block.tolist() == [2.0, 7.0]
    # a shift of +s moves the sum by count * s
    shifted = a.apply_update(np.array([0.0, 0.5]), block)
    assert shifted.tolist() == [2.0, 8.0]


def test_power_moments_action_matches_dense():
    a = PowerMoments()
    rng = np.random.default_rng(1)
    w = rng.normal(0, 2, 5)
    z = np.array([0.0, 0.0, 0.0, 0.0])
    for x in w:
        z = a.combine(z, np.array([1.0, x, x * x, x ** 3]))
    s = 0.7
    z2 = a.apply_update(np.array([s]), z)
    wn = w + s
    expect = [5.0, wn.sum(), np.square(wn).sum(), (wn ** 3).sum()]
    np.testing.assert_allclose(z2, expect, rtol=1e-12)


def test_affine_sum_tracks_weighted_total():
    a = AffineSum()
    z = a.combine(np.array([2.0, 1.0]), np.array([6.0, 3.0]))
    moved = a.apply_update(np.array([2.0]), z)
    assert moved.tolist() == [2.0 + 6.0 + 2.0 * 4.0, 4.0]


@pytest.mark.parametrize("algebra", ALL_ALGEBRAS, ids=lambda a: a.name)
def test_inverse_round_trips_values(algebra):
    rng = np.random.default_rng(11)
    for _ in range(50):
        z = algebra.sample_value(rng)
        s = algebra.sample_update(rng)
        back = algebra.apply_update(algebra.inverse(s), algebra.apply_update(s, z))
        np.testing.assert_allclose(back, z, rtol=1e-9, atol=1e-9)
