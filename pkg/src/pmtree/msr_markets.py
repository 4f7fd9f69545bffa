"""Cost-function market makers over combinatorial outcome spaces.

Three scoring rules share one pattern: leaf values encode per-outcome
inventory, a range query pulls out exactly the sufficient statistics the
rule needs for an event, and a range update applies a share purchase to
every outcome the event covers.  Each market also carries the global
normalizer its formulas divide by, kept in sync incrementally.

Rules
-----
* logarithmic (:class:`LmsrMarket`): cost ``b * log sum exp(w/b)``;
  prices form a probability distribution, worst-case subsidy
  ``b * log n``.
* quadratic (:class:`QmsrMarket`): cost quadratic in inventory; prices
  sum to one over any partition but may individually leave ``[0, 1]``
  for extreme states (returned unclamped).
* 3/2-power (:class:`PowerMarket`): cost from the power score with
  exponent 3/2; the closed form is real while the state stays in the
  interior region, otherwise :class:`NegativeDiscriminant` is raised.
"""

from __future__ import annotations

import functools
import math

import numpy as np

from .algebra import LogSumAdd, PowerMoments, SumAddVec, alpha_action
from .partition_tree import (
    build_from_hierarchy,
    build_kd_tree,
    build_segment_tree,
    range_query,
    range_query_update,
    range_update,
)


class NegativeDiscriminant(ArithmeticError):
    """The 3/2-power state left the region where its cost is real."""


def _counts_visits(fn):
    """Record tree nodes touched across all range ops of one market call."""

    @functools.wraps(fn)
    def wrapper(mkt, *args):
        t0 = mkt.tree.total_visits
        try:
            return fn(mkt, *args)
        finally:
            mkt.last_op_visits = mkt.tree.total_visits - t0

    return wrapper


# ---------------------------------------------------------------------------
# logarithmic rule


def _log1m_exp(a: float) -> float:
    """log(1 - e^a) for a <= 0, stable near both ends."""
    if a >= 0.0:
        return -math.inf
    if a > -0.6931471805599453:
        return math.log(-math.expm1(a))
    return math.log1p(-math.exp(a))


def _logaddexp(a: float, b: float) -> float:
    # same algorithm as the numpy ufunc, without per-call dispatch cost
    if a == b:
        return a if a == -math.inf else a + 0.6931471805599453
    m = a if a > b else b
    return m + math.log1p(math.exp(-abs(a - b)))


@_counts_visits
def lmsr_price(mkt, event):
    """Probability the logarithmic rule assigns to ``event`` right now."""
    q = range_query(mkt.tree, event)[0]
    return min(math.exp(min(q - mkt.logM, 0.0)), 1.0)


def _lmsr_paid(mkt, q, shares):
    log_p = min(q - mkt.logM, 0.0)
    if log_p == -math.inf:
        return 0.0
    return mkt.b * _logaddexp(log_p + shares / mkt.b, _log1m_exp(log_p))


@_counts_visits
def lmsr_cost(mkt, event, shares):
    """Cost of buying ``shares`` of ``event`` without changing the market."""
    return _lmsr_paid(mkt, range_query(mkt.tree, event)[0], shares)


@_counts_visits
def lmsr_buy(mkt, event, shares):
    """Buy ``shares`` of ``event``; returns the cost charged."""
    q = range_query_update(mkt.tree, event, np.array([shares / mkt.b]))[0]
    paid = _lmsr_paid(mkt, q, shares)
    # the lazy walk already swapped the event's old aggregate for the new
    # one along the root path, so the root value is the fresh normalizer
    mkt.logM = float(mkt.tree.vals[0, 0])
    return paid


# ---------------------------------------------------------------------------
# quadratic rule


@_counts_visits
def qmsr_price(mkt, event):
    count, total = range_query(mkt.tree, event)
    n, b = mkt.tree.n, mkt.b
    return float(count / n + total / (2.0 * b) - count * mkt.M / (2.0 * b * n))


def _qmsr_paid(mkt, count, total, s):
    n, b = mkt.tree.n, mkt.b
    return float(
        (s / n + s * s / (4.0 * b)) * count
        - s * s * count * count / (4.0 * b * n)
        + s * total / (2.0 * b)
        - s * count * mkt.M / (2.0 * b * n)
    )


@_counts_visits
def qmsr_cost(mkt, event, shares):
    count, total = range_query(mkt.tree, event)
    return _qmsr_paid(mkt, count, total, float(shares))


@_counts_visits
def qmsr_buy(mkt, event, shares):
    s = float(shares)
    count, total = range_query_update(mkt.tree, event, np.array([0.0, s]))
    paid = _qmsr_paid(mkt, count, total, s)
    mkt.M += s * count
    return paid


# ---------------------------------------------------------------------------
# 3/2-power rule


def _power_mu(n, m1, m2, b):
    disc = m1 * m1 - n * (m2 - 2.25 * b * b)
    if disc < 0.0:
        raise NegativeDiscriminant(
            f"discriminant {disc:.6g} < 0; state is outside the interior region"
        )
    return float(np.sqrt(disc))


def _power_potential(g, b):
    n, m1, m2, m3 = (float(v) for v in g)
    mu = _power_mu(n, m1, m2, b)
    return (4.0 / (27.0 * b * b)) * (
        m3 - (m1 ** 3 - 3.0 * m1 * mu * mu + 2.0 * mu ** 3) / (n * n)
    )


@_counts_visits
def power_price(mkt, event):
    s0, s1, s2, _ = range_query(mkt.tree, event)
    n = mkt.tree.n
    _, m1, m2, _ = mkt.M
    mu = _power_mu(n, m1, m2, mkt.b)
    c = 4.0 / (9.0 * mkt.b * mkt.b)
    return float(
        s0 / n
        + c
        * (
            s2
            + (2.0 / n) * (mu - m1) * s1
            - (s0 / n) * m2
            + (2.0 * s0 / (n * n)) * m1 * m1
            - (2.0 * s0 / (n * n)) * m1 * mu
        )
    )


@_counts_visits
def power_cost(mkt, event, shares):
    """Cost from shifted moments; no mutation.

    Raises :class:`NegativeDiscriminant` if either the current or the
    hypothetical post-trade state has no real closed form.
    """
    g = np.asarray(range_query(mkt.tree, event))
    target = mkt.M - g + alpha_action(float(shares), g)
    return float(_power_potential(target, mkt.b) - _power_potential(mkt.M, mkt.b))


@_counts_visits
def power_buy(mkt, event, shares):
    before = np.asarray(range_query(mkt.tree, event))
    target = mkt.M - before + alpha_action(float(shares), before)
    # validate the destination state before touching the tree
    paid = float(_power_potential(target, mkt.b) - _power_potential(mkt.M, mkt.b))
    range_update(mkt.tree, event, np.array([float(shares)]))
    after = np.asarray(range_query(mkt.tree, event))
    mkt.M = mkt.M - before + after
    return paid


# ---------------------------------------------------------------------------
# market objects


def _start_inventory(n, w0):
    return np.zeros(n) if w0 is None else np.asarray(w0, dtype=float).reshape(n)


def _build_tree(system, algebra, rows, tree_kind, levels):
    if tree_kind == "segment":
        return build_segment_tree(system, algebra, init=rows)
    if tree_kind == "kd":
        return build_kd_tree(system, algebra, init=rows)
    if tree_kind == "hierarchy":
        if levels is None:
            raise ValueError("hierarchy trees need explicit levels")
        return build_from_hierarchy(system, algebra, levels, init=rows)
    raise ValueError(f"unknown tree kind {tree_kind!r}")


class _MarketBase:
    __slots__ = ("b", "tree", "last_op_visits")

    _algebra_name = None

    def __init__(self, tree, b):
        if not b > 0:
            raise ValueError("liquidity must be positive")
        if tree.algebra.name != self._algebra_name:
            raise TypeError(
                f"{type(self).__name__} needs a {self._algebra_name} tree, "
                f"got {tree.algebra.name}"
            )
        self.b = float(b)
        self.tree = tree
        self.last_op_visits = 0

    @property
    def n(self):
        return self.tree.n

    def __repr__(self):
        return f"<{type(self).__name__} n={self.tree.n} b={self.b}>"


class LmsrMarket(_MarketBase):
    """Logarithmic rule; ``logM`` mirrors the tree's root aggregate."""

    __slots__ = ("logM",)

    _algebra_name = "log_sum_add"

    def __init__(self, tree, b):
        super().__init__(tree, b)
        self.logM = float(tree.vals[0, 0])

    @classmethod
    def from_system(cls, system, b, w0=None, tree_kind="segment", levels=None):
        if not b > 0:
            raise ValueError("liquidity must be positive")
        rows = _start_inventory(system.n, w0) / b
        return cls(_build_tree(system, LogSumAdd(), rows, tree_kind, levels), b)

    def price(self, event):
        return lmsr_price(self, event)

    def cost(self, event, shares):
        return lmsr_cost(self, event, shares)

    def buy(self, event, shares):
        return lmsr_buy(self, event, shares)


class QmsrMarket(_MarketBase):
    """Quadratic rule; ``M`` tracks total inventory across outcomes."""

    __slots__ = ("M",)

    _algebra_name = "sum_add_vec"

    def __init__(self, tree, b):
        super().__init__(tree, b)
        self.M = float(tree.vals[0, 1])

    @classmethod
    def from_system(cls, system, b, w0=None, tree_kind="segment", levels=None):
        w = _start_inventory(system.n, w0)
        rows = np.column_stack([np.ones(system.n), w])
        return cls(_build_tree(system, SumAddVec(2), rows, tree_kind, levels), b)

    def price(self, event):
        return qmsr_price(self, event)

    def cost(self, event, shares):
        return qmsr_cost(self, event, shares)

    def buy(self, event, shares):
        return qmsr_buy(self, event, shares)


class PowerMarket(_MarketBase):
    """3/2-power rule; ``M`` holds global moment sums (n, M1, M2, M3)."""

    __slots__ = ("M",)

    _algebra_name = "power_moments"

    def __init__(self, tree, b):
        super().__init__(tree, b)
        self.M = tree.vals[0].copy()

    @classmethod
    def from_system(cls, system, b, w0=None, tree_kind="segment", levels=None):
        w = _start_inventory(system.n, w0)
        rows = np.column_stack([np.ones(system.n), w, w ** 2, w ** 3])
        return cls(_build_tree(system, PowerMoments(), rows, tree_kind, levels), b)

    def price(self, event):
        return power_price(self, event)

    def cost(self, event, shares):
        return power_cost(self, event, shares)

    def buy(self, event, shares):
        return power_buy(self, event, shares)


MARKET_TYPES = {"lmsr": LmsrMarket, "qmsr": QmsrMarket, "power": PowerMarket}
