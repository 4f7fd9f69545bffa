"""Constant-function market makers over combinatorial baskets.

A swap state keeps a reserve vector ``w`` (one entry per outcome/asset) and a
trading function ``phi`` that every accepted trade must leave unchanged:

* logarithmic: ``phi(w) = -sum_x exp(-w_x / b)``
* linear:      ``phi(w) = sum_x c_x * w_x`` with fixed positive weights ``c``

Baskets are events of the underlying set system, so a trade moves every asset
of the tendered event by the same scale.  Both functions decompose over
outcomes, which lets one partition tree answer the two primitives a swap
needs: "shift all reserves inside an event" (range update) and "current value
of phi" (root aggregate).  The log state keeps leaf values ``-w_x / b`` under
the log-sum-exp algebra so huge reserves never overflow; the linear state
keeps ``(c_x * w_x, c_x)`` pairs under the affine-sum algebra.

The scale that balances a linear trade has a closed form.  For the log rule
the scale is found by bisection on a monotone residual, with every probe
applied to the tree and then rolled back through the update group's inverse;
only the final scale is committed.
"""

import math

import numpy as np

from .algebra import AffineSum, LogSumAdd
from .msr_markets import _counts_visits
from .partition_tree import build_segment_tree, range_query, range_update
from .set_system import Explicit, Interval, events_overlap, membership

__all__ = [
    "CfmmState",
    "NoFeasibleScale",
    "NegativeInput",
    "log_cfmm",
    "linear_cfmm",
    "phi",
    "trade_forward",
    "trade_backward",
    "log_phi_after",
    "linear_phi_after",
]

#: invariant drift allowed before a probe counts as "balanced", relative to phi
PHI_RTOL = 1e-10
#: bisection stops once the bracketing interval is this narrow (asset units)
SCALE_ATOL = 1e-12
#: enough halvings to take [0, 1e6] below SCALE_ATOL
MAX_BISECT = 60


class NoFeasibleScale(RuntimeError):
    """No scale within the state's bound balances the trading function."""


class NegativeInput(ValueError):
    """Tendered scales must be non-negative."""


# ---------------------------------------------------------------------------
# state


def _event_mask(system, event):
    n = system.n
    if isinstance(event, Explicit):
        mask = np.zeros(n, dtype=bool)
        keep = event.members[(event.members >= 0) & (event.members < n)]
        mask[keep] = True
        return mask
    if isinstance(event, Interval):
        idx = np.arange(n)
        return (idx >= event.lo) & (idx <= event.hi)
    return np.array([membership(system, event, x) for x in range(n)], dtype=bool)


class CfmmState:
    """Reserves plus the tree that mirrors them under one trading function."""

    __slots__ = (
        "system",
        "kind",
        "b",
        "c",
        "lam",
        "w",
        "tree",
        "phi_cached",
        "last_op_visits",
        "last_search_iters",
        "last_search_updates",
        "last_search_evals",
    )

    def __init__(self, system, kind, w0=None, *, b=1.0, c=None, lam=1e6):
        if kind not in ("log", "linear"):
            raise ValueError(f"unknown trading function {kind!r}")
        if not lam > 0:
            raise ValueError("scale bound must be positive")
        n = system.n
        w = np.zeros(n) if w0 is None else np.asarray(w0, dtype=float).reshape(n)
        self.system = system
        self.kind = kind
        self.lam = float(lam)
        self.w = w.copy()
        if kind == "log":
            if not b > 0:
                raise ValueError("log liquidity must be positive")
            self.b = float(b)
            self.c = None
            self.tree = build_segment_tree(system, LogSumAdd(), init=-w / self.b)
        else:
            c = np.ones(n) if c is None else np.asarray(c, dtype=float).reshape(n)
            if not np.all(c > 0):
                raise ValueError("linear weights must be strictly positive")
            self.b = None
            self.c = c.copy()
            self.tree = build_segment_tree(
                system, AffineSum(), init=np.column_stack([c * w, c])
            )
        self.phi_cached = self._root_phi()
        self.last_op_visits = 0
        self.last_search_iters = 0
        self.last_search_updates = 0
        self.last_search_evals = 0

    @property
    def n(self):
        return self.system.n

    def _root_log(self):
        return float(self.tree.vals[0, 0])

    def _root_phi(self):
        if self.kind == "log":
            return -math.exp(self._root_log())
        return float(self.tree.vals[0, 0])

    def phi(self):
        return phi(self)

    def forward(self, e_minus, e_plus, s_plus):
        return trade_forward(self, e_minus, e_plus, s_plus)

    def backward(self, e_minus, e_plus, s_minus):
        return trade_backward(self, e_minus, e_plus, s_minus)

    def __repr__(self):
        return f"<CfmmState kind={self.kind} n={self.n} phi={self.phi_cached:.6g}>"


def log_cfmm(system, w0=None, b=1.0, lam=1e6):
    return CfmmState(system, "log", w0, b=b, lam=lam)


def linear_cfmm(system, c=None, w0=None, lam=1e6):
    return CfmmState(system, "linear", w0, c=c, lam=lam)


# ---------------------------------------------------------------------------
# the trading function


@_counts_visits
def phi(st):
    """Current trading-function value, read off the tree's root aggregate."""
    st.phi_cached = st._root_phi()
    return st.phi_cached


def log_phi_after(phi_val, w_old, w_new, b=1.0):
    """Log invariant after one reserve moves from ``w_old`` to ``w_new``.

    The sum over all other assets is untouched, so the new value follows
    from the old one in constant time.
    """
    return phi_val + math.exp(-w_old / b) - math.exp(-w_new / b)


def linear_phi_after(phi_val, c_x, w_old, w_new):
    """Linear invariant after one reserve moves from ``w_old`` to ``w_new``."""
    return phi_val + c_x * (w_new - w_old)


# ---------------------------------------------------------------------------
# scale search (log rule; the linear rule only uses this in its unit tests)


def _outflow_update(st, s):
    """Tree update for "reserves drop by ``s`` on the event"."""
    if st.kind == "log":
        return np.array([s / st.b])
    return np.array([-s])


def _residual(st, ref):
    """Signed invariant gap of the current tree state, relative to ``|phi|``.

    Positive means phi sits above the reference level.  For the log rule the
    comparison happens in the log domain, so scales near the bound cannot
    overflow; ``ref`` is the reference root aggregate (log-domain for log).
    """
    if st.kind == "log":
        # phi = -exp(L): phi - phi_ref = -exp(ref) * expm1(L - ref)
        d = st._root_log() - ref
        if d > 700.0:  # expm1 overflows; the gap is just "far below ref"
            return -math.inf
        return -math.expm1(d)
    scale = max(abs(ref), 1e-300)
    return (float(st.tree.vals[0, 0]) - ref) / scale


def _bisect_scale(st, event, ref, direction):
    """Find the scale on ``event`` that returns phi to ``ref``.

    ``direction`` is +1 when the probed scale flows out of the reserves
    (forward trades: residual decreases in ``s``) and -1 when it flows in
    (backward trades: residual increases).  Every probe applies one range
    update, reads phi once, and rolls the update back with its inverse; the
    caller commits the final scale.  Returns ``(s, iters, updates, evals)``.
    """
    tree = st.tree

    def probe(s):
        u = _outflow_update(st, direction * s)
        range_update(tree, event, u)
        g = _residual(st, ref)
        range_update(tree, event, -u)
        return g

    # feasibility at the bound: the residual must have crossed zero by lam
    g_lam = probe(st.lam)
    iters, updates, evals = 0, 2, 1
    if direction * g_lam > PHI_RTOL:
        raise NoFeasibleScale(
            f"no scale in [0, {st.lam:g}] balances the trading function"
        )
    if abs(_residual(st, ref)) <= PHI_RTOL:  # already balanced, root read is free
        return 0.0, iters, updates, evals
    lo, hi = 0.0, st.lam
    s_star = st.lam
    while iters < MAX_BISECT and hi - lo > SCALE_ATOL:
        mid = 0.5 * (lo + hi)
        g = probe(mid)
        iters += 1
        updates += 2
        evals += 1
        if abs(g) <= PHI_RTOL:
            s_star = mid
            break
        if direction * g > 0.0:
            lo = mid
        else:
            hi = mid
        s_star = 0.5 * (lo + hi)
    return s_star, iters, updates, evals


# ---------------------------------------------------------------------------
# swaps


def _check_basket(st, e_minus, e_plus, tendered):
    if tendered < 0:
        raise NegativeInput("tendered scale must be non-negative")
    if events_overlap(st.system, e_minus, e_plus):
        raise ValueError("swap baskets must not share an outcome")


def _commit_reserves(st, event, delta):
    if delta != 0.0:
        st.w[_event_mask(st.system, event)] += delta
    st.phi_cached = st._root_phi()


@_counts_visits
def trade_forward(st, e_minus, e_plus, s_plus):
    """Tender ``s_plus`` of ``e_plus``; receive the phi-preserving ``e_minus`` scale."""
    _check_basket(st, e_minus, e_plus, s_plus)
    st.last_search_iters = st.last_search_updates = st.last_search_evals = 0
    if s_plus == 0.0:
        return 0.0
    if st.kind == "linear":
        gain = float(range_query(st.tree, e_plus)[1])
        drain = float(range_query(st.tree, e_minus)[1])
        if gain > 0.0 and not drain > 0.0:
            raise NoFeasibleScale("receiving basket has no weight to balance")
        s = s_plus * gain / drain if gain > 0.0 else 0.0
        range_update(st.tree, e_plus, np.array([s_plus]))
        st.w[_event_mask(st.system, e_plus)] += s_plus
        if s != 0.0:
            range_update(st.tree, e_minus, np.array([-s]))
        _commit_reserves(st, e_minus, -s)
        return s

    ref = st._root_log()
    range_update(st.tree, e_plus, _outflow_update(st, -s_plus))
    st.w[_event_mask(st.system, e_plus)] += s_plus
    try:
        s, iters, updates, evals = _bisect_scale(st, e_minus, ref, +1)
    except NoFeasibleScale:
        range_update(st.tree, e_plus, _outflow_update(st, s_plus))
        st.w[_event_mask(st.system, e_plus)] -= s_plus
        st.phi_cached = st._root_phi()
        raise
    if s != 0.0:
        range_update(st.tree, e_minus, _outflow_update(st, s))
    st.last_search_iters = iters
    st.last_search_updates = updates
    st.last_search_evals = evals
    _commit_reserves(st, e_minus, -s)
    return s


@_counts_visits
def trade_backward(st, e_minus, e_plus, s_minus):
    """Withdraw ``s_minus`` of ``e_minus``; owe the phi-preserving ``e_plus`` scale."""
    _check_basket(st, e_minus, e_plus, s_minus)
    st.last_search_iters = st.last_search_updates = st.last_search_evals = 0
    if s_minus == 0.0:
        return 0.0
    if st.kind == "linear":
        drain = float(range_query(st.tree, e_minus)[1])
        gain = float(range_query(st.tree, e_plus)[1])
        if drain > 0.0 and not gain > 0.0:
            raise NoFeasibleScale("tendered basket has no weight to balance")
        s = s_minus * drain / gain if drain > 0.0 else 0.0
        range_update(st.tree, e_minus, np.array([-s_minus]))
        st.w[_event_mask(st.system, e_minus)] -= s_minus
        if s != 0.0:
            range_update(st.tree, e_plus, np.array([s]))
        _commit_reserves(st, e_plus, s)
        return s

    ref = st._root_log()
    range_update(st.tree, e_minus, _outflow_update(st, s_minus))
    st.w[_event_mask(st.system, e_minus)] -= s_minus
    try:
        s, iters, updates, evals = _bisect_scale(st, e_plus, ref, -1)
    except NoFeasibleScale:
        range_update(st.tree, e_minus, _outflow_update(st, -s_minus))
        st.w[_event_mask(st.system, e_minus)] += s_minus
        st.phi_cached = st._root_phi()
        raise
    if s != 0.0:
        range_update(st.tree, e_plus, _outflow_update(st, -s))
    st.last_search_iters = iters
    st.last_search_updates = updates
    st.last_search_evals = evals
    _commit_reserves(st, e_plus, s)
    return s


def _linear_scale_by_search(st, e_minus, e_plus, s_plus):
    """Forward scale for a linear state found by bisection instead of the
    closed form; exists so tests can pin the two routes against each other.
    The tree is restored before returning."""
    if st.kind != "linear":
        raise ValueError("search cross-check is for linear states")
    ref = float(st.tree.vals[0, 0])
    range_update(st.tree, e_plus, np.array([s_plus]))
    try:
        s, _, _, _ = _bisect_scale(st, e_minus, ref, +1)
    finally:
        range_update(st.tree, e_plus, np.array([-s_plus]))
    return s
