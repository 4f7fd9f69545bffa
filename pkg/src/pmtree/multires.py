"""Hierarchical markets: one submarket per resolution level, prices tied.

A nested partition of the outcome space defines a ladder of submarkets,
level ``k`` trading the cells of the ``k``-th partition under its own
liquidity ``b_k``.  All levels share a single scoring rule (logarithmic or
quadratic); mixing rules across levels is rejected.  Left alone, the
submarkets would drift apart, so every node ``u`` above the finest level
carries an arbitrage weight ``eta(u)`` whose bundle adds ``B_l = sum of
finer liquidities`` to ``u`` itself and subtracts ``b_k`` from each strict
descendant at level ``k``.  The effective per-node weight is therefore

    wt(v) = w(v) + B_level(v) * eta(v) - b_level(v) * sum eta(ancestors)

and the market charges the difference of the direct-sum cost (sum of the
per-level costs at ``wt``) between the post-trade and pre-trade optima.

A buy lands on the coarsest tree nodes covered by the event, then restores
coherence -- node price equals the sum of its children's prices -- by
walking the affected nodes deepest level first and applying a closed-form
correction to each ``eta``.  For a single-node trade one pass is exact;
overlapping root paths are swept until the largest gap falls under
``SWEEP_TOL``.  Per-level normalizers (log-partition for the logarithmic
rule, first and second weighted moments for the quadratic rule) are
patched incrementally so no operation ever scans a whole level.
"""

from __future__ import annotations

import math

import numpy as np

from .algebra import SumMul
from .msr_markets import _log1m_exp
from .partition_tree import build_from_hierarchy
from .set_system import CONTAINS, DISJOINT, classify

SWEEP_TOL = 1e-12
MAX_SWEEPS = 60
_BUILD_SWEEPS = 500


class IncoherentState(RuntimeError):
    """Prices were requested while the state is mid-repair."""


class DecompositionError(ValueError):
    """The event cannot be written as a union of hierarchy cells."""


class PriceSingularity(ArithmeticError):
    """A degenerate price (0 or 1) has no finite log-odds correction."""


# ---------------------------------------------------------------------------
# closed-form correction amounts (pure functions, also used by tests)


def lmsr_removal_amount(p_node, p_children, b_level, b_pair):
    """Logarithmic-rule ``eta`` increment equalizing a node with its children.

    ``p_node`` is the node's probability in its own level market,
    ``p_children`` the summed probability of its children one level down,
    and ``b_pair = b_level + B_level`` couples the two levels.
    """
    if not 0.0 < p_node < 1.0 or not 0.0 < p_children < 1.0:
        raise PriceSingularity(
            f"degenerate prices ({p_node}, {p_children}) have no log-odds gap"
        )
    return (b_level / b_pair) * math.log(
        (1.0 - p_node) / p_node * p_children / (1.0 - p_children)
    )


def qmsr_removal_amount(gap, n, size, b_level, level_tail):
    """Quadratic-rule ``eta`` increment closing ``gap = sum children - node``.

    ``level_tail`` is the total liquidity from the node's level down,
    ``b_level + B_level``; ``size`` is the node's cell size out of ``n``.
    """
    if not 0 < size < n:
        raise ValueError(f"cell of size {size} out of {n} has no sibling mass")
    return (b_level / level_tail) * 2.0 * n * gap / (size * (n - size))


# ---------------------------------------------------------------------------
# state


class MultiResState:
    """Sparse trade/arbitrage weights plus per-level running normalizers."""

    __slots__ = (
        "tree",
        "rule",
        "b",
        "B",
        "w",
        "eta",
        "logZ",
        "T",
        "Q",
        "level_nodes",
        "level_sizes",
        "last_op_visits",
        "_in_buy",
    )

    def __init__(self, system, levels, b, rule="lmsr"):
        if rule not in ("lmsr", "qmsr"):
            raise ValueError(f"unsupported rule {rule!r}; levels share one rule")
        self.tree = build_from_hierarchy(system, SumMul(), levels, init=0.0,
                                         preserve_chains=True)
        self.rule = rule
        depth = int(self.tree.level.max()) + 1
        b = [float(x) for x in b]
        if len(b) == depth - 1:
            # the builder prepended the root level; its liquidity never
            # enters any formula, so any positive placeholder works
            b = [1.0] + b
        if len(b) != depth:
            raise ValueError(f"need {depth} liquidities, got {len(b)}")
        if min(b) <= 0.0:
            raise ValueError("liquidities must be positive")
        self.b = np.array(b)
        self.B = np.concatenate([np.cumsum(self.b[::-1])[-2::-1], [0.0]])
        self.level_nodes = [
            np.flatnonzero(self.tree.level == k) for k in range(depth)
        ]
        self.level_sizes = [
            np.array([self.tree.node_size(int(i)) for i in nodes], dtype=float)
            for nodes in self.level_nodes
        ]
        self.w = {}
        self.eta = {}
        if rule == "lmsr":
            self.logZ = np.array([math.log(len(v)) for v in self.level_nodes])
            self.T = self.Q = None
        else:
            self.logZ = None
            self.T = np.zeros(depth)
            self.Q = np.zeros(depth)
        self.last_op_visits = 0
        self._in_buy = False
        if rule == "lmsr":
            _settle_construction(self)

    @property
    def n(self):
        return self.tree.n

    @property
    def depth(self):
        return len(self.level_nodes)

    def clone(self):
        """Independent copy sharing the immutable tree structure."""
        other = object.__new__(MultiResState)
        other.tree = self.tree
        other.rule = self.rule
        other.b = self.b
        other.B = self.B
        other.level_nodes = self.level_nodes
        other.level_sizes = self.level_sizes
        other.w = dict(self.w)
        other.eta = dict(self.eta)
        other.logZ = None if self.logZ is None else self.logZ.copy()
        other.T = None if self.T is None else self.T.copy()
        other.Q = None if self.Q is None else self.Q.copy()
        other.last_op_visits = 0
        other._in_buy = False
        return other

    def price(self, event):
        return mr_price(self, event)

    def cost(self, event, shares):
        return mr_cost(self, event, shares)

    def buy(self, event, shares):
        return mr_buy(self, event, shares)

    def __repr__(self):
        return (
            f"<MultiResState {self.rule} n={self.n} depth={self.depth} "
            f"traded={len(self.w)}>"
        )


def build_multires(system, levels, b, rule="lmsr"):
    return MultiResState(system, levels, b, rule)


def hierarchy_from_json(doc):
    """Decode ``{"levels": [...], "b": [...]}`` into builder arguments.

    Each cell is either an explicit index array or ``{"range": [lo, hi]}``
    with inclusive endpoints.
    """
    levels = []
    for lvl in doc["levels"]:
        cells = []
        for cell in lvl:
            if isinstance(cell, dict):
                lo, hi = cell["range"]
                cells.append(np.arange(int(lo), int(hi) + 1, dtype=np.int64))
            else:
                cells.append(np.asarray(cell, dtype=np.int64))
        levels.append(cells)
    return levels, [float(x) for x in doc["b"]]


# ---------------------------------------------------------------------------
# per-node views (all O(depth) or O(children), nothing scans a level)


def _anc_eta_sum(st, i):
    total = 0.0
    p = int(st.tree.parent[i])
    while p >= 0:
        total += st.eta.get(p, 0.0)
        p = int(st.tree.parent[p])
    return total


def _wtilde(st, i, anc):
    k = int(st.tree.level[i])
    return (
        st.w.get(i, 0.0)
        + st.B[k] * st.eta.get(i, 0.0)
        - st.b[k] * anc
    )


def _level_price(st, i, anc):
    """Price of node ``i`` inside its own level's submarket."""
    k = int(st.tree.level[i])
    wt = _wtilde(st, i, anc)
    if st.rule == "lmsr":
        return math.exp(wt / st.b[k] - st.logZ[k])
    size = st.tree.node_size(i)
    return (
        size / st.n
        + size * wt / (2.0 * st.b[k])
        - size * st.T[k] / (2.0 * st.b[k] * st.n)
    )


def _child_sum_price(st, u, anc_u):
    """Summed price of ``u``'s children in the next finer submarket."""
    anc = anc_u + st.eta.get(u, 0.0)
    total = 0.0
    for c in st.tree.children(u):
        total += _level_price(st, int(c), anc)
    return total


def _gap(st, u, anc):
    p_node = _level_price(st, u, anc)
    p_kids = _child_sum_price(st, u, anc)
    return p_kids - p_node, p_node, p_kids


# ---------------------------------------------------------------------------
# state mutation: trades and bundle purchases patch the level normalizers


def _logz_swap(logz, m_old, m_new):
    """Replace one exp-term of a log-sum: drop ``m_old``, add ``m_new``."""
    rest = logz + _log1m_exp(min(m_old - logz, 0.0))
    return float(np.logaddexp(rest, m_new))


def _apply_trade(st, u, s):
    k = int(st.tree.level[u])
    anc = _anc_eta_sum(st, u)
    wt_old = _wtilde(st, u, anc)
    st.w[u] = st.w.get(u, 0.0) + s
    if st.rule == "lmsr":
        m_old = wt_old / st.b[k]
        st.logZ[k] = _logz_swap(st.logZ[k], m_old, m_old + s / st.b[k])
    else:
        size = st.tree.node_size(u)
        st.T[k] += s * size
        st.Q[k] += size * (2.0 * wt_old * s + s * s)


def _apply_bundle(st, u, x, anc=None, p_children=None):
    """Add ``x`` to ``eta(u)`` and patch every finer level's normalizer.

    The finer-level patches lean on coherence below ``level(u)``: under it
    the node's share of every finer submarket equals its children's summed
    price, which is the only subtree quantity the update needs.
    """
    if x == 0.0:
        return
    k = int(st.tree.level[u])
    if anc is None:
        anc = _anc_eta_sum(st, u)
    if p_children is None:
        p_children = _child_sum_price(st, u, anc)
    wt_old = _wtilde(st, u, anc)
    shift = st.B[k] * x
    if st.rule == "lmsr":
        m_old = wt_old / st.b[k]
        st.logZ[k] = _logz_swap(st.logZ[k], m_old, m_old + shift / st.b[k])
        if p_children > 0.0:
            drag = math.log1p(p_children * math.expm1(-x))
            for j in range(k + 1, st.depth):
                st.logZ[j] += drag
    else:
        size = st.tree.node_size(u)
        st.T[k] += shift * size
        st.Q[k] += size * (2.0 * wt_old * shift + shift * shift)
        for j in range(k + 1, st.depth):
            # subtree first moment at level j, recovered from coherence
            sub_t = 2.0 * st.b[j] * (p_children - size / st.n) + size * st.T[j] / st.n
            st.Q[j] += -2.0 * st.b[j] * x * sub_t + st.b[j] ** 2 * x * x * size
            st.T[j] -= st.b[j] * x * size
    st.eta[u] = st.eta.get(u, 0.0) + x


def apply_bundle(st, u, x):
    """Buy ``x`` of node ``u``'s arbitrage bundle (no coherence repair)."""
    u = int(u)
    if st.tree.child_count[u] == 0:
        raise ValueError(f"node {u} has no finer level to spread the bundle on")
    _apply_bundle(st, u, float(x))


def arb_bundle(st, u):
    """Explicit bundle coefficients for node ``u``: the column applied by
    ``apply_bundle``, keyed by node id."""
    u = int(u)
    if st.tree.child_count[u] == 0:
        raise ValueError(f"node {u} has no finer level to spread the bundle on")
    out = {u: float(st.B[int(st.tree.level[u])])}
    stack = [int(c) for c in st.tree.children(u)]
    while stack:
        v = stack.pop()
        out[v] = -float(st.b[int(st.tree.level[v])])
        stack.extend(int(c) for c in st.tree.children(v))
    return out


# ---------------------------------------------------------------------------
# arbitrage removal


def remove_arbitrage_lmsr(st, u):
    """Close the price gap at one node; returns the ``eta`` increment."""
    u = int(u)
    if st.rule != "lmsr":
        raise ValueError(f"market runs the {st.rule} rule")
    if st.tree.child_count[u] == 0:
        raise ValueError(f"node {u} has no children to cohere with")
    k = int(st.tree.level[u])
    anc = _anc_eta_sum(st, u)
    _, p_node, p_kids = _gap(st, u, anc)
    x = lmsr_removal_amount(p_node, p_kids, st.b[k], st.b[k] + st.B[k])
    _apply_bundle(st, u, x, anc, p_kids)
    return x


def remove_arbitrage_qmsr(st, u):
    """Quadratic-rule counterpart of :func:`remove_arbitrage_lmsr`."""
    u = int(u)
    if st.rule != "qmsr":
        raise ValueError(f"market runs the {st.rule} rule")
    if st.tree.child_count[u] == 0:
        raise ValueError(f"node {u} has no children to cohere with")
    size = st.tree.node_size(u)
    if size >= st.n:
        raise ValueError("a full-space cell has no sibling constraint")
    k = int(st.tree.level[u])
    anc = _anc_eta_sum(st, u)
    gap, _, p_kids = _gap(st, u, anc)
    x = qmsr_removal_amount(gap, st.n, size, st.b[k], st.b[k] + st.B[k])
    _apply_bundle(st, u, x, anc, p_kids)
    return x


def _fix_order(st, nodes):
    """Internal nodes whose constraints a trade at ``nodes`` can disturb:
    each trade node (if internal) plus its strict ancestors, deepest level
    first.  Full-space cells are skipped; their prices are pinned at 1."""
    tree = st.tree
    fix = set()
    for u in nodes:
        j = u if tree.child_count[u] > 0 else int(tree.parent[u])
        while j >= 0:
            if tree.node_size(j) < st.n:
                fix.add(j)
            j = int(tree.parent[j])
    return sorted(fix, key=lambda i: (-int(tree.level[i]), i))


def _patch_once(st, u):
    """Close the gap at ``u`` from current prices; returns |gap| and visits."""
    k = int(st.tree.level[u])
    anc = _anc_eta_sum(st, u)
    gap, p_node, p_kids = _gap(st, u, anc)
    if st.rule == "lmsr":
        x = lmsr_removal_amount(p_node, p_kids, st.b[k], st.b[k] + st.B[k])
    else:
        x = qmsr_removal_amount(
            gap, st.n, st.tree.node_size(u), st.b[k], st.b[k] + st.B[k]
        )
    _apply_bundle(st, u, x, anc, p_kids)
    return abs(gap), 1 + int(st.tree.child_count[u]) + st.depth


def _repair(st, order, max_rounds=MAX_SWEEPS):
    """Restore coherence over ``order`` (sorted deepest level first).

    Levels are finished one at a time, finest first: a node's correction
    and its normalizer patches are exact only once everything below it is
    already coherent, so ascending before a level has converged would bake
    the residual into the running statistics for good.  Within a level,
    nodes are re-patched from re-read prices until the largest gap seen in
    a full pass drops under ``SWEEP_TOL``.
    """
    visits = 0
    i = 0
    while i < len(order):
        j = i
        lvl = int(st.tree.level[order[i]])
        while j < len(order) and int(st.tree.level[order[j]]) == lvl:
            j += 1
        group = order[i:j]
        for _ in range(max_rounds):
            worst = 0.0
            for u in group:
                g, v = _patch_once(st, u)
                visits += v
                if g > worst:
                    worst = g
            if worst <= SWEEP_TOL:
                break
        i = j
    return visits


def _settle_construction(st):
    """Drive the fresh state to coherence before trading starts.

    A zero-weight quadratic ladder is coherent for any tree shape, but the
    logarithmic rule starts coherent only under uniform branching, so the
    constructor repairs all internal nodes once up front.
    """
    order = _fix_order(st, [int(i) for lvl in st.level_nodes[:-1] for i in lvl])
    if not order:
        return
    _repair(st, order, max_rounds=_BUILD_SWEEPS)
    worst = max(abs(v) for v in coherence_gaps(st).values())
    if worst > 1e-9:
        raise IncoherentState(f"construction sweeps stalled with gap {worst:.3e}")


# ---------------------------------------------------------------------------
# market operations


def _decompose(st, event):
    """Coarsest tree nodes covered by ``event``; (nodes, classify visits)."""
    tree = st.tree
    out = []
    visits = 0
    stack = [0]
    while stack:
        i = stack.pop()
        visits += 1
        side = classify(tree.system, event, tree.node_set(i))
        if side == DISJOINT:
            continue
        if side == CONTAINS:
            out.append(i)
            continue
        if tree.child_count[i] == 0:
            raise DecompositionError(
                f"event {event!r} cuts through cell {tree.node_set(i)!r}"
            )
        stack.extend(int(c) for c in tree.children(i))
    return out, visits


def _total_cost(st):
    if st.rule == "lmsr":
        return float(np.dot(st.b, st.logZ))
    total = 0.0
    for k in range(st.depth):
        total += (
            st.T[k] / st.n
            + (st.Q[k] - st.T[k] ** 2 / st.n) / (4.0 * st.b[k])
            - st.b[k] / st.n
        )
    return total


def mr_price(st, event):
    """Probability of ``event``: summed prices of its coarsest cover."""
    if st._in_buy:
        raise IncoherentState("price requested mid-buy")
    nodes, visits = _decompose(st, event)
    total = 0.0
    for u in nodes:
        if st.rule == "qmsr":
            total += _level_price(st, u, _anc_eta_sum(st, u))
            visits += 1 + int(st.tree.level[u])
            continue
        # walk the root path, multiplying each step's share among siblings;
        # no level normalizer enters, only local weight ratios
        path = []
        j = u
        while j >= 0:
            path.append(j)
            j = int(st.tree.parent[j])
        path.reverse()
        log_p = 0.0
        anc = 0.0
        for a, v in zip(path, path[1:]):
            anc_child = anc + st.eta.get(a, 0.0)
            ms = np.array(
                [
                    _wtilde(st, int(c), anc_child) / st.b[int(st.tree.level[c])]
                    for c in st.tree.children(a)
                ]
            )
            top = float(ms.max())
            lse = top + math.log(np.exp(ms - top).sum())
            log_p += _wtilde(st, v, anc_child) / st.b[int(st.tree.level[v])] - lse
            visits += 1 + len(ms)
            anc = anc_child
        total += math.exp(log_p)
    st.last_op_visits = visits
    if st.rule == "lmsr":
        total = min(total, 1.0)
    return total


def mr_buy(st, event, shares):
    """Buy ``shares`` of ``event``; returns the trader's total charge."""
    if st._in_buy:
        raise IncoherentState("buy requested mid-buy")
    nodes, visits = _decompose(st, event)
    if shares == 0 or not nodes:
        st.last_op_visits = visits
        return 0.0
    before = _total_cost(st)
    st._in_buy = True
    for u in nodes:
        _apply_trade(st, u, shares)
        visits += 1 + int(st.tree.level[u])
    visits += _repair(st, _fix_order(st, nodes))
    st._in_buy = False
    st.last_op_visits = visits
    return _total_cost(st) - before


def mr_cost(st, event, shares):
    """What :func:`mr_buy` would charge, evaluated on scratch state."""
    if st._in_buy:
        raise IncoherentState("cost requested mid-buy")
    shadow = st.clone()
    paid = mr_buy(shadow, event, shares)
    st.last_op_visits = shadow.last_op_visits
    return paid


# ---------------------------------------------------------------------------
# exact audits (full scans; for tests and repair, not the trading path)


def _exact_level_weights(st):
    out = [np.zeros(len(nodes)) for nodes in st.level_nodes]
    stack = [(0, 0.0)]
    while stack:
        i, anc = stack.pop()
        k = int(st.tree.level[i])
        slot = int(np.searchsorted(st.level_nodes[k], i))
        out[k][slot] = _wtilde(st, i, anc)
        anc_child = anc + st.eta.get(i, 0.0)
        stack.extend((int(c), anc_child) for c in st.tree.children(i))
    return out


def _exact_level_prices(st):
    weights = _exact_level_weights(st)
    prices = []
    for k, wt in enumerate(weights):
        if st.rule == "lmsr":
            m = wt / st.b[k]
            e = np.exp(m - m.max())
            prices.append(e / e.sum())
        else:
            sizes = st.level_sizes[k]
            t = float(sizes @ wt)
            prices.append(
                sizes / st.n
                + sizes * wt / (2.0 * st.b[k])
                - sizes * t / (2.0 * st.b[k] * st.n)
            )
    return prices


def coherence_gaps(st):
    """Exact ``sum(children) - node`` price gap for every internal node."""
    prices = _exact_level_prices(st)

    def lookup(i):
        k = int(st.tree.level[i])
        return float(prices[k][int(np.searchsorted(st.level_nodes[k], i))])

    gaps = {}
    for lvl in st.level_nodes[:-1]:
        for u in lvl:
            u = int(u)
            kids = st.tree.children(u)
            gaps[u] = sum(lookup(int(c)) for c in kids) - lookup(u)
    return gaps


def direct_sum_cost(st):
    """Exact direct-sum cost at the current ``(w, eta)``, recomputed."""
    weights = _exact_level_weights(st)
    total = 0.0
    for k, wt in enumerate(weights):
        if st.rule == "lmsr":
            m = wt / st.b[k]
            top = float(m.max())
            total += st.b[k] * (top + math.log(np.exp(m - top).sum()))
        else:
            sizes = st.level_sizes[k]
            t = float(sizes @ wt)
            q = float(sizes @ np.square(wt))
            total += (
                t / st.n + (q - t * t / st.n) / (4.0 * st.b[k]) - st.b[k] / st.n
            )
    return total


def refresh_level_stats(st):
    """Recompute the running normalizers from scratch (drift repair)."""
    weights = _exact_level_weights(st)
    for k, wt in enumerate(weights):
        if st.rule == "lmsr":
            m = wt / st.b[k]
            top = float(m.max())
            st.logZ[k] = top + math.log(np.exp(m - top).sum())
        else:
            sizes = st.level_sizes[k]
            st.T[k] = float(sizes @ wt)
            st.Q[k] = float(sizes @ np.square(wt))
