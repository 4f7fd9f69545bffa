"""Brute-force reference implementations used to cross-check the tree engine.

Everything here works on dense per-outcome arrays and enumerates the ground
set directly.  Nothing imports the tree, and event membership is recomputed
here (vectorized) rather than routed through the engine's classify path, so
an engine bug cannot hide in its own oracle.

Costs are O(n) or worse throughout -- these are correctness anchors, not
production paths.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize_scalar

from .set_system import (
    Box,
    Explicit,
    ExplicitSystem,
    GridSystem,
    Halfspace,
    Interval,
    IntervalSystem,
    PointCloudSystem,
)


class DenseState:
    """Dense per-outcome values plus the system they live over.

    ``w`` is (n,) for scalar market weights or (n, k) for algebra leaf
    vectors.
    """

    def __init__(self, w, system):
        self.w = np.asarray(w, dtype=float)
        self.system = system
        if self.w.shape[0] != system.n:
            raise ValueError("weight array length does not match the ground set")

    def copy(self):
        return DenseState(self.w.copy(), self.system)


def event_mask(system, event):
    """Boolean membership over the whole ground set, computed directly."""
    n = system.n
    if isinstance(event, Explicit):
        mask = np.zeros(n, dtype=bool)
        members = event.members
        members = members[(members >= 0) & (members < n)]
        mask[members] = True
        return mask
    if isinstance(event, Interval):
        if not isinstance(system, (IntervalSystem, ExplicitSystem)):
            raise TypeError("interval events need index outcomes")
        idx = np.arange(n)
        return (idx >= event.lo) & (idx <= event.hi)
    if isinstance(system, GridSystem):
        pts = np.stack(
            np.unravel_index(np.arange(n), (system.m,) * system.d), axis=1
        ).astype(float)
    elif isinstance(system, PointCloudSystem):
        pts = system.points
    else:
        raise TypeError(f"cannot evaluate {type(event).__name__} on {system.kind}")
    if isinstance(event, Box):
        return np.all(pts >= event.lo, axis=1) & np.all(pts <= event.hi, axis=1)
    if isinstance(event, Halfspace):
        return pts @ event.beta + event.beta0 >= 0.0
    raise TypeError(f"unknown event type {type(event).__name__}")


def naive_query(ds, event, algebra):
    """Fold ``algebra.combine`` over the event's members in index order."""
    mask = event_mask(ds.system, event)
    acc = algebra.zero()
    w = ds.w if ds.w.ndim == 2 else ds.w[:, None]
    for x in np.flatnonzero(mask):
        acc = algebra.combine(acc, w[x])
    return acc


# ---------------------------------------------------------------------------
# logarithmic rule


def naive_lmsr_price(ds, event, b):
    mask = event_mask(ds.system, event)
    e = np.exp((ds.w - ds.w.max()) / b)
    return float(e[mask].sum() / e.sum())


def _lmsr_potential(w, b):
    m = w.max() / b
    return b * (m + math.log(np.exp(w / b - m).sum()))


def naive_lmsr_cost(ds, event, b, s):
    mask = event_mask(ds.system, event)
    return _lmsr_potential(ds.w + s * mask, b) - _lmsr_potential(ds.w, b)


# ---------------------------------------------------------------------------
# quadratic rule


def naive_qmsr_price(ds, event, b):
    mask = event_mask(ds.system, event)
    n = ds.system.n
    p = 1.0 / n + ds.w / (2.0 * b) - ds.w.sum() / (2.0 * b * n)
    return float(p[mask].sum())


def _qmsr_potential(w, b):
    n = len(w)
    t = w.sum()
    return t / n + (np.square(w).sum() - t * t / n) / (4.0 * b) - b / n


def naive_qmsr_cost(ds, event, b, s):
    mask = event_mask(ds.system, event)
    return _qmsr_potential(ds.w + s * mask, b) - _qmsr_potential(ds.w, b)


# ---------------------------------------------------------------------------
# 3/2-power rule, solved from optimality conditions


class PowerSolution:
    __slots__ = ("cost", "prices", "lam", "boundary")

    def __init__(self, cost, prices, lam, boundary):
        self.cost = cost
        self.prices = prices
        self.lam = lam
        self.boundary = boundary

    def __repr__(self):
        tag = "boundary" if self.boundary else "interior"
        return f"PowerSolution(cost={self.cost:.12g}, {tag})"


def numeric_power_cost(ds, b):
    """Maximize <w, p> - b * sum(p^{3/2}) over the simplex.

    Stationarity gives sqrt(p_x) = max(0, (2/3b)(w_x - lam)); bisect lam so
    the prices sum to one.  ``boundary`` reports whether any coordinate is
    pinned at zero (where the interior closed form stops applying).
    """
    w = ds.w if isinstance(ds, DenseState) else np.asarray(ds, dtype=float)

    def total(lam):
        r = (2.0 / (3.0 * b)) * (w - lam)
        r[r < 0.0] = 0.0
        return float(np.square(r).sum())

    lo = float(w.min()) - 3.0 * b  # total >= 4 here, comfortably above 1
    hi = float(w.max())  # total == 0 here
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total(mid) > 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    lam = 0.5 * (lo + hi)
    r = (2.0 / (3.0 * b)) * (w - lam)
    r[r < 0.0] = 0.0
    p = np.square(r)
    ssum = p.sum()
    if ssum > 0:
        p = p / ssum  # renormalize the last bisection residue
    cost = float(w @ p - b * np.power(p, 1.5).sum())
    boundary = bool(lam >= w.min() - 1e-12)
    return PowerSolution(cost, p, lam, boundary)


def numeric_power_price(ds, event, b):
    sol = numeric_power_cost(ds, b)
    mask = event_mask(ds.system, event)
    return float(sol.prices[mask].sum())


# ---------------------------------------------------------------------------
# layered (multi-resolution) market: direct minimization over removal terms


class _Hierarchy:
    """Dense view of a level structure: cells, parents, and per-node keys."""

    def __init__(self, levels):
        self.levels = [[np.asarray(c, dtype=np.int64) for c in lvl] for lvl in levels]
        self.depth = len(self.levels)
        if self.depth < 1:
            raise ValueError("need at least one level")
        self.parent = {}
        for k in range(1, self.depth):
            for ci, cell in enumerate(self.levels[k]):
                hit = None
                for pi, pcell in enumerate(self.levels[k - 1]):
                    if np.isin(cell, pcell, assume_unique=True).all():
                        hit = pi
                        break
                if hit is None:
                    raise ValueError(f"cell {ci} at level {k} has no parent")
                self.parent[(k, ci)] = (k - 1, hit)

    def nodes(self):
        for k, lvl in enumerate(self.levels):
            for ci in range(len(lvl)):
                yield (k, ci)

    def internal_nodes(self):
        # every node above the finest level has children
        for k in range(self.depth - 1):
            for ci in range(len(self.levels[k])):
                yield (k, ci)

    def ancestors(self, node):
        while node in self.parent:
            node = self.parent[node]
            yield node


def _level_weights(h, w, eta, b_list, k):
    """Effective level-k weights: own w, future-liquidity removal, ancestor pulls."""
    tail = [sum(b_list[j] for j in range(kk + 1, len(b_list))) for kk in range(len(b_list))]
    out = np.empty(len(h.levels[k]))
    for ci in range(len(h.levels[k])):
        node = (k, ci)
        v = w.get(node, 0.0) + tail[k] * eta.get(node, 0.0)
        v -= b_list[k] * sum(eta.get(a, 0.0) for a in h.ancestors(node))
        out[ci] = v
    return out


def _lcmm_total(h, w, eta, b_list, rule, n):
    total = 0.0
    for k in range(h.depth):
        wt = _level_weights(h, w, eta, b_list, k)
        bk = b_list[k]
        if rule == "lmsr":
            m = wt.max() / bk
            total += bk * (m + math.log(np.exp(wt / bk - m).sum()))
        elif rule == "qmsr":
            sizes = np.array([len(c) for c in h.levels[k]], dtype=float)
            t = float(sizes @ wt)
            q = float(sizes @ np.square(wt))
            total += t / n + (q - t * t / n) / (4.0 * bk) - bk / n
        else:
            raise ValueError(f"unknown rule {rule!r}")
    return total


def numeric_lcmm_cost(levels, b_list, w, rule="lmsr", grad_tol=1e-10, max_sweeps=2000):
    """Minimize the layered direct-sum cost over the removal variables.

    ``levels`` lists each resolution's cells (outcome-id arrays), coarsest
    first; ``w`` maps (level, cell-index) to accumulated weight.  Plain
    coordinate descent -- one scalar minimization per internal node, swept
    until the gradient is flat.  Only meant for small structures.
    """
    h = _Hierarchy(levels)
    if len(b_list) != h.depth:
        raise ValueError("need one liquidity per level")
    n = sum(len(c) for c in h.levels[-1])
    w = dict(w)
    eta = {node: 0.0 for node in h.internal_nodes()}

    def objective(node, x):
        eta[node] = x
        return _lcmm_total(h, w, eta, b_list, rule, n)

    def gradient():
        g = {}
        prices = []
        tail = [sum(b_list[j] for j in range(k + 1, h.depth)) for k in range(h.depth)]
        for k in range(h.depth):
            wt = _level_weights(h, w, eta, b_list, k)
            bk = b_list[k]
            if rule == "lmsr":
                e = np.exp((wt - wt.max()) / bk)
                prices.append(e / e.sum())
            else:
                sizes = np.array([len(c) for c in h.levels[k]], dtype=float)
                t = float(sizes @ wt)
                per_point = 1.0 / n + wt / (2.0 * bk) - t / (2.0 * bk * n)
                prices.append(sizes * per_point)
        # descendant price mass of each internal node at each finer level
        for node in eta:
            k, ci = node
            total = tail[k] * prices[k][ci]
            for kk in range(k + 1, h.depth):
                for cj in range(len(h.levels[kk])):
                    anc = (kk, cj)
                    for a in h.ancestors(anc):
                        if a == node:
                            total -= b_list[kk] * prices[kk][cj]
                            break
            g[node] = total
        return g

    last = np.inf
    for _ in range(max_sweeps):
        for node in eta:
            res = minimize_scalar(
                lambda x: objective(node, x),
                bracket=(eta[node] - 1.0, eta[node] + 1.0),
                method="brent",
                options={"xtol": 1e-14},
            )
            eta[node] = float(res.x)
        gmax = max((abs(v) for v in gradient().values()), default=0.0)
        # stop at the target, or once Brent's own noise floor is reached
        # and further sweeps cannot improve the gradient
        if gmax <= grad_tol or gmax >= 0.5 * last:
            break
        last = gmax
    return _lcmm_total(h, w, eta, b_list, rule, n), eta


def refine_lcmm_eta(levels, b_list, w, eta, rule="lmsr"):
    """Total layered cost at a *given* removal assignment (no optimization)."""
    h = _Hierarchy(levels)
    n = sum(len(c) for c in h.levels[-1])
    return _lcmm_total(h, dict(w), dict(eta), b_list, rule, n)


# ---------------------------------------------------------------------------
# swap invariants


def naive_phi_log(w, b):
    return float(-np.exp(-np.asarray(w, dtype=float) / b).sum())


def naive_phi_linear(w, c):
    return float(np.asarray(c, dtype=float) @ np.asarray(w, dtype=float))


def naive_phi_geometric(w, gamma):
    """Weighted geometric mean, all weights strictly positive."""
    w = np.asarray(w, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(w <= 0.0):
        raise ValueError("geometric invariant needs positive reserves")
    return float(np.exp(gamma @ np.log(w)))
