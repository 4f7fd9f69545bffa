"""Partition trees with lazy range updates over an arbitrary weight algebra.

A partition tree recursively splits the ground set: every node owns a block
of outcomes, children partition their parent's block, leaves are the finest
blocks.  Node values aggregate their block under the algebra's combine;
pending updates park on nodes and are pushed one level down whenever a walk
passes through ("lazy propagation").  An operation touches a node only when
the event crosses the parent's block, which is what keeps update and query
sublinear on geometrically nice events.

Three builders are provided:

* ``build_segment_tree``   -- halving splits over index outcomes (ragged n
  supported; empty blocks dropped, single-child chains collapsed),
* ``build_kd_tree``        -- median splits with axis cycling over coordinate
  outcomes, bounding boxes for conservative classification,
* ``build_from_hierarchy`` -- an explicit nested partition (market
  hierarchies); chains are collapsed unless the caller needs one node per
  (level, cell), as the multi-resolution markets do.

State lives in flat numpy arrays (node order: breadth-first for segment and
hierarchy trees, preorder for k-d trees; the root is always node 0, children
always carry larger ids than their parent).  Contiguous-range trees hit by
interval events run on compiled kernels when available; everything else goes
through the generic recursive walker.  Both paths maintain the same state and
agree numerically.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from . import _kernels
from .set_system import (
    Box,
    Explicit,
    ExplicitSystem,
    ExplicitSet,
    GridSystem,
    Halfspace,
    IndexRange,
    Interval,
    IntervalSystem,
    PointBlock,
    PointCloudSystem,
    CONTAINS,
    CROSSES,
    DISJOINT,
)

_MAGIC = b"CPT1"
_KIND_CODE = {"segment": 0, "kd": 1, "hierarchy": 2}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}

# classification codes used internally by the walkers
_DISJ, _CROSS, _CONT = -1, 0, 1
_CODE_NAME = {_DISJ: DISJOINT, _CROSS: CROSSES, _CONT: CONTAINS}


class LeafCrossed(ValueError):
    """An event cut through a leaf block, so it is not representable here."""


class PartitionTree:
    def __init__(
        self,
        algebra,
        system,
        kind,
        contiguous,
        ns_lo,
        ns_hi,
        child_first,
        child_count,
        child_list,
        vals,
        pend,
        perm=None,
        bbox_lo=None,
        bbox_hi=None,
        parent=None,
        level=None,
        cells=None,
        chains_preserved=False,
    ):
        self.algebra = algebra
        self.system = system
        self.kind = kind
        self.contiguous = contiguous
        # node index arrays are int32: any buildable tree fits, and the hot
        # walks are memory-bound, so the smaller footprint is measurable
        self.ns_lo = np.ascontiguousarray(ns_lo, dtype=np.int32)
        self.ns_hi = np.ascontiguousarray(ns_hi, dtype=np.int32)
        self.child_first = np.ascontiguousarray(child_first, dtype=np.int32)
        self.child_count = np.ascontiguousarray(child_count, dtype=np.int32)
        self.child_list = np.ascontiguousarray(child_list, dtype=np.int32)
        # per-node scalars the compiled walks read on every visit, packed so
        # a visit costs one cache line instead of four
        self.meta = np.ascontiguousarray(
            np.stack(
                [self.ns_lo, self.ns_hi, self.child_first, self.child_count], axis=1
            )
        )
        self.vals = vals
        self.pend = pend
        self.perm = perm
        self.bbox_lo = bbox_lo
        self.bbox_hi = bbox_hi
        self.parent = parent
        self.level = level
        self.cells = cells
        self.chains_preserved = chains_preserved
        self.root = 0
        self.n = system.n
        self.last_op_visits = 0
        self.max_visits = 0
        self.total_visits = 0
        # leaves bigger than singletons can be cut by an event; those trees
        # validate decomposability before mutating
        leaf = self.child_count == 0
        sizes = np.array([self.node_size(i) for i in np.flatnonzero(leaf)])
        self.block_leaves = bool(len(sizes)) and int(sizes.max()) > 1

    @property
    def num_nodes(self):
        return self.vals.shape[0]

    def children(self, i):
        f = self.child_first[i]
        return self.child_list[f : f + self.child_count[i]]

    def is_leaf(self, i):
        return self.child_count[i] == 0

    def node_set(self, i):
        if self.kind == "kd":
            ids = self.perm[self.ns_lo[i] : self.ns_hi[i]]
            return PointBlock(ids, self.bbox_lo[i], self.bbox_hi[i])
        if self.cells is not None:
            return ExplicitSet(self.cells[i])
        return IndexRange(self.ns_lo[i], self.ns_hi[i])

    def node_size(self, i):
        if self.kind == "kd":
            return int(self.ns_hi[i] - self.ns_lo[i])
        if self.cells is not None:
            return len(self.cells[i])
        return int(self.ns_hi[i] - self.ns_lo[i] + 1)

    def _record_visits(self, v):
        self.last_op_visits = int(v)
        self.total_visits += int(v)
        if v > self.max_visits:
            self.max_visits = int(v)

    def __repr__(self):
        return (
            f"<PartitionTree {self.kind} n={self.n} nodes={self.num_nodes} "
            f"algebra={self.algebra.name}>"
        )


# ---------------------------------------------------------------------------
# event resolution: turn (tree, event) into a per-node classify function


def _snap_interval(e):
    return math.ceil(e.lo), math.floor(e.hi)


def resolve_classifier(tree, e):
    """Return ``cls(i) -> -1 | 0 | 1`` (disjoint / crosses / contains)."""
    if tree.kind == "kd":
        return _resolve_kd(tree, e)
    if tree.cells is not None:
        return _resolve_cells(tree, e)
    return _resolve_ranges(tree, e)


def _resolve_ranges(tree, e):
    ns_lo, ns_hi = tree.ns_lo, tree.ns_hi
    if isinstance(e, Interval):
        elo, ehi = _snap_interval(e)

        def cls(i):
            lo = ns_lo[i]
            hi = ns_hi[i]
            if hi < elo or lo > ehi:
                return _DISJ
            if elo <= lo and hi <= ehi:
                return _CONT
            return _CROSS

        return cls
    if isinstance(e, Explicit):
        members = e.members

        def cls(i):
            lo = ns_lo[i]
            hi = ns_hi[i]
            cnt = np.searchsorted(members, hi, side="right") - np.searchsorted(
                members, lo, side="left"
            )
            if cnt == 0:
                return _DISJ
            if cnt == hi - lo + 1:
                return _CONT
            return _CROSS

        return cls
    raise TypeError(
        f"{type(e).__name__} events cannot run against an index-range tree"
    )


def _resolve_cells(tree, e):
    cells = tree.cells
    if isinstance(e, Interval):
        elo, ehi = _snap_interval(e)

        def cls(i):
            m = cells[i]
            cnt = np.searchsorted(m, ehi, side="right") - np.searchsorted(
                m, elo, side="left"
            )
            if cnt == 0:
                return _DISJ
            if cnt == len(m):
                return _CONT
            return _CROSS

        return cls
    if isinstance(e, Explicit):
        members = e.members

        def cls(i):
            m = cells[i]
            cnt = int(np.isin(m, members, assume_unique=True).sum())
            if cnt == 0:
                return _DISJ
            if cnt == len(m):
                return _CONT
            return _CROSS

        return cls
    raise TypeError(
        f"{type(e).__name__} events cannot run against a hierarchy of id blocks"
    )


def _resolve_kd(tree, e):
    blo, bhi = tree.bbox_lo, tree.bbox_hi
    d = blo.shape[1]
    if isinstance(e, Box):
        if len(e.lo) != d:
            raise ValueError("event dimension does not match tree dimension")
        elo, ehi = e.lo, e.hi

        def cls(i):
            lo = blo[i]
            hi = bhi[i]
            contains = True
            for j in range(d):
                if ehi[j] < lo[j] or elo[j] > hi[j]:
                    return _DISJ
                if elo[j] > lo[j] or hi[j] > ehi[j]:
                    contains = False
            return _CONT if contains else _CROSS

        return cls
    if isinstance(e, Halfspace):
        if len(e.beta) != d:
            raise ValueError("event dimension does not match tree dimension")
        beta, beta0 = e.beta, e.beta0

        def cls(i):
            lo_val = beta0
            hi_val = beta0
            for j in range(d):
                a = beta[j] * blo[i, j]
                b = beta[j] * bhi[i, j]
                if a <= b:
                    lo_val += a
                    hi_val += b
                else:
                    lo_val += b
                    hi_val += a
            if lo_val >= 0.0:
                return _CONT
            if hi_val < 0.0:
                return _DISJ
            return _CROSS

        return cls
    if isinstance(e, Explicit):
        perm, ns_lo, ns_hi = tree.perm, tree.ns_lo, tree.ns_hi
        members = e.members

        def cls(i):
            ids = perm[ns_lo[i] : ns_hi[i]]
            cnt = int(np.isin(ids, members, assume_unique=True).sum())
            if cnt == 0:
                return _DISJ
            if cnt == len(ids):
                return _CONT
            return _CROSS

        return cls
    raise TypeError(f"{type(e).__name__} events cannot run against a k-d tree")


# ---------------------------------------------------------------------------
# generic walker (any algebra, any tree, any event with a classifier)


# Walk invariant: ``vals[i]`` is the true aggregate of i's subtree except
# for updates still pending in i's *proper ancestors*; ``pend[i]`` is owed
# to i's strict descendants and is already reflected in ``vals[i]`` itself.
# Updates therefore flush a node's pending into its children only when they
# descend through it, queries stay read-only by composing ancestor pendings
# along the path, and children that miss the event are pruned at the parent
# without ever being visited.


def _walk_update(tree, cls, s):
    alg = tree.algebra
    vals, pend = tree.vals, tree.pend
    child_first, child_count, child_list = (
        tree.child_first,
        tree.child_count,
        tree.child_list,
    )
    visits = 0

    def rec(i, code):
        nonlocal visits
        visits += 1
        if code == _DISJ:  # only reachable at the root
            return
        if code == _CONT:
            vals[i] = alg.apply_update(s, vals[i])
            if child_count[i] > 0:
                pend[i] = alg.compose(s, pend[i])
            return
        if child_count[i] == 0:
            raise LeafCrossed("event cuts through a leaf block of this tree")
        f = child_first[i]
        if not alg.is_identity(pend[i]):
            # descending through i: hand its pending down one level
            for k in range(child_count[i]):
                c = child_list[f + k]
                vals[c] = alg.apply_update(pend[i], vals[c])
                if child_count[c] > 0:
                    pend[c] = alg.compose(pend[i], pend[c])
            pend[i] = alg.identity()
        for k in range(child_count[i]):
            c = child_list[f + k]
            ccode = cls(c)
            if ccode != _DISJ:
                rec(c, ccode)
        acc = vals[child_list[f]].copy()
        for k in range(1, child_count[i]):
            acc = alg.combine(acc, vals[child_list[f + k]])
        vals[i] = acc

    rec(tree.root, cls(tree.root))
    return visits


def _walk_query_update(tree, cls, s):
    """Update walk that also returns the pre-update aggregate of the event."""
    alg = tree.algebra
    vals, pend = tree.vals, tree.pend
    child_first, child_count, child_list = (
        tree.child_first,
        tree.child_count,
        tree.child_list,
    )
    visits = 0

    def rec(i, code):
        nonlocal visits
        visits += 1
        if code == _DISJ:  # only reachable at the root
            return None
        if code == _CONT:
            pre = vals[i].copy()
            vals[i] = alg.apply_update(s, vals[i])
            if child_count[i] > 0:
                pend[i] = alg.compose(s, pend[i])
            return pre
        if child_count[i] == 0:
            raise LeafCrossed("event cuts through a leaf block of this tree")
        f = child_first[i]
        if not alg.is_identity(pend[i]):
            for k in range(child_count[i]):
                c = child_list[f + k]
                vals[c] = alg.apply_update(pend[i], vals[c])
                if child_count[c] > 0:
                    pend[c] = alg.compose(pend[i], pend[c])
            pend[i] = alg.identity()
        acc = None
        for k in range(child_count[i]):
            c = child_list[f + k]
            ccode = cls(c)
            if ccode == _DISJ:
                continue
            part = rec(c, ccode)
            acc = part if acc is None else alg.combine(acc, part)
        agg = vals[child_list[f]].copy()
        for k in range(1, child_count[i]):
            agg = alg.combine(agg, vals[child_list[f + k]])
        vals[i] = agg
        return acc

    out = rec(tree.root, cls(tree.root))
    if out is None:
        out = alg.zero()
    return out, visits


def _walk_query(tree, cls):
    alg = tree.algebra
    vals, pend = tree.vals, tree.pend
    child_first, child_count, child_list = (
        tree.child_first,
        tree.child_count,
        tree.child_list,
    )
    visits = 0

    def rec(i, code, down):
        # ``down`` composes the pendings of i's proper ancestors on this path
        nonlocal visits
        visits += 1
        if code == _DISJ:  # only reachable at the root
            return None
        if code == _CONT:
            row = vals[i].copy()
            return row if down is None else alg.apply_update(down, row)
        if child_count[i] == 0:
            raise LeafCrossed("event cuts through a leaf block of this tree")
        if not alg.is_identity(pend[i]):
            down = pend[i] if down is None else alg.compose(pend[i], down)
        acc = None
        f = child_first[i]
        for k in range(child_count[i]):
            c = child_list[f + k]
            ccode = cls(c)
            if ccode == _DISJ:
                continue
            part = rec(c, ccode, down)
            acc = part if acc is None else alg.combine(acc, part)
        return acc

    out = rec(tree.root, cls(tree.root), None)
    if out is None:
        out = alg.zero()
    return out, visits


def _kernel_eligible(tree, e):
    return (
        _kernels.HAS_NUMBA
        and tree.contiguous
        and tree.algebra.opcode is not None
        and isinstance(e, Interval)
    )


def _check_decomposable(tree, cls):
    """Read-only walk raising LeafCrossed before an update mutates anything."""

    def rec(i):
        if cls(i) == _CROSS:
            if tree.child_count[i] == 0:
                raise LeafCrossed("event cuts through a leaf block of this tree")
            f = tree.child_first[i]
            for k in range(tree.child_count[i]):
                rec(tree.child_list[f + k])

    rec(tree.root)


def range_update(tree, e, s):
    """Apply update ``s`` to every outcome of ``e``; records visit stats."""
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.shape[0] != tree.algebra.update_width:
        raise ValueError(
            f"update width {s.shape[0]} != algebra width {tree.algebra.update_width}"
        )
    if tree.block_leaves:
        _check_decomposable(tree, resolve_classifier(tree, e))
    if _kernel_eligible(tree, e):
        elo, ehi = _snap_interval(e)
        visits = _kernels.update_interval(
            tree.algebra.opcode,
            tree.meta,
            tree.child_list,
            tree.vals,
            tree.pend,
            elo,
            ehi,
            s,
        )
        if visits < 0:
            raise LeafCrossed("event cuts through a leaf block of this tree")
    else:
        visits = _walk_update(tree, resolve_classifier(tree, e), s)
    tree._record_visits(visits)


def range_query(tree, e):
    """Aggregate the event's block under the algebra; records visit stats."""
    if _kernel_eligible(tree, e):
        elo, ehi = _snap_interval(e)
        out = np.empty(tree.algebra.value_width)
        visits = _kernels.query_interval(
            tree.algebra.opcode,
            tree.meta,
            tree.child_list,
            tree.vals,
            tree.pend,
            elo,
            ehi,
            out,
        )
        if visits < 0:
            raise LeafCrossed("event cuts through a leaf block of this tree")
    else:
        out, visits = _walk_query(tree, resolve_classifier(tree, e))
    tree._record_visits(visits)
    return out


def range_query_update(tree, e, s):
    """Aggregate the event's block, then apply ``s`` to it; returns the
    pre-update aggregate.

    Equivalent to ``range_query`` followed by ``range_update``, but the
    compiled path walks the tree once, which matters for trade-shaped
    workloads that always pair the two on the same event.
    """
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.shape[0] != tree.algebra.update_width:
        raise ValueError(
            f"update width {s.shape[0]} != algebra width {tree.algebra.update_width}"
        )
    if _kernel_eligible(tree, e):
        if tree.block_leaves:
            _check_decomposable(tree, resolve_classifier(tree, e))
        elo, ehi = _snap_interval(e)
        out = np.empty(tree.algebra.value_width)
        visits = _kernels.buy_interval(
            tree.algebra.opcode,
            tree.meta,
            tree.child_list,
            tree.vals,
            tree.pend,
            elo,
            ehi,
            s,
            out,
        )
        if visits < 0:
            raise LeafCrossed("event cuts through a leaf block of this tree")
        tree._record_visits(visits)
        return out
    out = range_query(tree, e)
    range_update(tree, e, s)
    return out


def visit_count(tree):
    """Visit statistics: nodes touched by the last operation, the max, the sum."""
    return {
        "last": tree.last_op_visits,
        "max": tree.max_visits,
        "total": tree.total_visits,
    }


# ---------------------------------------------------------------------------
# builders


def _leaf_rows(algebra, system, init):
    """Normalize leaf initialization to an (n, value_width) array."""
    n = system.n
    zw = algebra.value_width
    if init is None:
        row = algebra.zero()
        return np.broadcast_to(row, (n, zw)).copy()
    if callable(init):
        out = np.empty((n, zw))
        for x in range(n):
            out[x] = np.asarray(init(x), dtype=float).reshape(zw)
        return out
    arr = np.asarray(init, dtype=float)
    if arr.ndim == 0 and zw == 1:
        return np.full((n, 1), float(arr))
    if arr.ndim == 1 and zw == 1:
        arr = arr[:, None]
    if arr.ndim == 1 and arr.shape[0] == zw:
        # one row broadcast to every leaf (uniform start, no per-leaf pass)
        return np.broadcast_to(arr, (n, zw)).copy()
    if arr.shape != (n, zw):
        raise ValueError(f"leaf init shape {arr.shape} != ({n}, {zw})")
    return arr.copy()


def _identity_rows(algebra, count):
    return np.broadcast_to(algebra.identity(), (count, algebra.update_width)).copy()


def build_segment_tree(system, algebra, init=None):
    """Halving-split tree over index outcomes; ragged sizes collapse cleanly."""
    if not isinstance(system, (IntervalSystem, ExplicitSystem)):
        raise TypeError("segment trees need index outcomes")
    n = system.n
    K = (n - 1).bit_length() if n > 1 else 0
    idmaps = []
    level_rows = []
    next_id = 0
    for k in range(K + 1):
        width = 1 << (K - k)
        count = 1 << k
        lo = np.arange(count, dtype=np.int64) * width
        if width == 1:
            real = lo <= n - 1
        else:
            real = lo + (width >> 1) <= n - 1
        ids = np.full(count, -1, dtype=np.int64)
        sel = np.flatnonzero(real)
        ids[sel] = next_id + np.arange(len(sel))
        next_id += len(sel)
        idmaps.append(ids)
        level_rows.append((sel, lo, np.minimum(lo + width - 1, n - 1), width))
    num_nodes = next_id

    ns_lo = np.empty(num_nodes, np.int64)
    ns_hi = np.empty(num_nodes, np.int64)
    child_count = np.zeros(num_nodes, np.int32)
    pairs = np.full((num_nodes, 2), -1, np.int64)

    def chase(k, l):
        # descend the left spine of virtual nodes until a real one appears
        while idmaps[k][l] < 0:
            k += 1
            l *= 2
        return idmaps[k][l]

    internal_levels = []
    for k in range(K + 1):
        sel, lo, hi, width = level_rows[k]
        nid = idmaps[k][sel]
        ns_lo[nid] = lo[sel]
        ns_hi[nid] = hi[sel]
        if width > 1 and len(sel):
            lch = idmaps[k + 1][2 * sel]
            rch = idmaps[k + 1][2 * sel + 1]
            for pos in np.flatnonzero(lch < 0):
                lch[pos] = chase(k + 1, 2 * sel[pos])
            for pos in np.flatnonzero(rch < 0):
                rch[pos] = chase(k + 1, 2 * sel[pos] + 1)
            pairs[nid, 0] = lch
            pairs[nid, 1] = rch
            child_count[nid] = 2
            internal_levels.append((nid, lch, rch))

    child_first = np.zeros(num_nodes, np.int64)
    child_first[1:] = np.cumsum(child_count.astype(np.int64))[:-1]
    child_list = np.empty(int(child_count.sum()), np.int64)
    has = child_count > 0
    child_list[child_first[has]] = pairs[has, 0]
    child_list[child_first[has] + 1] = pairs[has, 1]

    vals = np.empty((num_nodes, algebra.value_width))
    rows = _leaf_rows(algebra, system, init)
    vals[num_nodes - n :] = rows  # leaves are the last n ids, in outcome order
    for nid, lch, rch in reversed(internal_levels):
        vals[nid] = algebra.combine_arrays(vals[lch], vals[rch])
    pend = _identity_rows(algebra, num_nodes)

    return PartitionTree(
        algebra,
        system,
        "segment",
        True,
        ns_lo,
        ns_hi,
        child_first,
        child_count,
        child_list,
        vals,
        pend,
    )


def build_kd_tree(system, algebra, init=None):
    """Median-split tree over coordinate outcomes, axis cycling by depth."""
    if not isinstance(system, (GridSystem, PointCloudSystem)):
        raise TypeError("k-d trees need coordinate outcomes")
    pts = system.all_points()
    n, d = pts.shape
    num_nodes = 2 * n - 1
    perm = np.arange(n, dtype=np.int64)
    ns_lo = np.empty(num_nodes, np.int64)
    ns_hi = np.empty(num_nodes, np.int64)
    bbox_lo = np.empty((num_nodes, d))
    bbox_hi = np.empty((num_nodes, d))
    child_count = np.zeros(num_nodes, np.int32)
    pairs = np.full((num_nodes, 2), -1, np.int64)
    vals = np.empty((num_nodes, algebra.value_width))
    rows = _leaf_rows(algebra, system, init)
    counter = 0

    def rec(start, end, depth):
        nonlocal counter
        i = counter
        counter += 1
        ns_lo[i] = start
        ns_hi[i] = end
        block = perm[start:end]
        sub = pts[block]
        bbox_lo[i] = sub.min(axis=0)
        bbox_hi[i] = sub.max(axis=0)
        if end - start == 1:
            vals[i] = rows[block[0]]
            return i
        axis = depth % d
        order = np.lexsort((block, sub[:, axis]))  # ties broken by outcome id
        perm[start:end] = block[order]
        mid = start + (end - start) // 2
        left = rec(start, mid, depth + 1)
        right = rec(mid, end, depth + 1)
        child_count[i] = 2
        pairs[i] = (left, right)
        vals[i] = algebra.combine(vals[left], vals[right])
        return i

    rec(0, n, 0)

    child_first = np.zeros(num_nodes, np.int64)
    child_first[1:] = np.cumsum(child_count.astype(np.int64))[:-1]
    child_list = np.empty(int(child_count.sum()), np.int64)
    has = child_count > 0
    child_list[child_first[has]] = pairs[has, 0]
    child_list[child_first[has] + 1] = pairs[has, 1]
    pend = _identity_rows(algebra, num_nodes)

    return PartitionTree(
        algebra,
        system,
        "kd",
        False,
        ns_lo,
        ns_hi,
        child_first,
        child_count,
        child_list,
        vals,
        pend,
        perm=perm,
        bbox_lo=bbox_lo,
        bbox_hi=bbox_hi,
    )


def _normalize_cell(cell, n):
    if isinstance(cell, dict) and "range" in cell:
        lo, hi = cell["range"]
        return np.arange(int(lo), int(hi), dtype=np.int64)  # half-open range
    arr = np.unique(np.asarray(list(cell), dtype=np.int64))
    if len(arr) == 0:
        raise ValueError("empty cell in hierarchy")
    if arr[0] < 0 or arr[-1] >= n:
        raise ValueError("cell references outcomes outside the ground set")
    return arr


def build_from_hierarchy(system, algebra, levels, init=None, preserve_chains=False):
    """Tree from an explicit nested partition (coarsest level first).

    Each level must partition the ground set and refine the previous level.
    A cell repeated verbatim on consecutive levels forms a single-child
    chain: collapsed by default, kept (one node per level-cell, with level
    and parent metadata) when ``preserve_chains`` is set -- multi-resolution
    markets need the repeated nodes.
    """
    n = system.n
    norm = [[_normalize_cell(c, n) for c in lvl] for lvl in levels]
    if not norm:
        raise ValueError("need at least one level")
    if len(norm[0]) != 1 or len(norm[0][0]) != n:
        norm.insert(0, [np.arange(n, dtype=np.int64)])
    covers = []
    for k, lvl in enumerate(norm):
        cover = np.full(n, -1, np.int64)
        total = 0
        for ci, cell in enumerate(lvl):
            if np.any(cover[cell] >= 0):
                raise ValueError(f"level {k} cells overlap")
            cover[cell] = ci
            total += len(cell)
        if total != n or np.any(cover < 0):
            raise ValueError(f"level {k} does not partition the ground set")
        covers.append(cover)

    # parent of (k, ci) at level k-1, validated for nesting
    parents = {}
    for k in range(1, len(norm)):
        for ci, cell in enumerate(norm[k]):
            up = covers[k - 1][cell]
            if np.any(up != up[0]):
                raise ValueError(f"cell {ci} at level {k} is not nested")
            parents[(k, ci)] = (k - 1, int(up[0]))

    children_of = {key: [] for k in range(len(norm)) for key in [(k, c) for c in range(len(norm[k]))]}
    for child, par in parents.items():
        children_of[par].append(child)

    if preserve_chains:
        kept = {key: True for key in children_of}
    else:
        kept = {}
        for key in children_of:
            k, ci = key
            par = parents.get(key)
            kept[key] = not (
                par is not None and len(norm[k][ci]) == len(norm[par[0]][par[1]])
            )

    def kept_children(key):
        out = []
        for child in children_of[key]:
            if kept[child]:
                out.append(child)
            else:
                out.extend(kept_children(child))
        return out

    # breadth-first numbering over kept nodes
    order = []
    ids = {}
    queue = [(0, 0)]
    while queue:
        key = queue.pop(0)
        ids[key] = len(order)
        order.append(key)
        queue.extend(kept_children(key))

    num_nodes = len(order)
    cells_arr = [norm[k][ci] for (k, ci) in order]
    contiguous = all(c[-1] - c[0] + 1 == len(c) for c in cells_arr)
    ns_lo = np.array([int(c[0]) for c in cells_arr], np.int64)
    ns_hi = np.array([int(c[-1]) for c in cells_arr], np.int64)
    level = np.array([k for (k, _) in order], np.int32)
    parent = np.full(num_nodes, -1, np.int64)
    child_count = np.zeros(num_nodes, np.int32)
    kidlists = []
    for key in order:
        kids = [ids[c] for c in kept_children(key)]
        kidlists.append(kids)
        child_count[ids[key]] = len(kids)
        for c in kids:
            parent[c] = ids[key]
    child_first = np.zeros(num_nodes, np.int64)
    child_first[1:] = np.cumsum(child_count.astype(np.int64))[:-1]
    child_list = np.empty(int(child_count.sum()), np.int64)
    for i, kids in enumerate(kidlists):
        child_list[child_first[i] : child_first[i] + len(kids)] = kids

    rows = _leaf_rows(algebra, system, init)
    vals = np.empty((num_nodes, algebra.value_width))
    for i in range(num_nodes - 1, -1, -1):
        if child_count[i] == 0:
            members = cells_arr[i]
            acc = rows[members[0]].copy()
            for x in members[1:]:
                acc = algebra.combine(acc, rows[x])
            vals[i] = acc
        else:
            f = child_first[i]
            acc = vals[child_list[f]].copy()
            for k in range(1, child_count[i]):
                acc = algebra.combine(acc, vals[child_list[f + k]])
            vals[i] = acc
    pend = _identity_rows(algebra, num_nodes)

    return PartitionTree(
        algebra,
        system,
        "hierarchy",
        contiguous,
        ns_lo,
        ns_hi,
        child_first,
        child_count,
        child_list,
        vals,
        pend,
        parent=parent,
        level=level,
        cells=None if contiguous else cells_arr,
        chains_preserved=preserve_chains,
    )


# ---------------------------------------------------------------------------
# snapshots: little-endian, versioned, deterministic


def write_tree(f, tree):
    zw = tree.algebra.value_width
    sw = tree.algebra.update_width
    d = 0 if tree.bbox_lo is None else tree.bbox_lo.shape[1]
    flags = (1 if tree.contiguous else 0) | (2 if tree.chains_preserved else 0)
    f.write(_MAGIC)
    f.write(
        struct.pack(
            "<IBBBBHqq",
            1,
            _KIND_CODE[tree.kind],
            flags,
            zw,
            sw,
            d,
            tree.n,
            tree.num_nodes,
        )
    )
    f.write(struct.pack("<q", len(tree.child_list)))
    f.write(tree.child_count.astype("<i4").tobytes())
    f.write(tree.child_list.astype("<i8").tobytes())
    if tree.kind == "kd":
        f.write(tree.perm.astype("<i8").tobytes())
    if tree.kind == "hierarchy":
        f.write(tree.parent.astype("<i8").tobytes())
        f.write(tree.level.astype("<i4").tobytes())
    if tree.kind == "kd":
        rec = np.zeros(
            tree.num_nodes,
            dtype=np.dtype(
                [
                    ("tag", "u1"),
                    ("start", "<i8"),
                    ("end", "<i8"),
                    ("blo", "<f8", (d,)),
                    ("bhi", "<f8", (d,)),
                    ("val", "<f8", (zw,)),
                    ("pend", "<f8", (sw,)),
                ],
                align=False,
            ),
        )
        rec["tag"] = 1
        rec["start"] = tree.ns_lo
        rec["end"] = tree.ns_hi
        rec["blo"] = tree.bbox_lo
        rec["bhi"] = tree.bbox_hi
        rec["val"] = tree.vals
        rec["pend"] = tree.pend
        f.write(rec.tobytes())
    elif tree.cells is None:
        rec = np.zeros(
            tree.num_nodes,
            dtype=np.dtype(
                [
                    ("tag", "u1"),
                    ("lo", "<i8"),
                    ("hi", "<i8"),
                    ("val", "<f8", (zw,)),
                    ("pend", "<f8", (sw,)),
                ],
                align=False,
            ),
        )
        rec["tag"] = 0
        rec["lo"] = tree.ns_lo
        rec["hi"] = tree.ns_hi
        rec["val"] = tree.vals
        rec["pend"] = tree.pend
        f.write(rec.tobytes())
    else:
        for i in range(tree.num_nodes):
            members = tree.cells[i]
            f.write(struct.pack("<BI", 2, len(members)))
            f.write(members.astype("<i8").tobytes())
            f.write(tree.vals[i].astype("<f8").tobytes())
            f.write(tree.pend[i].astype("<f8").tobytes())


def read_tree(f, algebra, system):
    magic = f.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad snapshot magic {magic!r}")
    version, kind_code, flags, zw, sw, d, n, num_nodes = struct.unpack(
        "<IBBBBHqq", f.read(struct.calcsize("<IBBBBHqq"))
    )
    if version != 1:
        raise ValueError(f"unsupported snapshot version {version}")
    if zw != algebra.value_width or sw != algebra.update_width:
        raise ValueError("snapshot widths do not match the algebra")
    if n != system.n:
        raise ValueError("snapshot ground set does not match the system")
    kind = _KIND_NAME[kind_code]
    contiguous = bool(flags & 1)
    chains = bool(flags & 2)
    (total_children,) = struct.unpack("<q", f.read(8))
    child_count = np.frombuffer(f.read(4 * num_nodes), "<i4").astype(np.int32)
    child_list = np.frombuffer(f.read(8 * total_children), "<i8").astype(np.int64)
    child_first = np.zeros(num_nodes, np.int64)
    child_first[1:] = np.cumsum(child_count.astype(np.int64))[:-1]
    perm = parent = level = None
    if kind == "kd":
        perm = np.frombuffer(f.read(8 * n), "<i8").astype(np.int64)
    if kind == "hierarchy":
        parent = np.frombuffer(f.read(8 * num_nodes), "<i8").astype(np.int64)
        level = np.frombuffer(f.read(4 * num_nodes), "<i4").astype(np.int32)
    bbox_lo = bbox_hi = cells = None
    if kind == "kd":
        dt = np.dtype(
            [
                ("tag", "u1"),
                ("start", "<i8"),
                ("end", "<i8"),
                ("blo", "<f8", (d,)),
                ("bhi", "<f8", (d,)),
                ("val", "<f8", (zw,)),
                ("pend", "<f8", (sw,)),
            ],
            align=False,
        )
        rec = np.frombuffer(f.read(dt.itemsize * num_nodes), dt)
        ns_lo = rec["start"].astype(np.int64)
        ns_hi = rec["end"].astype(np.int64)
        bbox_lo = rec["blo"].astype(float)
        bbox_hi = rec["bhi"].astype(float)
        vals = rec["val"].astype(float).reshape(num_nodes, zw)
        pend = rec["pend"].astype(float).reshape(num_nodes, sw)
    elif contiguous or kind == "segment":
        dt = np.dtype(
            [
                ("tag", "u1"),
                ("lo", "<i8"),
                ("hi", "<i8"),
                ("val", "<f8", (zw,)),
                ("pend", "<f8", (sw,)),
            ],
            align=False,
        )
        rec = np.frombuffer(f.read(dt.itemsize * num_nodes), dt)
        ns_lo = rec["lo"].astype(np.int64)
        ns_hi = rec["hi"].astype(np.int64)
        vals = rec["val"].astype(float).reshape(num_nodes, zw)
        pend = rec["pend"].astype(float).reshape(num_nodes, sw)
    else:
        cells = []
        ns_lo = np.empty(num_nodes, np.int64)
        ns_hi = np.empty(num_nodes, np.int64)
        vals = np.empty((num_nodes, zw))
        pend = np.empty((num_nodes, sw))
        for i in range(num_nodes):
            tag, ln = struct.unpack("<BI", f.read(5))
            if tag != 2:
                raise ValueError("corrupt snapshot (unexpected node tag)")
            members = np.frombuffer(f.read(8 * ln), "<i8").astype(np.int64)
            cells.append(members)
            vals[i] = np.frombuffer(f.read(8 * zw), "<f8")
            pend[i] = np.frombuffer(f.read(8 * sw), "<f8")
        ns_lo[:] = [c[0] for c in cells]
        ns_hi[:] = [c[-1] for c in cells]

    return PartitionTree(
        algebra,
        system,
        kind,
        contiguous,
        ns_lo,
        ns_hi,
        child_first,
        child_count,
        child_list,
        vals,
        pend,
        perm=perm,
        bbox_lo=bbox_lo,
        bbox_hi=bbox_hi,
        parent=parent,
        level=level,
        cells=cells,
        chains_preserved=chains,
    )
