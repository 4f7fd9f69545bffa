"""Compiled fast path for interval-range tree operations.

The generic walker in ``partition_tree`` handles every algebra, event kind,
and tree shape.  These kernels duplicate exactly one hot case -- trees whose
node-sets are contiguous index ranges, hit by interval events -- as iterative
numba routines over the flat node arrays.  They are selected automatically
when numba imports cleanly; set ``PMTREE_PURE_PYTHON=1`` to force the
pure-python walker everywhere (results agree; speed does not).

Opcode meanings match ``pmtree.algebra``: 0 log-sum-exp/add, 1 counted
vector add, 2 moment shift, 3 affine sum, 4 sum/multiply.
"""

from __future__ import annotations

import math
import os

import numpy as np

PURE_PYTHON = os.environ.get("PMTREE_PURE_PYTHON", "0") not in ("", "0")

HAS_NUMBA = False
if not PURE_PYTHON:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - exercised only without numba
        HAS_NUMBA = False

if not HAS_NUMBA:

    def njit(*args, **kwargs):  # pragma: no cover - stub so decorators no-op
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_NEG_INF = -math.inf


@njit(cache=True)
def _apply_into(op, val, s):
    """val <- apply(s, val), in place on a 1-d row."""
    if op == 0:
        val[0] += s[0]
    elif op == 1:
        c = val[0]
        for j in range(1, val.shape[0]):
            val[j] += c * s[j]
    elif op == 2:
        ss = s[0]
        g0 = val[0]
        g1 = val[1]
        g2 = val[2]
        val[1] = g1 + ss * g0
        val[2] = g2 + 2.0 * ss * g1 + ss * ss * g0
        val[3] = val[3] + 3.0 * ss * g2 + 3.0 * ss * ss * g1 + ss * ss * ss * g0
    elif op == 3:
        val[0] += s[0] * val[1]
    else:
        val[0] *= s[0]


@njit(cache=True)
def _compose_into(op, dst, s):
    """dst <- s o dst (all instance update groups are commutative)."""
    if op == 4:
        dst[0] *= s[0]
    else:
        for j in range(dst.shape[0]):
            dst[j] += s[j]


@njit(cache=True)
def _is_identity(op, s):
    if op == 4:
        return s[0] == 1.0
    for j in range(s.shape[0]):
        if s[j] != 0.0:
            return False
    return True


@njit(cache=True)
def _reset_identity(op, s):
    if op == 4:
        s[0] = 1.0
    else:
        for j in range(s.shape[0]):
            s[j] = 0.0


@njit(cache=True)
def _combine_into(op, acc, v):
    """acc <- acc (+) v."""
    if op == 0:
        a = acc[0]
        b = v[0]
        if a == _NEG_INF:
            acc[0] = b
        elif b == _NEG_INF:
            pass
        else:
            m = a if a > b else b
            acc[0] = m + math.log(math.exp(a - m) + math.exp(b - m))
    else:
        for j in range(acc.shape[0]):
            acc[j] += v[j]


# Walk invariant (mirrors the generic python walker): ``vals[i]`` is the
# true aggregate of i's subtree except for updates still pending in i's
# proper ancestors; ``pend[i]`` is owed to i's strict descendants and is
# already reflected in ``vals[i]``.  Updates flush pendings one level down
# while descending, queries stay read-only by composing ancestor pendings
# along the path, and children that miss the event are pruned at the
# parent without being visited.
#
# ``meta`` packs the per-node scalars every visit reads -- columns
# (range lo, range hi, first-child slot, child count) -- so one cache line
# covers them all; the walks are memory-bound, not compute-bound.


@njit(cache=True)
def _push(op, node, vals, pend, meta, child_list):
    if not _is_identity(op, pend[node]):
        fc = meta[node, 2]
        for k in range(meta[node, 3]):
            c = child_list[fc + k]
            _apply_into(op, vals[c], pend[node])
            if meta[c, 3] > 0:
                _compose_into(op, pend[c], pend[node])
        _reset_identity(op, pend[node])


@njit(cache=True)
def update_interval(op, meta, child_list, vals, pend, elo, ehi, s):
    """Range update on a contiguous-range tree; returns nodes visited."""
    if ehi < elo or meta[0, 1] < elo or meta[0, 0] > ehi:
        return 1  # inspected the root; the event misses the whole tree
    stack = np.empty(1024, np.int64)
    phase = np.empty(1024, np.uint8)
    stack[0] = 0
    phase[0] = 0
    sp = 1
    visits = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if phase[sp] == 1:
            fc = meta[node, 2]
            cc = meta[node, 3]
            first = child_list[fc]
            for j in range(vals.shape[1]):
                vals[node, j] = vals[first, j]
            for k in range(1, cc):
                _combine_into(op, vals[node], vals[child_list[fc + k]])
            continue
        visits += 1
        if elo <= meta[node, 0] and meta[node, 1] <= ehi:
            _apply_into(op, vals[node], s)
            if meta[node, 3] > 0:
                _compose_into(op, pend[node], s)
            continue
        cc = meta[node, 3]
        if cc == 0:
            return -1  # event cuts through a leaf block
        _push(op, node, vals, pend, meta, child_list)
        stack[sp] = node
        phase[sp] = 1
        sp += 1
        fc = meta[node, 2]
        for k in range(cc - 1, -1, -1):
            c = child_list[fc + k]
            if meta[c, 1] < elo or meta[c, 0] > ehi:
                continue
            stack[sp] = c
            phase[sp] = 0
            sp += 1
    return visits


@njit(cache=True)
def buy_interval(op, meta, child_list, vals, pend, elo, ehi, s, out):
    """Fused query-then-update in one walk; ``out`` gets the pre-update aggregate.

    Trades read an event's aggregate and immediately write the same node set,
    so sharing the walk halves their memory traffic.
    """
    if op == 0:
        out[0] = _NEG_INF
    else:
        for j in range(out.shape[0]):
            out[j] = 0.0
    if ehi < elo or meta[0, 1] < elo or meta[0, 0] > ehi:
        return 1  # inspected the root; the event misses the whole tree
    stack = np.empty(1024, np.int64)
    phase = np.empty(1024, np.uint8)
    stack[0] = 0
    phase[0] = 0
    sp = 1
    visits = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if phase[sp] == 1:
            fc = meta[node, 2]
            cc = meta[node, 3]
            first = child_list[fc]
            for j in range(vals.shape[1]):
                vals[node, j] = vals[first, j]
            for k in range(1, cc):
                _combine_into(op, vals[node], vals[child_list[fc + k]])
            continue
        visits += 1
        if elo <= meta[node, 0] and meta[node, 1] <= ehi:
            _combine_into(op, out, vals[node])
            _apply_into(op, vals[node], s)
            if meta[node, 3] > 0:
                _compose_into(op, pend[node], s)
            continue
        cc = meta[node, 3]
        if cc == 0:
            return -1  # event cuts through a leaf block
        _push(op, node, vals, pend, meta, child_list)
        stack[sp] = node
        phase[sp] = 1
        sp += 1
        fc = meta[node, 2]
        for k in range(cc - 1, -1, -1):
            c = child_list[fc + k]
            if meta[c, 1] < elo or meta[c, 0] > ehi:
                continue
            stack[sp] = c
            phase[sp] = 0
            sp += 1
    return visits


@njit(cache=True)
def query_interval(op, meta, child_list, vals, pend, elo, ehi, out):
    """Read-only range query; fills ``out``, returns visits."""
    if op == 0:
        out[0] = _NEG_INF
    else:
        for j in range(out.shape[0]):
            out[j] = 0.0
    if ehi < elo or meta[0, 1] < elo or meta[0, 0] > ehi:
        return 1  # inspected the root; the event misses the whole tree
    sw = pend.shape[1]
    vw = vals.shape[1]
    stack = np.empty(1024, np.int64)
    accs = np.empty((1024, sw))
    cur = np.empty(sw)
    row = np.empty(vw)
    stack[0] = 0
    _reset_identity(op, accs[0])
    sp = 1
    visits = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        for j in range(sw):
            cur[j] = accs[sp, j]
        visits += 1
        if elo <= meta[node, 0] and meta[node, 1] <= ehi:
            for j in range(vw):
                row[j] = vals[node, j]
            _apply_into(op, row, cur)
            _combine_into(op, out, row)
            continue
        cc = meta[node, 3]
        if cc == 0:
            return -1  # event cuts through a leaf block
        if not _is_identity(op, pend[node]):
            _compose_into(op, cur, pend[node])
        fc = meta[node, 2]
        for k in range(cc - 1, -1, -1):
            c = child_list[fc + k]
            if meta[c, 1] < elo or meta[c, 0] > ehi:
                continue
            stack[sp] = c
            for j in range(sw):
                accs[sp, j] = cur[j]
            sp += 1
    return visits


def warm_up():
    """Trigger jit compilation on a two-leaf toy so timed paths run hot."""
    if not HAS_NUMBA:
        return
    meta = np.array(
        [[0, 1, 0, 2], [0, 0, 2, 0], [1, 1, 2, 0]], dtype=np.int32
    )  # columns: lo, hi, first child slot, child count
    child_list = np.array([1, 2], dtype=np.int32)
    for op, zw, sw in ((0, 1, 1), (1, 2, 2), (2, 4, 1), (3, 2, 1), (4, 1, 1)):
        vals = np.zeros((3, zw))
        if op == 1:
            vals[:, 0] = 1.0
        elif op == 2:
            vals[:, 0] = 1.0
        elif op == 3:
            vals[:, 1] = 1.0
        pend = np.zeros((3, sw))
        if op == 4:
            pend[:] = 1.0
        s = np.zeros(sw)
        if op == 4:
            s[0] = 2.0
        elif op == 1:
            s[1] = 1.0
        else:
            s[0] = 1.0
        out = np.zeros(zw)
        update_interval(op, meta, child_list, vals, pend, 0, 0, s)
        query_interval(op, meta, child_list, vals, pend, 0, 1, out)
        buy_interval(op, meta, child_list, vals, pend, 0, 0, s, out)
