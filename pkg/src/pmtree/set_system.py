"""Outcome spaces, tradable event families, and node-set classification.

A set system is a ground set of outcomes (indexed 0..n-1, possibly carrying
coordinates) together with the family of events traders may reference.  The
tree engine never enumerates an event's members; everything goes through

* ``membership(system, event, x)``  -- is outcome x in the event, and
* ``classify(system, event, ns)``   -- event vs. a node's outcome block:
  CONTAINS / DISJOINT / CROSSES.

``classify`` is allowed to be conservative (returning CROSSES when a sharper
answer exists) but must never mislabel CONTAINS or DISJOINT; correctness of
the lazy tree only needs that much.

Interval endpoints are closed and may be non-integral: they are compared
directly against integer outcome coordinates, so [4.5, 13.2] behaves like
[5, 13].  Halfspace boundaries count as inside.  Degenerate (empty) events
are legal everywhere and simply classify as DISJOINT.
"""

from __future__ import annotations

import csv
import itertools
import json
import math

import numpy as np

CONTAINS = "contains"
DISJOINT = "disjoint"
CROSSES = "crosses"


# ---------------------------------------------------------------------------
# events


class Interval:
    """Closed interval of outcome indices on a line."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        self.lo = float(lo)
        self.hi = float(hi)

    def __repr__(self):
        return f"Interval({self.lo}, {self.hi})"


class Box:
    """Axis-aligned closed box in coordinate space."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != self.hi.shape:
            raise ValueError("box corners must have the same dimension")

    def __repr__(self):
        return f"Box({self.lo.tolist()}, {self.hi.tolist()})"


class Halfspace:
    """{x : beta . x + beta0 >= 0}; the boundary is inside."""

    __slots__ = ("beta", "beta0")

    def __init__(self, beta, beta0):
        self.beta = np.asarray(beta, dtype=float)
        self.beta0 = float(beta0)

    def __repr__(self):
        return f"Halfspace({self.beta.tolist()}, {self.beta0})"


class Explicit:
    """An explicit, sorted set of outcome indices."""

    __slots__ = ("members",)

    def __init__(self, members):
        arr = np.unique(np.asarray(list(members), dtype=np.int64))
        self.members = arr

    def __len__(self):
        return len(self.members)

    def __repr__(self):
        if len(self.members) <= 8:
            return f"Explicit({self.members.tolist()})"
        return f"Explicit(<{len(self.members)} outcomes>)"


# ---------------------------------------------------------------------------
# node-sets (blocks of outcomes owned by tree nodes)


class IndexRange:
    """Closed block [lo, hi] of outcome indices."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        self.lo = int(lo)
        self.hi = int(hi)

    @property
    def size(self):
        return self.hi - self.lo + 1

    def __repr__(self):
        return f"IndexRange({self.lo}, {self.hi})"


class ExplicitSet:
    """A block given by a sorted id list (hierarchy cells, k-d leaves)."""

    __slots__ = ("members",)

    def __init__(self, members):
        self.members = np.asarray(members, dtype=np.int64)

    @property
    def size(self):
        return len(self.members)

    def __repr__(self):
        return f"ExplicitSet({self.members.tolist()})"


class PointBlock:
    """A block of point ids with its bounding box (k-d tree nodes)."""

    __slots__ = ("ids", "bbox_lo", "bbox_hi")

    def __init__(self, ids, bbox_lo, bbox_hi):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.bbox_lo = np.asarray(bbox_lo, dtype=float)
        self.bbox_hi = np.asarray(bbox_hi, dtype=float)

    @property
    def size(self):
        return len(self.ids)

    def __repr__(self):
        return f"PointBlock(<{len(self.ids)} pts> bbox={self.bbox_lo.tolist()}..{self.bbox_hi.tolist()})"


# ---------------------------------------------------------------------------
# systems


class SetSystem:
    kind = "abstract"
    n = 0

    def __repr__(self):
        return f"<{type(self).__name__} n={self.n}>"


class IntervalSystem(SetSystem):
    """Outcomes 0..n-1 on a line; events are intervals or explicit sets."""

    kind = "interval"

    def __init__(self, n):
        n = int(n)
        if n <= 0:
            raise ValueError("need at least one outcome")
        self.n = n


class GridSystem(SetSystem):
    """The lattice {0..m-1}^d, row-major flattened; coordinate events."""

    kind = "grid"

    def __init__(self, m, d):
        self.m = int(m)
        self.d = int(d)
        if self.m <= 0 or self.d <= 0:
            raise ValueError("grid side and dimension must be positive")
        self.n = self.m**self.d

    def coords(self, x):
        return np.array(np.unravel_index(int(x), (self.m,) * self.d), dtype=float)

    def all_points(self):
        idx = np.arange(self.n)
        return np.stack(np.unravel_index(idx, (self.m,) * self.d), axis=1).astype(float)


class PointCloudSystem(SetSystem):
    """Arbitrary points in R^d; coordinate events."""

    kind = "points"

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("need a nonempty (n, d) point array")
        self.points = pts
        self.n = pts.shape[0]
        self.d = pts.shape[1]

    def coords(self, x):
        return self.points[int(x)]

    def all_points(self):
        return self.points


class ExplicitSystem(SetSystem):
    """A finite ground set with a dictionary of named tradable sets."""

    kind = "explicit"

    def __init__(self, n, named_sets):
        self.n = int(n)
        self.named_sets = {}
        for name, members in named_sets.items():
            arr = np.unique(np.asarray(list(members), dtype=np.int64))
            if len(arr) and (arr[0] < 0 or arr[-1] >= self.n):
                raise ValueError(f"set {name!r} references outcomes outside 0..{self.n - 1}")
            self.named_sets[str(name)] = arr

    def event(self, name):
        return Explicit(self.named_sets[name])


# ---------------------------------------------------------------------------
# builders and ingestion


def build_interval_system(n):
    return IntervalSystem(n)


def build_grid_system(m, d):
    return GridSystem(m, d)


def build_point_cloud_system(points):
    return PointCloudSystem(points)


def build_explicit_system(n, named_sets):
    return ExplicitSystem(n, named_sets)


def load_points_csv(path):
    """Read one point per row (float columns) and build a point-cloud system."""
    rows = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if not rows:  # tolerate a single header line
                    continue
                raise
    return build_point_cloud_system(np.asarray(rows))


def load_explicit_json(path):
    """Read {"n": ..., "sets": {name: [indices...]}} into an explicit system."""
    with open(path) as f:
        doc = json.load(f)
    return build_explicit_system(doc["n"], doc["sets"])


# combinatorial fixtures over rankings/bitstrings; ground sets stay tiny
# (n = K! or 2^K), so K is capped.


def pairing_system(K):
    """Outcomes: permutations of 0..K-1 (lexicographic).  Sets: sigma ranks i above j."""
    if not 2 <= K <= 7:
        raise ValueError("K must be between 2 and 7")
    perms = list(itertools.permutations(range(K)))
    pos = [{item: r for r, item in enumerate(p)} for p in perms]
    sets = {}
    for i in range(K):
        for j in range(K):
            if i != j:
                sets[f"{i}>{j}"] = [x for x, p in enumerate(pos) if p[i] < p[j]]
    return build_explicit_system(len(perms), sets)


def top_l_system(K, L):
    """Outcomes: permutations of 0..K-1.  Sets: item i lands in the first L ranks."""
    if not 2 <= K <= 7:
        raise ValueError("K must be between 2 and 7")
    if not 1 <= L <= K:
        raise ValueError("L must be between 1 and K")
    perms = list(itertools.permutations(range(K)))
    sets = {
        f"top{L}:{i}": [x for x, p in enumerate(perms) if i in p[:L]] for i in range(K)
    }
    return build_explicit_system(len(perms), sets)


def junta_system(K):
    """Outcomes: bitstrings of length K (outcome x has bit i = (x >> i) & 1).

    Sets: bit i is set -- each touches exactly half the ground set.
    """
    if not 1 <= K <= 7:
        raise ValueError("K must be between 1 and 7")
    n = 2**K
    sets = {f"bit{i}": [x for x in range(n) if (x >> i) & 1] for i in range(K)}
    return build_explicit_system(n, sets)


# ---------------------------------------------------------------------------
# membership


def membership(system, event, x):
    """Is outcome ``x`` a member of ``event`` under ``system``?"""
    x = int(x)
    if not 0 <= x < system.n:
        raise IndexError(f"outcome {x} outside 0..{system.n - 1}")
    if isinstance(event, Explicit):
        m = event.members
        k = np.searchsorted(m, x)
        return bool(k < len(m) and m[k] == x)
    if isinstance(event, Interval):
        if not isinstance(system, (IntervalSystem, ExplicitSystem)):
            raise TypeError(f"interval events need a line of outcomes, not {system.kind}")
        return event.lo <= x <= event.hi
    if isinstance(event, (Box, Halfspace)):
        if not isinstance(system, (GridSystem, PointCloudSystem)):
            raise TypeError(f"coordinate events need coordinates, not {system.kind}")
        p = system.coords(x)
        if isinstance(event, Box):
            if len(event.lo) != len(p):
                raise ValueError("event dimension does not match outcome dimension")
            return bool(np.all(event.lo <= p) and np.all(p <= event.hi))
        if len(event.beta) != len(p):
            raise ValueError("event dimension does not match outcome dimension")
        return bool(float(event.beta @ p) + event.beta0 >= 0.0)
    raise TypeError(f"unknown event type {type(event).__name__}")


def _snap(event):
    """Integer endpoints [lo, hi] equivalent to a real interval on index outcomes."""
    lo = math.ceil(event.lo)
    hi = math.floor(event.hi)
    return lo, hi


def _count_in_range(sorted_ids, lo, hi):
    return int(
        np.searchsorted(sorted_ids, hi, side="right")
        - np.searchsorted(sorted_ids, lo, side="left")
    )


# ---------------------------------------------------------------------------
# classification


def classify(system, event, ns):
    """Classify ``event`` against a node block: CONTAINS / DISJOINT / CROSSES.

    CONTAINS means every outcome of the block is in the event; DISJOINT means
    none is.  For bounding-box blocks the answer may be conservatively
    CROSSES.
    """
    if isinstance(ns, IndexRange):
        return _classify_range(event, ns.lo, ns.hi)
    if isinstance(ns, ExplicitSet):
        return _classify_ids(system, event, ns.members)
    if isinstance(ns, PointBlock):
        return _classify_block(system, event, ns.ids, ns.bbox_lo, ns.bbox_hi)
    raise TypeError(f"unknown node-set type {type(ns).__name__}")


def _classify_range(event, blo, bhi):
    size = bhi - blo + 1
    if isinstance(event, Interval):
        lo, hi = _snap(event)
        if lo > hi or hi < blo or lo > bhi:
            return DISJOINT
        if lo <= blo and bhi <= hi:
            return CONTAINS
        return CROSSES
    if isinstance(event, Explicit):
        cnt = _count_in_range(event.members, blo, bhi)
        if cnt == 0:
            return DISJOINT
        if cnt == size:
            return CONTAINS
        return CROSSES
    raise TypeError(
        f"{type(event).__name__} events cannot be classified against index ranges"
    )


def _classify_ids(system, event, ids):
    if isinstance(event, Interval):
        lo, hi = _snap(event)
        cnt = _count_in_range(ids, lo, hi) if lo <= hi else 0
    elif isinstance(event, Explicit):
        cnt = int(np.isin(ids, event.members, assume_unique=True).sum())
    else:
        # coordinate events against an id block: test every member
        cnt = sum(membership(system, event, x) for x in ids)
    if cnt == 0:
        return DISJOINT
    if cnt == len(ids):
        return CONTAINS
    return CROSSES


def _classify_block(system, event, ids, bbox_lo, bbox_hi):
    if isinstance(event, Box):
        if len(event.lo) != len(bbox_lo):
            raise ValueError("event dimension does not match tree dimension")
        if np.all(event.lo <= bbox_lo) and np.all(bbox_hi <= event.hi):
            return CONTAINS
        if np.any(event.hi < bbox_lo) or np.any(event.lo > bbox_hi):
            return DISJOINT
        if len(ids) == 1:  # leaves answer exactly
            return CONTAINS if membership(system, event, ids[0]) else DISJOINT
        return CROSSES
    if isinstance(event, Halfspace):
        if len(event.beta) != len(bbox_lo):
            raise ValueError("event dimension does not match tree dimension")
        # evaluate beta.x + beta0 over box corners; extremes occur at corners
        lo_val = event.beta0 + float(
            np.minimum(event.beta * bbox_lo, event.beta * bbox_hi).sum()
        )
        hi_val = event.beta0 + float(
            np.maximum(event.beta * bbox_lo, event.beta * bbox_hi).sum()
        )
        if lo_val >= 0.0:
            return CONTAINS
        if hi_val < 0.0:
            return DISJOINT
        if len(ids) == 1:
            return CONTAINS if membership(system, event, ids[0]) else DISJOINT
        return CROSSES
    if isinstance(event, Explicit):
        cnt = int(np.isin(ids, event.members, assume_unique=True).sum())
        if cnt == 0:
            return DISJOINT
        if cnt == len(ids):
            return CONTAINS
        return CROSSES
    raise TypeError(
        f"{type(event).__name__} events cannot be classified against point blocks"
    )


def events_overlap(system, e1, e2):
    """Do two events share an outcome?  Exact where geometry allows, else a scan."""
    if isinstance(e1, Interval) and isinstance(e2, Interval):
        lo1, hi1 = _snap(e1)
        lo2, hi2 = _snap(e2)
        lo = max(lo1, lo2, 0)
        hi = min(hi1, hi2, system.n - 1)
        return lo <= hi
    if isinstance(e1, Explicit) and isinstance(e2, Explicit):
        return bool(np.isin(e1.members, e2.members, assume_unique=True).any())
    if isinstance(e1, Explicit) or isinstance(e2, Explicit):
        ex, other = (e1, e2) if isinstance(e1, Explicit) else (e2, e1)
        return any(membership(system, other, x) for x in ex.members)
    # geometric pair without a cheap exact test: scan the ground set
    return any(
        membership(system, e1, x) and membership(system, e2, x) for x in range(system.n)
    )


# ---------------------------------------------------------------------------
# JSON encoding (CLI, snapshots)


def event_to_json(event):
    if isinstance(event, Interval):
        return {"kind": "interval", "lo": event.lo, "hi": event.hi}
    if isinstance(event, Box):
        return {"kind": "box", "lo": event.lo.tolist(), "hi": event.hi.tolist()}
    if isinstance(event, Halfspace):
        return {"kind": "halfspace", "beta": event.beta.tolist(), "beta0": event.beta0}
    if isinstance(event, Explicit):
        return {"kind": "explicit", "members": event.members.tolist()}
    raise TypeError(f"unknown event type {type(event).__name__}")


def event_from_json(doc):
    kind = doc.get("kind")
    if kind == "interval":
        return Interval(doc["lo"], doc["hi"])
    if kind == "box":
        return Box(doc["lo"], doc["hi"])
    if kind == "halfspace":
        return Halfspace(doc["beta"], doc["beta0"])
    if kind == "explicit":
        return Explicit(doc["members"])
    raise ValueError(f"unknown event kind {kind!r}")


def system_to_json(system):
    if isinstance(system, IntervalSystem):
        return {"kind": "interval", "n": system.n}
    if isinstance(system, GridSystem):
        return {"kind": "grid", "m": system.m, "d": system.d}
    if isinstance(system, PointCloudSystem):
        return {"kind": "points", "points": system.points.tolist()}
    if isinstance(system, ExplicitSystem):
        return {
            "kind": "explicit",
            "n": system.n,
            "sets": {k: v.tolist() for k, v in system.named_sets.items()},
        }
    raise TypeError(f"unknown system type {type(system).__name__}")


def system_from_json(doc):
    kind = doc.get("kind")
    if kind == "interval":
        return build_interval_system(doc["n"])
    if kind == "grid":
        return build_grid_system(doc["m"], doc["d"])
    if kind == "points":
        if "csv" in doc:
            return load_points_csv(doc["csv"])
        return build_point_cloud_system(doc["points"])
    if kind == "explicit":
        return build_explicit_system(doc["n"], doc["sets"])
    raise ValueError(f"unknown system kind {kind!r}")
