"""Weight algebras: the value/update structures a lazy partition tree works over.

An algebra bundles

* a commutative monoid of node values  -- ``combine`` with neutral ``zero``,
* a group of updates                   -- ``compose`` / ``inverse`` with neutral
  ``identity``,
* an action of updates on values       -- ``apply``,

subject to ``apply(s, combine(z1, z2)) == combine(apply(s, z1), apply(s, z2))``.
Distributivity is the whole point: it lets a tree apply one update to an
internal node's aggregate instead of to every leaf below it, and park pending
updates on nodes ("lazy propagation").

Values and updates are small float64 numpy vectors of fixed per-algebra widths,
so one data layout feeds both the pure-python tree walker and the compiled
kernels.  Scalar instances use width-1 vectors.
"""

from __future__ import annotations

import math

import numpy as np

# opcodes used by the compiled kernels to inline the right arithmetic
OP_LOG_SUM_ADD = 0
OP_SUM_ADD = 1
OP_POWER_MOMENTS = 2
OP_AFFINE_SUM = 3
OP_SUM_MUL = 4

NEG_INF = float("-inf")


def _lse2(a, b):
    """log(e^a + e^b) with an explicit branch for the -inf neutral element."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def alpha_action(s, g):
    """Shift a moment vector (sum of 1, w, w^2, w^3 over a block) by w -> w + s.

    The constant terms are scaled by the block size g[0], which is what makes
    the action distribute over blockwise addition:

    >>> list(alpha_action(2.0, np.array([1.0, 3.0, 5.0, 9.0])))
    [1.0, 5.0, 21.0, 83.0]
    >>> list(alpha_action(1.0, np.array([1.0, 0.0, 0.0, 0.0])))
    [1.0, 1.0, 1.0, 1.0]
    """
    g0, g1, g2, g3 = g
    return np.array(
        [
            g0,
            g1 + s * g0,
            g2 + 2.0 * s * g1 + s * s * g0,
            g3 + 3.0 * s * g2 + 3.0 * s * s * g1 + s * s * s * g0,
        ]
    )


class WeightAlgebra:
    """Base class; concrete instances fill in widths, opcode and operations."""

    name = "abstract"
    value_width = 1
    update_width = 1
    opcode = None  # set when a compiled kernel exists for this algebra

    def zero(self):
        raise NotImplementedError

    def identity(self):
        raise NotImplementedError

    def combine(self, z1, z2):
        raise NotImplementedError

    def apply_update(self, s, z):
        raise NotImplementedError

    def compose(self, s1, s2):
        raise NotImplementedError

    def inverse(self, s):
        raise NotImplementedError

    def is_identity(self, s):
        return bool(np.array_equal(s, self.identity()))

    # vectorized leaf->root build helper; default pairwise loop is fine for
    # everything except huge interval trees, which override-worthy instances
    # speed up below.
    def combine_arrays(self, za, zb):
        out = np.empty_like(za)
        for i in range(za.shape[0]):
            out[i] = self.combine(za[i], zb[i])
        return out

    # sampling for randomized law checks
    def sample_value(self, rng):
        raise NotImplementedError

    def sample_update(self, rng):
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__}>"


class SumMul(WeightAlgebra):
    """Values: nonnegative reals under +.  Updates: positive reals under *."""

    name = "sum_mul"
    opcode = OP_SUM_MUL

    def zero(self):
        return np.zeros(1)

    def identity(self):
        return np.ones(1)

    def combine(self, z1, z2):
        return z1 + z2

    def apply_update(self, s, z):
        self._check(s)
        return s * z

    def compose(self, s1, s2):
        self._check(s1)
        self._check(s2)
        return s1 * s2

    def inverse(self, s):
        self._check(s)
        return 1.0 / s

    @staticmethod
    def _check(s):
        if s[0] <= 0.0:
            raise ValueError(f"multiplicative update must be positive, got {s[0]}")

    def combine_arrays(self, za, zb):
        return za + zb

    def sample_value(self, rng):
        return np.array([rng.uniform(0.0, 1e3)])

    def sample_update(self, rng):
        return np.array([math.exp(rng.uniform(-3.0, 3.0))])


class LogSumAdd(WeightAlgebra):
    """SumMul pushed through log: combine is log-sum-exp, updates add.

    The neutral value is -inf (log of 0); apply keeps it fixed since
    -inf + s == -inf.

    >>> LogSumAdd().combine(np.zeros(1), np.zeros(1))[0]  # log(1 + 1)
    0.6931471805599453
    """

    name = "log_sum_add"
    opcode = OP_LOG_SUM_ADD

    def zero(self):
        return np.full(1, NEG_INF)

    def identity(self):
        return np.zeros(1)

    def combine(self, z1, z2):
        return np.array([_lse2(z1[0], z2[0])])

    def apply_update(self, s, z):
        return z + s

    def compose(self, s1, s2):
        return s1 + s2

    def inverse(self, s):
        return -s

    def combine_arrays(self, za, zb):
        return np.logaddexp(za, zb)

    def sample_value(self, rng):
        if rng.uniform() < 0.05:
            return np.full(1, NEG_INF)
        return np.array([rng.uniform(-50.0, 50.0)])

    def sample_update(self, rng):
        return np.array([rng.uniform(-20.0, 20.0)])


class SumAddVec(WeightAlgebra):
    """Blockwise vector sums where updates add a vector to every leaf.

    Component 0 is a count channel: leaves store 1 there, so an internal
    node's component 0 is its block size.  A lazy "add S to every leaf"
    lands on an aggregate as ``z + z[0] * S`` -- the add scaled by block
    size -- which is what makes the action distribute over block sums.
    Updates must leave the count channel alone (S[0] == 0); with that
    restriction they form a group under +.
    """

    name = "sum_add_vec"
    opcode = OP_SUM_ADD

    def __init__(self, width=2):
        if width < 2:
            raise ValueError("need the count channel plus at least one payload")
        self.value_width = width
        self.update_width = width

    def zero(self):
        return np.zeros(self.value_width)

    def identity(self):
        return np.zeros(self.update_width)

    def combine(self, z1, z2):
        return z1 + z2

    def apply_update(self, s, z):
        self._check(s)
        return z + z[0] * s

    def compose(self, s1, s2):
        self._check(s1)
        self._check(s2)
        return s1 + s2

    def inverse(self, s):
        return -s

    @staticmethod
    def _check(s):
        if s[0] != 0.0:
            raise ValueError("updates may not touch the count channel (S[0] must be 0)")

    def combine_arrays(self, za, zb):
        return za + zb

    def sample_value(self, rng):
        z = rng.uniform(-1e3, 1e3, self.value_width)
        z[0] = float(rng.integers(1, 6))
        return z

    def sample_update(self, rng):
        s = rng.uniform(-1e2, 1e2, self.update_width)
        s[0] = 0.0
        return s

    def __repr__(self):
        return f"<SumAddVec({self.value_width})>"


class PowerMoments(WeightAlgebra):
    """Blockwise sums of (1, w, w^2, w^3) with the scaled shift action.

    A leaf holds (1, w, w^2, w^3); an internal node holds the componentwise
    sum over its block, whose first entry is the block size.
    Shifting every w in the block by s maps the vector through
    ``alpha_action`` -- a linear map, hence distributive over block sums.
    """

    name = "power_moments"
    value_width = 4
    update_width = 1
    opcode = OP_POWER_MOMENTS

    def zero(self):
        return np.zeros(4)

    def identity(self):
        return np.zeros(1)

    def combine(self, z1, z2):
        return z1 + z2

    def apply_update(self, s, z):
        return alpha_action(s[0], z)

    def compose(self, s1, s2):
        return s1 + s2

    def inverse(self, s):
        return -s

    def combine_arrays(self, za, zb):
        return za + zb

    def sample_value(self, rng):
        w = rng.uniform(-3.0, 3.0)
        g0 = float(rng.integers(1, 5))
        # a plausible block vector plus noise; laws are linear identities so
        # any 4-vector must satisfy them
        base = np.array([g0, g0 * w, g0 * w * w, g0 * w**3])
        return base + rng.uniform(-1.0, 1.0, 4)

    def sample_update(self, rng):
        return np.array([rng.uniform(-3.0, 3.0)])


class AffineSum(WeightAlgebra):
    """Pairs (weighted sum, coefficient sum); updates shift all w by s.

    apply(s, (a, c)) = (a + s*c, c): shifting every w_x by s moves the
    weighted sum sum(c_x w_x) by s * sum(c_x).
    """

    name = "affine_sum"
    value_width = 2
    update_width = 1
    opcode = OP_AFFINE_SUM

    def zero(self):
        return np.zeros(2)

    def identity(self):
        return np.zeros(1)

    def combine(self, z1, z2):
        return z1 + z2

    def apply_update(self, s, z):
        return np.array([z[0] + s[0] * z[1], z[1]])

    def compose(self, s1, s2):
        return s1 + s2

    def inverse(self, s):
        return -s

    def combine_arrays(self, za, zb):
        return za + zb

    def sample_value(self, rng):
        return rng.uniform(-1e2, 1e2, 2)

    def sample_update(self, rng):
        return np.array([rng.uniform(-10.0, 10.0)])


def _close(a, b, tol):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    for x, y in zip(a.ravel(), b.ravel()):
        if x == y:  # covers matching infinities
            continue
        if not (math.isfinite(x) and math.isfinite(y)):
            return False
        if abs(x - y) > tol * max(1.0, abs(x), abs(y)):
            return False
    return True


def check_algebra_laws(algebra, sample_count=1000, seed=0, tol=1e-9):
    """Randomized check of the monoid/group/action laws.

    Returns a list of violation descriptions; an empty list means every
    sampled case satisfied every law within ``tol`` (relative).
    """
    rng = np.random.default_rng(seed)
    failures = []

    def note(law, detail):
        if len(failures) < 25:
            failures.append(f"{algebra!r} {law}: {detail}")
        elif len(failures) == 25:
            failures.append("... further violations suppressed")

    for case in range(sample_count):
        z1 = algebra.sample_value(rng)
        z2 = algebra.sample_value(rng)
        z3 = algebra.sample_value(rng)
        s1 = algebra.sample_update(rng)
        s2 = algebra.sample_update(rng)
        s3 = algebra.sample_update(rng)

        if not _close(algebra.combine(z1, z2), algebra.combine(z2, z1), tol):
            note("combine commutativity", f"case {case}")
        if not _close(
            algebra.combine(algebra.combine(z1, z2), z3),
            algebra.combine(z1, algebra.combine(z2, z3)),
            tol,
        ):
            note("combine associativity", f"case {case}")
        if not _close(algebra.combine(z1, algebra.zero()), z1, tol):
            note("zero neutrality", f"case {case}")
        if not _close(algebra.apply_update(algebra.identity(), z1), z1, tol):
            note("identity action", f"case {case}")
        if not _close(
            algebra.apply_update(s1, algebra.apply_update(s2, z1)),
            algebra.apply_update(algebra.compose(s1, s2), z1),
            tol,
        ):
            note("action composition", f"case {case}")
        if not _close(
            algebra.compose(algebra.compose(s1, s2), s3),
            algebra.compose(s1, algebra.compose(s2, s3)),
            tol,
        ):
            note("compose associativity", f"case {case}")
        if not _close(
            algebra.apply_update(s1, algebra.combine(z1, z2)),
            algebra.combine(algebra.apply_update(s1, z1), algebra.apply_update(s1, z2)),
            tol,
        ):
            note("distributivity", f"case {case}")
        if not _close(
            algebra.compose(s1, algebra.inverse(s1)), algebra.identity(), tol
        ):
            note("inverse composition", f"case {case}")
        if not _close(
            algebra.apply_update(algebra.inverse(s1), algebra.apply_update(s1, z1)),
            z1,
            tol,
        ):
            note("inverse action", f"case {case}")

    return failures


ALL_ALGEBRAS = (SumMul(), LogSumAdd(), SumAddVec(2), PowerMoments(), AffineSum())
