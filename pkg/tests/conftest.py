import numpy as np
import pytest

from pmtree.algebra import ALL_ALGEBRAS
from pmtree.partition_tree import build_segment_tree, range_query, range_update
from pmtree.set_system import Interval, build_interval_system


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Touch every compiled kernel opcode once so no test pays jit latency."""
    system = build_interval_system(32)
    rng = np.random.default_rng(0)
    for algebra in ALL_ALGEBRAS:
        tree = build_segment_tree(system, algebra)
        range_query(tree, Interval(3, 19))
        range_update(tree, Interval(3, 19), algebra.sample_update(rng))
        range_query(tree, Interval(0, 31))


def interior_power_weights(rng, n, b):
    """Random weights whose 3/2-power optimum keeps every price positive.

    Positivity needs the weight spread to stay well under 1.5*b/sqrt(n), so
    the draw scale shrinks with n.
    """
    from pmtree.oracle import numeric_power_cost

    for _ in range(100):
        w = rng.normal(0.0, 0.35 * b / np.sqrt(n), n)
        if not numeric_power_cost(w, b).boundary:
            return w
    raise RuntimeError("interior sampler exhausted its draw budget")
