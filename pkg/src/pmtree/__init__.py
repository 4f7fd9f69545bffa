"""Lazy partition trees for combinatorial prediction markets and swaps.

One generic range-query/range-update engine (segment, k-d, and hierarchy
partition trees over pluggable weight algebras) backs every market in the
package: the logarithmic, quadratic, and 3/2-power market scoring rules,
multi-resolution hierarchical markets with arbitrage removal, and
constant-function swap markets over combinatorial baskets.
"""

from .algebra import (
    ALL_ALGEBRAS,
    AffineSum,
    LogSumAdd,
    PowerMoments,
    SumAddVec,
    SumMul,
)
from .cfmm import (
    CfmmState,
    NegativeInput,
    NoFeasibleScale,
    linear_cfmm,
    log_cfmm,
    trade_backward,
    trade_forward,
)
from .msr_markets import (
    MARKET_TYPES,
    LmsrMarket,
    NegativeDiscriminant,
    PowerMarket,
    QmsrMarket,
)
from .multires import (
    DecompositionError,
    IncoherentState,
    MultiResState,
    PriceSingularity,
    build_multires,
    coherence_gaps,
    hierarchy_from_json,
    mr_buy,
    mr_cost,
    mr_price,
    remove_arbitrage_lmsr,
    remove_arbitrage_qmsr,
)
from .partition_tree import (
    LeafCrossed,
    PartitionTree,
    build_from_hierarchy,
    build_kd_tree,
    build_segment_tree,
    range_query,
    range_query_update,
    range_update,
    visit_count,
)
from .set_system import (
    Box,
    Explicit,
    Halfspace,
    Interval,
    build_explicit_system,
    build_grid_system,
    build_interval_system,
    build_point_cloud_system,
    events_overlap,
    membership,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_ALGEBRAS",
    "AffineSum",
    "Box",
    "CfmmState",
    "DecompositionError",
    "Explicit",
    "Halfspace",
    "IncoherentState",
    "Interval",
    "LeafCrossed",
    "LmsrMarket",
    "LogSumAdd",
    "MARKET_TYPES",
    "MultiResState",
    "NegativeDiscriminant",
    "NegativeInput",
    "NoFeasibleScale",
    "PartitionTree",
    "PowerMarket",
    "PowerMoments",
    "PriceSingularity",
    "QmsrMarket",
    "SumAddVec",
    "SumMul",
    "build_explicit_system",
    "build_from_hierarchy",
    "build_grid_system",
    "build_interval_system",
    "build_kd_tree",
    "build_multires",
    "build_point_cloud_system",
    "build_segment_tree",
    "coherence_gaps",
    "events_overlap",
    "hierarchy_from_json",
    "linear_cfmm",
    "log_cfmm",
    "membership",
    "mr_buy",
    "mr_cost",
    "mr_price",
    "range_query",
    "range_query_update",
    "range_update",
    "remove_arbitrage_lmsr",
    "remove_arbitrage_qmsr",
    "trade_backward",
    "trade_forward",
    "visit_count",
]
