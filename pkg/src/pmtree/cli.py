"""Batch command-line front door for the market engines.

Subcommands: ``init`` builds a market from a JSON config and writes a
snapshot; ``price``/``cost``/``buy`` run one operation against a snapshot
(``buy`` persists the new state); ``swap`` trades against a swap-market
snapshot; ``replay`` applies a JSON-Lines trade log and prints a
deterministic report; ``bench`` measures visit counts and wall time across
ground-set sizes and emits CSV.

Snapshots are a ``CPT1`` container: magic bytes, a little-endian length,
a sorted-keys JSON header holding the original config, then an ``.npz``
payload with the dense state (reserves or inventory, plus the sparse
per-node weights of hierarchical markets).  Loading rebuilds the tree from
scratch, so a snapshot is portable across engine backends.

Exit codes: 0 success, 1 usage or config problems, 2 replay assertion
mismatch, 3 numerical failure inside an operation.
"""

import argparse
import json
import struct
import sys
import time

import numpy as np

from . import _kernels
from .cfmm import (
    CfmmState,
    NegativeInput,
    NoFeasibleScale,
    _event_mask,
    linear_cfmm,
    log_cfmm,
    trade_backward,
    trade_forward,
)
from .msr_markets import MARKET_TYPES, NegativeDiscriminant
from .multires import (
    DecompositionError,
    IncoherentState,
    MultiResState,
    PriceSingularity,
    hierarchy_from_json,
    mr_buy,
    mr_cost,
    mr_price,
    refresh_level_stats,
)
from .partition_tree import LeafCrossed
from .set_system import event_from_json, system_from_json

MAGIC = b"CPT1"

FLAT_KINDS = ("lmsr", "qmsr", "power")
SWAP_KINDS = ("cfmm_log", "cfmm_linear")
MR_KINDS = ("mr_lmsr", "mr_qmsr")

#: operation failures that map to exit code 3
NUMERICAL_ERRORS = (
    NegativeDiscriminant,
    NoFeasibleScale,
    NegativeInput,
    PriceSingularity,
    IncoherentState,
    DecompositionError,
    LeafCrossed,
    ArithmeticError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract reserves 2 for replay."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# market sessions: one uniform facade over the three market families


class _Session:
    def __init__(self, cfg, system, market, w=None):
        self.cfg = cfg
        self.kind = cfg["market"]
        self.system = system
        self.market = market
        self.w = w  # dense inventory mirror for flat markets

    # -- operations ---------------------------------------------------

    def price(self, event):
        if self.kind in FLAT_KINDS:
            return self.market.price(event)
        if self.kind in MR_KINDS:
            return mr_price(self.market, event)
        raise _UsageError("swap markets quote via the swap command")

    def cost(self, event, shares):
        if self.kind in FLAT_KINDS:
            return self.market.cost(event, shares)
        if self.kind in MR_KINDS:
            return mr_cost(self.market, event, shares)
        raise _UsageError("swap markets quote via the swap command")

    def buy(self, event, shares):
        if self.kind in FLAT_KINDS:
            paid = self.market.buy(event, shares)
            self.w[_event_mask(self.system, event)] += shares
            return paid
        if self.kind in MR_KINDS:
            return mr_buy(self.market, event, shares)
        raise _UsageError("swap markets trade via the swap command")

    def swap(self, e_minus, e_plus, scale, direction):
        if self.kind not in SWAP_KINDS:
            raise _UsageError("swap needs a cfmm_log or cfmm_linear snapshot")
        if direction == "fwd":
            return trade_forward(self.market, e_minus, e_plus, scale)
        return trade_backward(self.market, e_minus, e_plus, scale)

    @property
    def visits(self):
        return self.market.last_op_visits

    # -- persistence --------------------------------------------------

    def arrays(self):
        if self.kind in FLAT_KINDS:
            return {"w": self.w}
        if self.kind in SWAP_KINDS:
            return {"w": self.market.w}
        mkt = self.market
        nodes = np.array(sorted(mkt.w), dtype=np.int64)
        eta_nodes = np.array(sorted(mkt.eta), dtype=np.int64)
        return {
            "mr_nodes": nodes,
            "mr_w": np.array([mkt.w[i] for i in nodes], dtype=float),
            "mr_eta_nodes": eta_nodes,
            "mr_eta": np.array([mkt.eta[i] for i in eta_nodes], dtype=float),
        }

    @property
    def tree(self):
        return self.market.tree


def _build_session(cfg, arrays=None):
    kind = cfg.get("market")
    if kind not in FLAT_KINDS + SWAP_KINDS + MR_KINDS:
        raise _UsageError(f"unknown market kind {kind!r}")
    if "system" not in cfg:
        raise _UsageError("config needs a 'system' entry")
    system = system_from_json(cfg["system"])
    w0 = None
    if arrays is not None and "w" in arrays:
        w0 = np.asarray(arrays["w"], dtype=float)
    elif cfg.get("w0") is not None:
        w0 = np.asarray(cfg["w0"], dtype=float)

    if kind in FLAT_KINDS:
        levels = None
        if cfg.get("levels") is not None:
            levels = [
                [np.asarray(c, dtype=np.int64) for c in lvl] for lvl in cfg["levels"]
            ]
        mkt = MARKET_TYPES[kind].from_system(
            system,
            cfg.get("b", 1.0),
            w0=w0,
            tree_kind=cfg.get("tree", "segment"),
            levels=levels,
        )
        w = np.zeros(system.n) if w0 is None else w0.copy()
        return _Session(cfg, system, mkt, w)

    if kind in SWAP_KINDS:
        lam = cfg.get("lam", 1e6)
        if kind == "cfmm_log":
            mkt = log_cfmm(system, w0=w0, b=cfg.get("b", 1.0), lam=lam)
        else:
            mkt = linear_cfmm(system, c=cfg.get("c"), w0=w0, lam=lam)
        return _Session(cfg, system, mkt)

    if "hierarchy" not in cfg:
        raise _UsageError("multi-resolution markets need a 'hierarchy' entry")
    levels, b = hierarchy_from_json(cfg["hierarchy"])
    rule = "lmsr" if kind == "mr_lmsr" else "qmsr"
    mkt = MultiResState(system, levels, b, rule)
    if arrays is not None and "mr_nodes" in arrays:
        mkt.w = {
            int(i): float(v) for i, v in zip(arrays["mr_nodes"], arrays["mr_w"])
        }
        mkt.eta = {
            int(i): float(v)
            for i, v in zip(arrays["mr_eta_nodes"], arrays["mr_eta"])
        }
        refresh_level_stats(mkt)
    return _Session(cfg, system, mkt)


# ---------------------------------------------------------------------------
# snapshots


def _save_snapshot(path, session):
    meta = json.dumps({"format": "CPT1", "config": session.cfg}, sort_keys=True)
    meta_b = meta.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta_b)))
        fh.write(meta_b)
        np.savez(fh, **session.arrays())


def _load_snapshot(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise _UsageError(f"{path}: not a CPT1 snapshot")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        with np.load(fh) as npz:
            arrays = {k: npz[k] for k in npz.files}
    return _build_session(meta["config"], arrays)


def _read_json_arg(text, what):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise _UsageError(f"bad {what} JSON: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_init(args):
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise _UsageError(str(exc)) from None
    except json.JSONDecodeError as exc:
        raise _UsageError(f"bad config JSON: {exc}") from None
    t0 = time.perf_counter()
    session = _build_session(cfg)
    dt = time.perf_counter() - t0
    _save_snapshot(args.out, session)
    print(f"n={session.system.n} nodes={session.tree.num_nodes} build_s={dt:.3f}")
    return 0


def cmd_quote(args):
    session = _load_snapshot(args.snap)
    event = event_from_json(_read_json_arg(args.event, "event"))
    if args.op in ("cost", "buy") and args.shares is None:
        raise _UsageError(f"{args.op} needs --shares")
    if args.op == "price":
        out = session.price(event)
    elif args.op == "cost":
        out = session.cost(event, args.shares)
    else:
        out = session.buy(event, args.shares)
        _save_snapshot(args.snap, session)
    print(f"{args.op} {out:.12g} visits={session.visits}")
    return 0


def cmd_swap(args):
    session = _load_snapshot(args.snap)
    e_plus = event_from_json(_read_json_arg(args.plus, "plus event"))
    e_minus = event_from_json(_read_json_arg(args.minus, "minus event"))
    out = session.swap(e_minus, e_plus, args.scale, args.dir)
    _save_snapshot(args.snap, session)
    print(f"swap_{args.dir} {out:.12g} visits={session.visits}")
    return 0


def _replay_one(session, rec):
    op = rec["op"]
    if op == "price":
        return session.price(event_from_json(rec["event"])), 0.0
    if op == "cost":
        return session.cost(event_from_json(rec["event"]), rec["shares"]), 0.0
    if op == "buy":
        paid = session.buy(event_from_json(rec["event"]), rec["shares"])
        return paid, paid
    if op in ("swap_fwd", "swap_bwd"):
        out = session.swap(
            event_from_json(rec["minus"]),
            event_from_json(rec["plus"]),
            rec["scale"],
            "fwd" if op == "swap_fwd" else "bwd",
        )
        return out, 0.0
    raise _UsageError(f"unknown log op {op!r}")


def cmd_replay(args):
    session = _load_snapshot(args.snap)
    cash = 0.0
    with open(args.log) as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    for idx, line in enumerate(lines):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise _UsageError(f"log record {idx}: {exc}") from None
        result, paid = _replay_one(session, rec)
        cash += paid
        print(
            f"{idx:04d} {rec['op']} result={result:.12g} "
            f"visits={session.visits} cash={cash:.12g}"
        )
        expected = rec.get("expected")
        if expected is not None and abs(result - expected) > 1e-6:
            print(
                f"MISMATCH record {idx}: got {result:.12g} expected {expected:.12g}"
            )
            return 2
    print(f"replayed {len(lines)} records cash={cash:.12g}")
    return 0


def _bench_market(kind, n, rng):
    """One LMSR instance of the requested shape plus an event generator."""
    from .set_system import Box, Interval, build_grid_system, build_interval_system

    if kind == "interval":
        system = build_interval_system(n)
        mkt = MARKET_TYPES["lmsr"].from_system(system, 1.0)

        def gen():
            lo = int(rng.integers(0, n))
            hi = int(rng.integers(lo, n))
            return Interval(lo, hi)

        return mkt, gen, n
    if kind == "grid":
        m = max(2, int(round(n ** 0.5)))
        system = build_grid_system(m, 2)
        mkt = MARKET_TYPES["lmsr"].from_system(system, 1.0, tree_kind="kd")

        def gen():
            a = rng.integers(0, m, 2)
            b = rng.integers(0, m, 2)
            return Box(np.minimum(a, b), np.maximum(a, b))

        return mkt, gen, m * m
    if kind == "hierarchy":
        system = build_interval_system(n)
        block = max(2, int(round(n ** 0.5)))
        cuts = list(range(0, n, block)) + [n]
        levels = [
            [np.arange(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)],
            [np.array([x]) for x in range(n)],
        ]
        mkt = MARKET_TYPES["lmsr"].from_system(
            system, 1.0, tree_kind="hierarchy", levels=levels
        )

        def gen():
            lo = int(rng.integers(0, n))
            hi = int(rng.integers(lo, n))
            return Interval(lo, hi)

        return mkt, gen, n
    raise _UsageError(f"unknown bench kind {kind!r}")


def cmd_bench(args):
    if args.ops < 100:
        raise _UsageError("--ops must be at least 100")
    if args.engine == "numba" and not _kernels.HAS_NUMBA:
        raise _UsageError("numba backend requested but not available")
    if args.engine == "python":
        _kernels.HAS_NUMBA = False
    engine = "numba" if _kernels.HAS_NUMBA else "python"
    try:
        sizes = [int(tok) for tok in args.n.split(",") if tok]
    except ValueError:
        raise _UsageError("--n wants a comma-separated integer list") from None
    if not sizes:
        raise _UsageError("--n wants a comma-separated integer list")

    print(f"# seed={args.seed} engine={engine}")
    print("n,median_visits,p99_visits,ns_per_op")
    for n in sizes:
        rng = np.random.default_rng(args.seed)
        mkt, gen, n_eff = _bench_market(args.kind, n, rng)
        for _ in range(5):  # warm the jit path before timing
            mkt.price(gen())
        visits = np.empty(args.ops)
        t0 = time.perf_counter_ns()
        for i in range(args.ops):
            e = gen()
            if i % 2:
                mkt.buy(e, 0.01)
            else:
                mkt.price(e)
            visits[i] = mkt.last_op_visits
        span = time.perf_counter_ns() - t0
        med = float(np.median(visits))
        p99 = float(np.percentile(visits, 99))
        print(f"{n_eff},{med:.6g},{p99:.6g},{span / args.ops:.6g}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _make_parser():
    top = _Parser(prog="pmtree", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="build a market from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_init)

    for op in ("price", "cost", "buy"):
        p = sub.add_parser(op, help=f"{op} one event against a snapshot")
        p.add_argument("--snap", required=True)
        p.add_argument("--event", required=True, help="event JSON")
        p.add_argument("--shares", type=float)
        p.set_defaults(fn=cmd_quote, op=op)

    p = sub.add_parser("swap", help="trade a basket pair on a swap market")
    p.add_argument("--snap", required=True)
    p.add_argument("--plus", required=True, help="incoming basket event JSON")
    p.add_argument("--minus", required=True, help="outgoing basket event JSON")
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--dir", choices=("fwd", "bwd"), default="fwd")
    p.set_defaults(fn=cmd_swap)

    p = sub.add_parser("replay", help="apply a JSON-Lines trade log")
    p.add_argument("--snap", required=True)
    p.add_argument("--log", required=True)
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("bench", help="visit/time scaling table")
    p.add_argument("--kind", choices=("interval", "grid", "hierarchy"), required=True)
    p.add_argument("--n", required=True, help="comma-separated ground-set sizes")
    p.add_argument("--ops", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--engine", choices=("auto", "numba", "python"), default="auto")
    p.set_defaults(fn=cmd_bench)
    return top


def run(argv=None):
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        # before ValueError: several of these subclass the builtin errors
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
