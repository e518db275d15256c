"""Workload generators producing one-shot transaction programs.

Three synthetic families -- key-value transactions that stay on one
partition, key-value transactions that mix cross-partition uniform reads
with skewed local updates, and a warehouse/district/stock order-entry core
with two deliberate contention points -- plus ingestion of external order
traces (CSV of order_id,item_id rows). Generators are deterministic under
a fixed seed and every program they emit builds a valid acyclic dependency
graph.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import TraceParseError
from .partitioning import AccessSample
from .txn import (
    DELETE,
    INSERT,
    READ,
    UPDATE,
    LogicDecision,
    TransactionProgram,
    TxnOp,
)

RECORD_KEY = b"k"


class ZipfSampler:
    """Ranks 1..n with P(rank i) proportional to 1/i^theta; theta=0 is uniform.

    Sampling goes through a precomputed CDF and binary search, so draws are
    O(log n) and bulk draws vectorize.
    """

    def __init__(self, n, theta, seed=0):
        if not 0.0 <= theta < 1.0:
            raise ValueError("theta must be in [0, 1)")
        self.n = n
        self.theta = theta
        weights = np.arange(1, n + 1, dtype=np.float64) ** (-theta)
        self.cdf = np.cumsum(weights)
        self.total = self.cdf[-1]
        self.cdf /= self.total
        self._rng = np.random.Generator(np.random.PCG64(seed))

    def mass(self, rank):
        """Analytic probability of a given rank."""
        return (rank ** (-self.theta)) / self.total

    def sample(self):
        u = self._rng.random()
        return int(np.searchsorted(self.cdf, u, side="left")) + 1

    def sample_array(self, count):
        u = self._rng.random(count)
        return np.searchsorted(self.cdf, u, side="left") + 1

    def sample_distinct(self, count):
        """Distinct ranks, drawn by rejection (count must be << n)."""
        out = []
        seen = set()
        while len(out) < count:
            r = self.sample()
            if r not in seen:
                seen.add(r)
                out.append(r)
        return out


def increment_logic(program):
    """Read-modify-write decision fn: every update bumps its own counter."""
    update_ids = [op.op_id for op in program.ops if op.kind == UPDATE]

    def logic(reads):
        writes = {}
        for op_id in update_ids:
            old = reads.get(op_id)
            writes[op_id] = str(int(old or b"0") + 1).encode()
        return LogicDecision(True, writes)

    return logic


def sample_of(program, at=0):
    """AccessSample view of a program: updated buckets count as writes."""
    reads, writes = [], []
    for op in program.ops:
        if op.bucket is None:
            continue
        if op.is_write():
            writes.append(op.bucket)
        else:
            reads.append(op.bucket)
    return AccessSample(program.txn_type, reads, writes, sampled_at=at)


# ---------------------------------------------------------------------------
# key-value workloads
# ---------------------------------------------------------------------------


@dataclass
class YcsbLocal:
    """Perfectly partitionable read-modify workload.

    Each transaction updates ``ops_per_txn`` distinct records that all live
    on one ground-truth partition; record popularity within a partition
    follows a Zipf distribution with skew theta. Ground truth lays buckets
    out in contiguous blocks (bucket // records_per_partition), which the
    hash fallback (bucket % k) deliberately scatters.
    """

    partitions: int
    records_per_partition: int = 2048
    theta: float = 0.9
    ops_per_txn: int = 16
    seed: int = 1

    name = "ycsb_local"

    def __post_init__(self):
        self._zipf = ZipfSampler(self.records_per_partition, self.theta,
                                 seed=f"{self.seed}:ycsb_local" and self.seed * 7919 + 11)
        self._rng = np.random.Generator(np.random.PCG64(self.seed * 104729 + 3))

    def bucket(self, partition, rank):
        return partition * self.records_per_partition + (rank - 1)

    def programs(self, count):
        out = []
        for _ in range(count):
            home = int(self._rng.integers(0, self.partitions))
            ranks = self._zipf.sample_distinct(self.ops_per_txn)
            ops = [
                TxnOp(i, UPDATE, ("lit", RECORD_KEY), bucket=self.bucket(home, r))
                for i, r in enumerate(ranks)
            ]
            prog = TransactionProgram(self.name, ops, None, home_partition=home)
            prog.logic = increment_logic(prog)
            out.append(prog)
        return out

    def all_buckets(self):
        return range(self.partitions * self.records_per_partition)

    def initial_records(self):
        for b in self.all_buckets():
            yield b, RECORD_KEY, b"0"

    def ground_truth(self):
        return {b: b // self.records_per_partition for b in self.all_buckets()}


@dataclass
class YcsbDistributed:
    """Record-level locality without transaction-level partitionability.

    Each transaction reads 4 records uniformly from the entire database and
    read-modifies 2 skewed records that share one ground-truth partition.
    """

    partitions: int
    records_per_partition: int = 2048
    theta: float = 0.9
    seed: int = 1

    name = "ycsb_distributed"

    def __post_init__(self):
        self._zipf = ZipfSampler(self.records_per_partition, self.theta,
                                 seed=self.seed * 7907 + 5)
        self._rng = np.random.Generator(np.random.PCG64(self.seed * 104717 + 7))

    def total_buckets(self):
        return self.partitions * self.records_per_partition

    def programs(self, count):
        out = []
        total = self.total_buckets()
        for _ in range(count):
            home = int(self._rng.integers(0, self.partitions))
            hot = self._zipf.sample_distinct(2)
            hot_buckets = [home * self.records_per_partition + (r - 1) for r in hot]
            cold = set()
            while len(cold) < 4:
                b = int(self._rng.integers(0, total))
                if b not in cold and b not in hot_buckets:
                    cold.add(b)
            ops = [
                TxnOp(i, READ, ("lit", RECORD_KEY), bucket=b)
                for i, b in enumerate(sorted(cold))
            ]
            ops += [
                TxnOp(4 + j, UPDATE, ("lit", RECORD_KEY), bucket=b)
                for j, b in enumerate(hot_buckets)
            ]
            prog = TransactionProgram(self.name, ops, None, home_partition=home)
            prog.logic = increment_logic(prog)
            out.append(prog)
        return out

    def all_buckets(self):
        return range(self.total_buckets())

    def initial_records(self):
        for b in self.all_buckets():
            yield b, RECORD_KEY, b"0"

    def ground_truth(self):
        return {b: b // self.records_per_partition for b in self.all_buckets()}


# ---------------------------------------------------------------------------
# order-entry workload (warehouse/district/stock core)
# ---------------------------------------------------------------------------


@dataclass
class TpccLiteConfig:
    warehouses: int
    districts_per_wh: int = 10
    customers_per_district: int = 20
    items_per_wh: int = 100
    remote_payment_prob: float = 0.0
    remote_item_prob: float = 0.0
    new_order_fraction: float = 0.5
    initial_stock: int = 1_000_000
    min_items: int = 5
    max_items: int = 15

    def __post_init__(self):
        if self.districts_per_wh != 10:
            raise ValueError("the district table has 10 records per warehouse")


class TpccLite:
    """Order-entry core with two contention points.

    Every new-order transaction increments one of the 10 district counters
    of its home warehouse, decrements the stock of 5-15 items (each remote
    with remote_item_prob), and inserts an order line whose key derives
    from the first item read. Every payment updates the warehouse total
    balance -- the single hottest record -- plus one district balance and a
    customer balance (remote with remote_payment_prob). One warehouse per
    partition.
    """

    name = "tpcc_lite"

    def __init__(self, cfg: TpccLiteConfig, seed=1):
        self.cfg = cfg
        self.partitions = cfg.warehouses
        self._rng = np.random.Generator(np.random.PCG64(seed * 86969 + 13))
        w = cfg.warehouses
        self._district_base = w
        self._customer_base = w + w * cfg.districts_per_wh
        cust_per_wh = cfg.districts_per_wh * cfg.customers_per_district
        self._stock_base = self._customer_base + w * cust_per_wh
        self._order_base = self._stock_base + w * cfg.items_per_wh
        self._end = self._order_base + w * cfg.districts_per_wh

    # bucket layout: one bucket per entity, id ranges per table
    def wh_bucket(self, w):
        return w

    def district_bucket(self, w, d):
        return self._district_base + w * self.cfg.districts_per_wh + d

    def customer_bucket(self, w, c):
        return self._customer_base + w * (self.cfg.districts_per_wh *
                                          self.cfg.customers_per_district) + c

    def stock_bucket(self, w, i):
        return self._stock_base + w * self.cfg.items_per_wh + i

    def order_bucket(self, w, d):
        return self._order_base + w * self.cfg.districts_per_wh + d

    def _new_order(self, home):
        cfg = self.cfg
        rng = self._rng
        d = int(rng.integers(0, cfg.districts_per_wh))
        n_items = int(rng.integers(cfg.min_items, cfg.max_items + 1))
        ops = [TxnOp(0, UPDATE, ("lit", b"d"), bucket=self.district_bucket(home, d))]
        item_ids = []
        for j in range(n_items):
            w = home
            if cfg.remote_item_prob and rng.random() < cfg.remote_item_prob:
                w = int(rng.integers(0, cfg.warehouses - 1))
                if w >= home:
                    w += 1
            item = int(rng.integers(0, cfg.items_per_wh))
            op_id = 1 + j
            item_ids.append(op_id)
            ops.append(TxnOp(op_id, UPDATE, ("lit", b"s"),
                             bucket=self.stock_bucket(w, item)))
        insert_id = 1 + n_items
        ops.append(TxnOp(
            insert_id, INSERT, ("from", item_ids[0]),
            bucket=self.order_bucket(home, d),
            value_source=("from", list(item_ids)),
            key_fn=lambda v: b"o" + (v or b"?"),
            constraint="stock_available",
        ))

        def logic(reads):
            for op_id in item_ids:
                qty = int(reads.get(op_id) or b"0")
                if qty <= 0:
                    return LogicDecision(False)
            writes = {0: str(int(reads.get(0) or b"0") + 1).encode()}
            for op_id in item_ids:
                writes[op_id] = str(int(reads[op_id]) - 1).encode()
            writes[insert_id] = b"items:" + b";".join(
                reads[i] or b"" for i in item_ids
            )
            return LogicDecision(True, writes, outputs={"order_total": len(item_ids)})

        return TransactionProgram("new_order", ops, logic, home_partition=home)

    def _payment(self, home):
        cfg = self.cfg
        rng = self._rng
        d = int(rng.integers(0, cfg.districts_per_wh))
        cust_w = home
        if cfg.remote_payment_prob and rng.random() < cfg.remote_payment_prob:
            cust_w = int(rng.integers(0, cfg.warehouses - 1))
            if cust_w >= home:
                cust_w += 1
        c = int(rng.integers(0, cfg.districts_per_wh * cfg.customers_per_district))
        amount = int(rng.integers(1, 5000))  # cents
        ops = [
            TxnOp(0, UPDATE, ("lit", b"w"), bucket=self.wh_bucket(home)),
            TxnOp(1, UPDATE, ("lit", b"d"), bucket=self.district_bucket(home, d)),
            TxnOp(2, UPDATE, ("lit", b"c"), bucket=self.customer_bucket(cust_w, c)),
        ]

        def logic(reads):
            return LogicDecision(True, {
                0: str(int(reads.get(0) or b"0") + amount).encode(),
                1: str(int(reads.get(1) or b"0") + amount).encode(),
                2: str(int(reads.get(2) or b"0") - amount).encode(),
            })

        return TransactionProgram("payment", ops, logic, home_partition=home)

    def programs(self, count):
        out = []
        for _ in range(count):
            home = int(self._rng.integers(0, self.cfg.warehouses))
            if self._rng.random() < self.cfg.new_order_fraction:
                out.append(self._new_order(home))
            else:
                out.append(self._payment(home))
        return out

    def all_buckets(self):
        return range(self._end)

    def initial_records(self):
        cfg = self.cfg
        for w in range(cfg.warehouses):
            yield self.wh_bucket(w), b"w", b"0"
            for d in range(cfg.districts_per_wh):
                yield self.district_bucket(w, d), b"d", b"0"
                yield self.order_bucket(w, d), None, None  # empty order bucket
            for c in range(cfg.districts_per_wh * cfg.customers_per_district):
                yield self.customer_bucket(w, c), b"c", b"0"
            for i in range(cfg.items_per_wh):
                yield self.stock_bucket(w, i), b"s", str(cfg.initial_stock).encode()

    def ground_truth(self):
        cfg = self.cfg
        truth = {}
        for w in range(cfg.warehouses):
            truth[self.wh_bucket(w)] = w
            for d in range(cfg.districts_per_wh):
                truth[self.district_bucket(w, d)] = w
                truth[self.order_bucket(w, d)] = w
            for c in range(cfg.districts_per_wh * cfg.customers_per_district):
                truth[self.customer_bucket(w, c)] = w
            for i in range(cfg.items_per_wh):
                truth[self.stock_bucket(w, i)] = w
        return truth


# ---------------------------------------------------------------------------
# order traces
# ---------------------------------------------------------------------------


@dataclass
class OrderTrace:
    """External order data: (customer id, item ids) per order, verbatim."""

    orders: list = field(default_factory=list)


def load_order_trace(path):
    """Parse a `order_id,item_id` CSV (one item per row) into an OrderTrace.

    Rows of one order may be scattered; grouping preserves first-seen order.
    Malformed rows raise TraceParseError with the offending line number.
    """
    orders = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return OrderTrace([])
        if [h.strip() for h in header[:2]] != ["order_id", "item_id"]:
            raise TraceParseError("expected header `order_id,item_id`", line_no=1)
        for line_no, row in enumerate(reader, 2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                order_id, item_id = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise TraceParseError(f"bad row {row!r}", line_no=line_no) from None
            orders.setdefault(order_id, []).append(item_id)
    return OrderTrace([(oid, items) for oid, items in orders.items()])


def synthetic_order_trace(n_orders, n_items=50_000, items_per_order=10,
                          theta=0.75, seed=1):
    """Skewed synthetic trace matching the published shape of real order
    data: ~10 items per order with the top item in roughly 15% of orders."""
    zipf = ZipfSampler(n_items, theta, seed=seed * 62119 + 17)
    orders = []
    for oid in range(n_orders):
        items = [r - 1 for r in zipf.sample_distinct(items_per_order)]
        orders.append((oid, items))
    return OrderTrace(orders)


class OrderTraceWorkload:
    """One order-entry transaction per trace order, items taken verbatim.

    Each transaction reads and decrements the stock bucket of every item in
    the order, then inserts one order record. Items map onto a fixed hash
    bucket space; there is no ground-truth partitioning -- the whole point
    of the trace is that it is hard to partition.
    """

    name = "order_trace"

    def __init__(self, trace, partitions, item_buckets=4096, initial_stock=1_000_000):
        self.trace = trace
        self.partitions = partitions
        self.item_buckets = item_buckets
        self.initial_stock = initial_stock
        from .storage import bucket_of
        self._bucket_of = bucket_of

    def item_bucket(self, item_id):
        return self._bucket_of(f"item:{item_id}", self.item_buckets)

    def order_bucket(self, partition):
        return self.item_buckets + partition

    def programs(self, count=None):
        orders = self.trace.orders if count is None else self.trace.orders[:count]
        out = []
        for order_id, items in orders:
            home = order_id % self.partitions
            buckets = []
            seen = set()
            for item in items:
                b = self.item_bucket(item)
                if b not in seen:  # bucket-level lock unit: dedupe collisions
                    seen.add(b)
                    buckets.append(b)
            ops = [
                TxnOp(i, UPDATE, ("lit", f"i{item}".encode()), bucket=b)
                for i, (item, b) in enumerate(zip(items, buckets))
            ]
            n = len(ops)
            ops.append(TxnOp(
                n, INSERT, ("lit", f"o{order_id}".encode()),
                bucket=self.order_bucket(home),
                value_source=("from", list(range(n))),
            ))

            def logic(reads, _n=n, _items=list(range(n))):
                writes = {}
                for op_id in _items:
                    qty = int(reads.get(op_id) or b"0")
                    if qty <= 0:
                        return LogicDecision(False)
                    writes[op_id] = str(qty - 1).encode()
                writes[_n] = b"order"
                return LogicDecision(True, writes)

            out.append(TransactionProgram(self.name, ops, logic, home_partition=home))
        return out

    def all_buckets(self):
        return range(self.item_buckets + self.partitions)

    def initial_records(self):
        stocked = set()
        for _, items in self.trace.orders:
            for item in items:
                b = self.item_bucket(item)
                if b not in stocked:
                    stocked.add(b)
                    yield b, None, None
                yield b, f"i{item}".encode(), str(self.initial_stock).encode()
        for p in range(self.partitions):
            yield self.order_bucket(p), None, None

    def ground_truth(self):
        return None


def trace_to_neworder(trace, partitions, item_buckets=4096):
    """Stream of order-entry programs for a trace (convenience wrapper)."""
    return OrderTraceWorkload(trace, partitions, item_buckets).programs()
