"""Experiment harness: wires workloads, partitioning, protocols and the
simulated cluster together, collects metrics, and verifies serializability.

A run is fully described by an ExperimentConfig. When the partitioning mode
is learned ("star" or "record_graph") the harness first profiles the
workload offline (sample, estimate contention, build and cut the graph,
emit the lookup table), reloads the store under the new layout, then
measures. Reports are machine-readable (CSV or JSON) with a stable schema.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError
from .partitioning import (
    LookupTable,
    build_record_graph,
    build_star_graph,
    emit_lookup_table,
    estimate_rates,
    partition_graph,
)
from .protocols import COMMITTED, Cluster, measure_contention_span
from .simulator import LatencyModel
from .storage import NO_WAIT, WAIT_DIE
from .workloads import (
    OrderTraceWorkload,
    TpccLite,
    TpccLiteConfig,
    YcsbDistributed,
    YcsbLocal,
    load_order_trace,
    sample_of,
    synthetic_order_trace,
)

PROTOCOLS = ("no_wait", "wait_die", "occ", "two_region", "partition_only",
             "reorder_only")
PARTITIONINGS = ("hash", "record_graph", "star")
SCHEMA_VERSION = 1

REPORT_COLUMNS = [
    "schema_version", "protocol", "partitioning", "partitions", "seed",
    "txn_count", "attempted", "committed", "aborted", "abort_rate",
    "duration", "throughput", "mean_latency", "p50_latency", "p95_latency",
    "distributed_fraction", "cut_weight", "lookup_entries", "hot_buckets",
    "hottest_bucket", "hottest_median_span", "dropped_messages",
]


@dataclass
class ExperimentConfig:
    """One experiment; field names double as the config-file schema."""

    protocol: str = "no_wait"
    partitioning: str = "hash"
    partitions: int = 4
    workers_per_partition: int = 8
    txn_count: int = 1000
    seed: int = 1
    latency: dict = field(default_factory=lambda: {
        "local_delay": 1, "remote_delay": 10, "jitter": 0})
    replication_f: int = 2
    coverage: float = 1.0
    hot_threshold: float = 0.01
    epsilon: float = 0.10
    load_metric: str = "txn_count"
    min_edge_weight: int = 0
    lock_policy: str = NO_WAIT  # two-region / partition-only lock policy
    workload: dict = field(default_factory=lambda: {"name": "ycsb_local"})
    crash_schedule: list = field(default_factory=list)  # [(node, time)]
    profiling_txns: int = 2000
    sample_rate: float = 0.1
    lock_window: float | None = None
    max_attempts: int = 500
    warmup_fraction: float = 0.1
    record_accesses: bool = True
    trace: bool = False

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol: unknown value {self.protocol!r}")
        if self.partitioning not in PARTITIONINGS:
            raise ConfigError(f"partitioning: unknown value {self.partitioning!r}")
        if self.partitions < 1:
            raise ConfigError("partitions: must be >= 1")
        if self.txn_count < 0:
            raise ConfigError("txn_count: must be >= 0")
        if not 0.0 <= self.coverage <= 1.0:
            raise ConfigError("coverage: must be in [0, 1]")
        if self.lock_policy not in (NO_WAIT, WAIT_DIE):
            raise ConfigError(f"lock_policy: unknown value {self.lock_policy!r}")
        if self.workers_per_partition < 1:
            raise ConfigError("workers_per_partition: must be >= 1")

    @classmethod
    def from_dict(cls, data):
        import dataclasses
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricsReport:
    """Per-run metrics; throughput counts committed transactions only."""

    protocol: str
    partitioning: str
    partitions: int
    seed: int
    txn_count: int
    attempted: int = 0
    committed: int = 0
    aborted: int = 0
    abort_rate: float = 0.0
    duration: int = 0
    throughput: float = 0.0
    mean_latency: float = 0.0
    p50_latency: float = 0.0
    p95_latency: float = 0.0
    distributed_fraction: float = 0.0
    cut_weight: int = -1
    lookup_entries: int = 0
    hot_buckets: int = 0
    hottest_bucket: int = -1
    hottest_median_span: float = 0.0
    dropped_messages: int = 0
    span_stats: dict = field(default_factory=dict)  # bucket -> stats dict
    schema_version: int = SCHEMA_VERSION

    def row(self):
        return [getattr(self, c) for c in REPORT_COLUMNS]

    def to_json_dict(self):
        data = {c: getattr(self, c) for c in REPORT_COLUMNS}
        data["span_stats"] = {str(b): s for b, s in sorted(self.span_stats.items())}
        return data


def build_workload(cfg):
    spec = dict(cfg.workload)
    name = spec.pop("name", "ycsb_local")
    if name == "ycsb_local":
        return YcsbLocal(partitions=cfg.partitions, seed=cfg.seed, **spec)
    if name == "ycsb_distributed":
        return YcsbDistributed(partitions=cfg.partitions, seed=cfg.seed, **spec)
    if name == "tpcc_lite":
        spec.setdefault("warehouses", cfg.partitions)
        return TpccLite(TpccLiteConfig(**spec), seed=cfg.seed)
    if name == "order_trace":
        path = spec.pop("path", None)
        if path:
            trace = load_order_trace(path)
        else:
            trace = synthetic_order_trace(
                spec.pop("orders", 2000), seed=cfg.seed,
                **{k: spec.pop(k) for k in list(spec)
                   if k in ("n_items", "items_per_order", "theta")})
        return OrderTraceWorkload(trace, cfg.partitions, **spec)
    raise ConfigError(f"workload.name: unknown value {name!r}")


def profile_and_partition(cfg, workload):
    """Offline partitioning phase: sample -> rates -> graph -> cut -> table.

    Returns (LookupTable, cut_weight). Deterministic for a fixed seed; the
    sampling rate thins the profiling stream exactly as a production
    sampler would.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed * 49999 + 23))
    stream = workload.programs(cfg.profiling_txns)
    samples = [sample_of(p, at=i) for i, p in enumerate(stream)
               if cfg.sample_rate >= 1.0 or rng.random() < cfg.sample_rate]
    if not samples:
        raise ConfigError("sample_rate: no samples drawn; raise profiling_txns")
    window = max(len(stream), 1)
    lock_window = cfg.lock_window
    if lock_window is None:
        # default conflict window: the cluster-wide number of in-flight
        # transactions, i.e. how many arrivals overlap one lock hold
        lock_window = cfg.workers_per_partition * cfg.partitions
    stats = estimate_rates(samples, window=window, lock_window=lock_window)
    if cfg.partitioning == "star":
        graph = build_star_graph(samples, stats, load_metric=cfg.load_metric,
                                 min_edge_weight=cfg.min_edge_weight)
    else:
        graph = build_record_graph(samples)
    assignment = partition_graph(graph, cfg.partitions, cfg.epsilon,
                                 seed=cfg.seed)
    table = emit_lookup_table(assignment, stats,
                              hot_threshold=cfg.hot_threshold,
                              coverage=cfg.coverage)
    return table, assignment.cut_weight


def make_cluster(cfg, workload, lookup):
    latency = LatencyModel(**cfg.latency)
    cluster = Cluster(
        cfg.partitions, lookup, latency=latency,
        replication_f=cfg.replication_f, seed=cfg.seed,
        inflight_per_partition=cfg.workers_per_partition,
        max_attempts=cfg.max_attempts,
        record_accesses=cfg.record_accesses, trace=cfg.trace,
    )
    cluster.crash_times = list(cfg.crash_schedule)
    cluster.load_workload(workload)
    return cluster


def run_experiment(cfg, return_cluster=False):
    """Run one configured experiment; returns (MetricsReport, History).

    Includes the offline partitioner phase when partitioning != "hash":
    sample under the generator, partition, reload the store under the new
    lookup table, then measure.
    """
    workload = build_workload(cfg)
    cut_weight = -1
    if cfg.partitioning == "hash":
        lookup = LookupTable(k=cfg.partitions, coverage=0.0,
                             hot_threshold=cfg.hot_threshold)
    else:
        lookup, cut_weight = profile_and_partition(cfg, workload)
    cluster = make_cluster(cfg, workload, lookup)
    programs = workload.programs(cfg.txn_count)
    cluster.run(programs, cfg.protocol, policy=cfg.lock_policy)
    report = summarize(cfg, cluster, cut_weight)
    if return_cluster:
        return report, cluster.history, cluster
    return report, cluster.history


def summarize(cfg, cluster, cut_weight=-1):
    history = cluster.history
    outcomes = history.outcomes
    attempted = len(outcomes)
    committed = sum(1 for o in outcomes if o.status == COMMITTED)
    aborted = attempted - committed
    finals = [history.final[t] for t in sorted(history.final)]
    committed_finals = [o for o in finals if o.status == COMMITTED]

    warmup = int(len(finals) * cfg.warmup_fraction)
    measured = [o for o in committed_finals
                if o.txn_id >= warmup or len(committed_finals) <= warmup]
    duration = cluster.sim.now()
    if measured:
        window_start = min(o.submit_time for o in measured)
        window = max(duration - window_start, 1)
        throughput = len(measured) / window
    else:
        throughput = 0.0

    latencies = [o.latency for o in committed_finals]
    span_stats = measure_contention_span(outcomes)
    hottest, hottest_median = -1, 0.0
    if span_stats:
        hottest = max(span_stats, key=lambda b: (span_stats[b]["count"], b))
        hottest_median = span_stats[hottest]["median"]
    report = MetricsReport(
        protocol=cfg.protocol,
        partitioning=cfg.partitioning,
        partitions=cfg.partitions,
        seed=cfg.seed,
        txn_count=cfg.txn_count,
        attempted=attempted,
        committed=committed,
        aborted=aborted,
        abort_rate=aborted / attempted if attempted else 0.0,
        duration=duration,
        throughput=throughput,
        mean_latency=float(np.mean(latencies)) if latencies else 0.0,
        p50_latency=float(np.percentile(latencies, 50)) if latencies else 0.0,
        p95_latency=float(np.percentile(latencies, 95)) if latencies else 0.0,
        distributed_fraction=(
            sum(1 for o in committed_finals if o.distributed) / len(committed_finals)
            if committed_finals else 0.0),
        cut_weight=cut_weight,
        lookup_entries=len(cluster.lookup.entries),
        hot_buckets=len(cluster.lookup.hot_buckets()),
        hottest_bucket=hottest,
        hottest_median_span=hottest_median,
        dropped_messages=cluster.sim.dropped,
        span_stats=span_stats,
    )
    return report


# ---------------------------------------------------------------------------
# serializability checking
# ---------------------------------------------------------------------------


def check_serializable(history):
    """Test the committed history's conflict graph for acyclicity.

    Builds w-w, w-r and r-w edges ordered by access order per bucket over
    committed attempts only, then searches for a cycle. Returns
    ("serializable", None) or ("cycle", [txn ids]).
    """
    committed = history.committed_attempts()
    per_bucket = {}
    for txn, attempt, bucket, _key, kind, _time, ctr in history.accesses:
        if (txn, attempt) in committed:
            per_bucket.setdefault(bucket, []).append((ctr, txn, kind))
    edges = {}
    for bucket, accesses in per_bucket.items():
        accesses.sort()
        for i in range(len(accesses)):
            ctr_i, txn_i, kind_i = accesses[i]
            for j in range(i + 1, len(accesses)):
                ctr_j, txn_j, kind_j = accesses[j]
                if txn_i == txn_j:
                    continue
                if kind_i == "w" or kind_j == "w":
                    edges.setdefault(txn_i, set()).add(txn_j)
    # iterative three-color DFS for a cycle
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {}
    for start in edges:
        if color.get(start, WHITE) != WHITE:
            continue
        stack = [(start, iter(sorted(edges.get(start, ()))))]
        color[start] = GRAY
        path = [start]
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                c = color.get(nxt, WHITE)
                if c == GRAY:
                    idx = path.index(nxt)
                    return ("cycle", path[idx:])
                if c == WHITE:
                    color[nxt] = GRAY
                    path.append(nxt)
                    stack.append((nxt, iter(sorted(edges.get(nxt, ())))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                path.pop()
                stack.pop()
    return ("serializable", None)


def verify_atomicity(cluster):
    """All-or-nothing check over final store contents.

    Every record's last writer must be a committed transaction; aborted
    transactions must have left no trace. Returns a list of violations.
    """
    committed = cluster.history.committed_ids()
    problems = []
    for (bucket, key), writer in sorted(cluster.scan_writers().items()):
        if writer not in committed:
            problems.append(f"bucket {bucket} key {key!r}: aborted writer {writer}")
    return problems


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def emit_report(reports, fmt, path):
    """Write one or more reports; stable column order, versioned schema."""
    if fmt == "csv":
        lines = [",".join(REPORT_COLUMNS)]
        for r in reports:
            lines.append(",".join(_csv_cell(v) for v in r.row()))
        text = "\n".join(lines) + "\n"
    elif fmt == "json":
        text = json.dumps({
            "schema_version": SCHEMA_VERSION,
            "reports": [r.to_json_dict() for r in reports],
        }, indent=2, sort_keys=True) + "\n"
    else:
        raise ConfigError(f"emit format: unknown value {fmt!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _csv_cell(value):
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def report_digest(report, history):
    """Stable digest of a run, for byte-for-byte determinism checks."""
    payload = {
        "report": report.to_json_dict(),
        "finals": [
            (t, o.status, o.attempt, o.finish_time, o.commit_time)
            for t, o in sorted(history.final.items())
        ],
        "attempts": [
            (o.txn_id, o.attempt, o.status, o.finish_time)
            for o in history.outcomes
        ],
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def sweep(cfg, vary_field, values):
    """Run the same config across several values of one field."""
    reports = []
    for value in values:
        data = cfg.to_dict()
        if vary_field not in data:
            raise ConfigError(f"sweep field: unknown value {vary_field!r}")
        data[vary_field] = value
        report, _history = run_experiment(ExperimentConfig.from_dict(data))
        reports.append(report)
    return reports
