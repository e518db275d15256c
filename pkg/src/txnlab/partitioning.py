"""Contention-aware workload partitioning.

Pipeline: sampled read/write-sets -> per-bucket Poisson access rates ->
conflict likelihood per bucket -> a star-shaped workload graph (one dummy
vertex per transaction, one vertex per bucket, an edge per touched bucket)
-> balanced minimum-cut partitioning -> a lookup table mapping the covered
buckets to partitions, with hot flags for buckets above a contention
threshold. Everything here is pure batch computation, deterministic under
a fixed seed.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .errors import ConfigError

TXN_COUNT = "txn_count"
RECORD_COUNT = "record_count"
ACCESS_COUNT = "access_count"
LOAD_METRICS = (TXN_COUNT, RECORD_COUNT, ACCESS_COUNT)

EDGE_WEIGHT_SCALE = 1000


@dataclass
class AccessSample:
    """One sampled transaction: its read and write bucket multisets."""

    txn_type: str
    read_buckets: list
    write_buckets: list
    sampled_at: int = 0


@dataclass
class ContentionStats:
    """Per-bucket expected reads/writes per lock window (Poisson rates)."""

    lambda_w: dict = field(default_factory=dict)
    lambda_r: dict = field(default_factory=dict)

    def buckets(self):
        return sorted(set(self.lambda_w) | set(self.lambda_r))

    def rate_w(self, bucket):
        return self.lambda_w.get(bucket, 0.0)

    def rate_r(self, bucket):
        return self.lambda_r.get(bucket, 0.0)

    def p_c(self, bucket):
        return contention_likelihood(self.rate_w(bucket), self.rate_r(bucket))


def estimate_rates(samples, window, lock_window):
    """Time-normalized access frequencies per bucket.

    lambda_w(b) = write_count(b) * lock_window / window, likewise for
    reads. Buckets absent from the samples implicitly have rate zero.
    An empty sample list is valid and yields all-zero stats.
    """
    if window <= 0 or lock_window <= 0:
        raise ConfigError("window and lock_window must be positive")
    scale = lock_window / window
    stats = ContentionStats()
    for sample in samples:
        for b in sample.write_buckets:
            stats.lambda_w[b] = stats.lambda_w.get(b, 0.0) + scale
        for b in sample.read_buckets:
            stats.lambda_r[b] = stats.lambda_r.get(b, 0.0) + scale
    return stats


def contention_likelihood(lambda_w, lambda_r):
    """Probability of a conflicting access within one lock window.

    Models reads and writes as independent Poisson arrivals and adds the
    two disjoint conflict cases -- more than one write with no reads, and
    at least one write alongside at least one read -- which closes to
    1 - exp(-lw) - lw * exp(-lw) * exp(-lr). Zero writes means zero
    conflict likelihood (shared locks are compatible).
    """
    if lambda_w < 0 or lambda_r < 0:
        raise ValueError("rates must be non-negative")
    return 1.0 - math.exp(-lambda_w) - lambda_w * math.exp(-lambda_w) * math.exp(-lambda_r)


# ---------------------------------------------------------------------------
# workload graphs
# ---------------------------------------------------------------------------


@dataclass
class WorkloadGraph:
    """Undirected weighted graph over transactions and/or buckets.

    In star mode, vertices [0, len(t_vertices)) are transaction dummies and
    the rest are buckets; every edge connects a transaction to a bucket it
    touches, and all edges of one bucket share the same weight. In record
    mode there are only bucket vertices, and edges are co-access pairs
    weighted by co-access frequency.
    """

    vertex_weights: list
    adj: list  # adj[v] = {u: weight}
    t_vertices: dict  # txn index -> vertex
    r_vertices: dict  # bucket id -> vertex
    kind: str = "star"

    @property
    def vertex_count(self):
        return len(self.vertex_weights)

    @property
    def edge_count(self):
        return sum(len(n) for n in self.adj) // 2

    def add_edge(self, u, v, w):
        if u == v:
            return
        self.adj[u][v] = self.adj[u].get(v, 0) + w
        self.adj[v][u] = self.adj[v].get(u, 0) + w


def build_star_graph(samples, stats, load_metric=TXN_COUNT, min_edge_weight=0):
    """Model each sampled transaction as a star around a dummy vertex.

    The graph has |T| + |R| vertices and one edge per (transaction,
    distinct bucket) pair. Edge weight is the bucket's conflict likelihood
    scaled to an integer, identical on all edges of one bucket; a positive
    min_edge_weight additionally co-optimizes for fewer cross-partition
    co-accesses (the larger the floor, the stronger that pull). Vertex
    weights depend on the load metric: balancing by transaction count
    weights the dummies 1 and buckets 0, balancing by record count is the
    reverse, and balancing by access count weights each bucket by its
    sampled accesses.
    """
    if load_metric not in LOAD_METRICS:
        raise ConfigError(f"unknown load_metric {load_metric!r}")
    buckets = []
    seen = set()
    for sample in samples:
        for b in list(sample.read_buckets) + list(sample.write_buckets):
            if b not in seen:
                seen.add(b)
                buckets.append(b)
    buckets.sort()

    n_t = len(samples)
    t_vertices = {i: i for i in range(n_t)}
    r_vertices = {b: n_t + i for i, b in enumerate(buckets)}

    access_counts = {b: 0 for b in buckets}
    edge_weight = {}
    for b in buckets:
        scaled = int(round(stats.p_c(b) * EDGE_WEIGHT_SCALE))
        edge_weight[b] = max(scaled, min_edge_weight)

    if load_metric == TXN_COUNT:
        weights = [1] * n_t + [0] * len(buckets)
    elif load_metric == RECORD_COUNT:
        weights = [0] * n_t + [1] * len(buckets)
    else:
        weights = [0] * n_t + [0] * len(buckets)

    graph = WorkloadGraph(weights, [dict() for _ in range(n_t + len(buckets))],
                          t_vertices, r_vertices, kind="star")
    for i, sample in enumerate(samples):
        touched = sorted(set(sample.read_buckets) | set(sample.write_buckets))
        for b in touched:
            graph.add_edge(t_vertices[i], r_vertices[b], edge_weight[b])
            access_counts[b] += 1
    if load_metric == ACCESS_COUNT:
        for b, v in r_vertices.items():
            graph.vertex_weights[v] = access_counts[b]
    return graph


def build_record_graph(samples):
    """Comparison mode: buckets as vertices, co-access pairs as edges.

    A transaction touching n buckets contributes n*(n-1)/2 edges, weighted
    by co-access frequency. This is the classic representation used by
    partitioners that minimize distributed transactions.
    """
    buckets = []
    seen = set()
    for sample in samples:
        for b in list(sample.read_buckets) + list(sample.write_buckets):
            if b not in seen:
                seen.add(b)
                buckets.append(b)
    buckets.sort()
    r_vertices = {b: i for i, b in enumerate(buckets)}
    graph = WorkloadGraph([1] * len(buckets), [dict() for _ in buckets],
                          {}, r_vertices, kind="record")
    for sample in samples:
        touched = sorted(set(sample.read_buckets) | set(sample.write_buckets))
        for i in range(len(touched)):
            for j in range(i + 1, len(touched)):
                graph.add_edge(r_vertices[touched[i]], r_vertices[touched[j]], 1)
    return graph


# ---------------------------------------------------------------------------
# balanced min-cut partitioning (multilevel + boundary refinement)
# ---------------------------------------------------------------------------


@dataclass
class PartitionAssignment:
    """vertex -> partition map plus the balance/cut bookkeeping."""

    parts: list
    k: int
    epsilon: float
    cut_weight: int
    loads: list
    graph: WorkloadGraph

    def bucket_partitions(self):
        return {b: self.parts[v] for b, v in self.graph.r_vertices.items()}

    def txn_partitions(self):
        """A star-mode transaction's partition designates its inner host."""
        return {t: self.parts[v] for t, v in self.graph.t_vertices.items()}

    def check_balance(self):
        total = sum(self.loads)
        cap = (1.0 + self.epsilon) * total / self.k
        assert all(load <= cap + 1e-9 for load in self.loads), (
            f"balance violated: loads={self.loads} cap={cap}"
        )


def cut_weight_of(adj, parts):
    cut = 0
    for u, neighbors in enumerate(adj):
        for v, w in neighbors.items():
            if u < v and parts[u] != parts[v]:
                cut += w
    return cut


def partition_graph(graph, k, epsilon, seed=0):
    """Balanced minimum-contention split of a workload graph.

    Multilevel scheme: heavy-edge-matching coarsening, greedy balanced
    initial assignment, and boundary refinement with move rollback under
    the hard constraint max partition load <= (1 + epsilon) * mean load.
    Deterministic for a fixed seed.
    """
    n = graph.vertex_count
    if k < 1:
        raise ConfigError("partitions k must be >= 1")
    if n == 0:
        raise ConfigError("cannot partition an empty graph")
    if k > n:
        raise ConfigError(f"partitions k={k} exceeds vertex count {n}")
    weights = list(graph.vertex_weights)
    total = sum(weights)
    cap = (1.0 + epsilon) * total / k

    if k == 1:
        parts = [0] * n
    else:
        rng = random.Random(f"{seed}:partitioner")
        parts = _multilevel(weights, graph.adj, k, cap, rng)

    loads = [0] * k
    for v, p in enumerate(parts):
        loads[p] += weights[v]
    assignment = PartitionAssignment(
        parts, k, epsilon, cut_weight_of(graph.adj, parts), loads, graph
    )
    assignment.check_balance()
    return assignment


def _multilevel(weights, adj, k, cap, rng):
    n = len(weights)
    if n <= max(48, 6 * k):
        return _partition_flat(weights, adj, k, cap, rng, restarts=24)

    coarse_w, coarse_adj, mapping = _coarsen(weights, adj, cap, rng)
    if len(coarse_w) >= n:  # no progress; fall back to flat partitioning
        return _partition_flat(weights, adj, k, cap, rng, restarts=8)
    coarse_parts = _multilevel(coarse_w, coarse_adj, k, cap, rng)
    parts = [coarse_parts[mapping[v]] for v in range(n)]
    loads = [0] * k
    for v, p in enumerate(parts):
        loads[p] += weights[v]
    _refine(weights, adj, parts, loads, k, cap)
    return parts


def _coarsen(weights, adj, cap, rng):
    """Heavy-edge matching; matched pairs must stay under the balance cap."""
    n = len(weights)
    order = list(range(n))
    rng.shuffle(order)
    match = [-1] * n
    for v in order:
        if match[v] != -1:
            continue
        best, best_w = -1, -1
        for u, w in adj[v].items():
            if match[u] == -1 and weights[v] + weights[u] <= max(cap, weights[v]):
                if w > best_w or (w == best_w and u < best):
                    best, best_w = u, w
        if best != -1:
            match[v] = best
            match[best] = v

    mapping = [-1] * n
    coarse_w = []
    for v in range(n):
        if mapping[v] != -1:
            continue
        u = match[v]
        cid = len(coarse_w)
        mapping[v] = cid
        if u != -1 and u != v:
            mapping[u] = cid
            coarse_w.append(weights[v] + weights[u])
        else:
            coarse_w.append(weights[v])
    coarse_adj = [dict() for _ in coarse_w]
    for v in range(n):
        cv = mapping[v]
        for u, w in adj[v].items():
            cu = mapping[u]
            if cv == cu or v > u:
                continue
            coarse_adj[cv][cu] = coarse_adj[cv].get(cu, 0) + w
            coarse_adj[cu][cv] = coarse_adj[cu].get(cv, 0) + w
    return coarse_w, coarse_adj, mapping


def _partition_flat(weights, adj, k, cap, rng, restarts):
    n = len(weights)
    best_parts, best_cut = None, None
    for r in range(restarts):
        parts = _greedy_init(weights, adj, k, cap, rng, shuffle=r > 0)
        if parts is None:
            continue
        loads = [0] * k
        for v, p in enumerate(parts):
            loads[p] += weights[v]
        _refine(weights, adj, parts, loads, k, cap)
        cut = cut_weight_of(adj, parts)
        if best_cut is None or cut < best_cut:
            best_parts, best_cut = list(parts), cut
    if best_parts is None:
        raise ConfigError(
            f"no balanced assignment found for k={k}, cap={cap}; epsilon too tight"
        )
    return best_parts


def _greedy_init(weights, adj, k, cap, rng, shuffle):
    """Place vertices heaviest-first into the best-fitting partition."""
    n = len(weights)
    order = sorted(range(n), key=lambda v: (-weights[v], v))
    if shuffle:
        rng.shuffle(order)
        order.sort(key=lambda v: -weights[v])  # stable: shuffles only ties
    parts = [-1] * n
    loads = [0] * k
    for v in order:
        feasible = [p for p in range(k) if loads[p] + weights[v] <= cap or weights[v] == 0]
        if not feasible:
            return None
        gains = {p: 0 for p in feasible}
        for u, w in adj[v].items():
            if parts[u] != -1 and parts[u] in gains:
                gains[parts[u]] += w
        best = max(feasible, key=lambda p: (gains[p], -loads[p], -p))
        parts[v] = best
        loads[best] += weights[v]
    return parts


def _refine(weights, adj, parts, loads, k, cap):
    """Dispatch refinement by size: exhaustive move-with-rollback passes on
    small graphs (quality matters most there), heap-driven positive-gain
    passes on large ones (speed matters most there)."""
    if len(parts) <= 96:
        _refine_small(weights, adj, parts, loads, k, cap)
    else:
        _refine_large(weights, adj, parts, loads, k, cap)


def _refine_small(weights, adj, parts, loads, k, cap, max_passes=12):
    """Boundary refinement with rollback to the best prefix of each pass.

    Classic move-based scheme: every pass tentatively moves each vertex at
    most once to its best target partition (even at a momentary loss, to
    climb out of local minima), tracks the running best cut, and rolls the
    tail back. Balance is a hard constraint on every move.
    """
    n = len(parts)
    for _ in range(max_passes):
        conn = [[0] * k for _ in range(n)]
        for v in range(n):
            for u, w in adj[v].items():
                conn[v][parts[u]] += w
        locked = [False] * n
        trail = []  # (v, src, dst)
        gain_sum = 0
        best_sum, best_len = 0, 0
        for _step in range(n):
            best_move, best_gain = None, None
            for v in range(n):
                if locked[v]:
                    continue
                src = parts[v]
                cv = conn[v]
                for dst in range(k):
                    if dst == src:
                        continue
                    if weights[v] and loads[dst] + weights[v] > cap:
                        continue
                    gain = cv[dst] - cv[src]
                    key = (gain, -v, -dst)
                    if best_gain is None or key > best_gain:
                        best_gain = key
                        best_move = (v, src, dst, gain)
            if best_move is None:
                break
            v, src, dst, gain = best_move
            parts[v] = dst
            loads[src] -= weights[v]
            loads[dst] += weights[v]
            locked[v] = True
            trail.append((v, src, dst))
            gain_sum += gain
            for u, w in adj[v].items():
                conn[u][src] -= w
                conn[u][dst] += w
            if gain_sum > best_sum:
                best_sum, best_len = gain_sum, len(trail)
        for v, src, dst in reversed(trail[best_len:]):
            parts[v] = src
            loads[dst] -= weights[v]
            loads[src] += weights[v]
        if best_sum <= 0:
            break


def _refine_large(weights, adj, parts, loads, k, cap, max_passes=6):
    """Greedy positive-gain moves via a lazily-invalidated heap.

    Every applied move strictly lowers the cut, so passes terminate; stale
    heap entries are re-pushed with their corrected gain when popped.
    """
    import heapq

    n = len(parts)
    conn = [[0] * k for _ in range(n)]
    for v in range(n):
        row = conn[v]
        for u, w in adj[v].items():
            row[parts[u]] += w
    for _ in range(max_passes):
        heap = []
        for v in range(n):
            src = parts[v]
            cv = conn[v]
            for dst in range(k):
                if dst != src and cv[dst] > cv[src]:
                    heapq.heappush(heap, (cv[src] - cv[dst], v, dst))
        moved = 0
        while heap:
            neg_gain, v, dst = heapq.heappop(heap)
            src = parts[v]
            if dst == src:
                continue
            gain = conn[v][dst] - conn[v][src]
            if gain <= 0:
                continue
            if -neg_gain != gain:
                heapq.heappush(heap, (-gain, v, dst))
                continue
            if weights[v] and loads[dst] + weights[v] > cap:
                continue
            parts[v] = dst
            loads[src] -= weights[v]
            loads[dst] += weights[v]
            moved += 1
            for u, w in adj[v].items():
                cu = conn[u]
                cu[src] -= w
                cu[dst] += w
                usrc = parts[u]
                for d2 in range(k):
                    if d2 != usrc and cu[d2] > cu[usrc]:
                        heapq.heappush(heap, (cu[usrc] - cu[d2], u, d2))
        if moved == 0:
            break


# ---------------------------------------------------------------------------
# lookup table
# ---------------------------------------------------------------------------


@dataclass
class LookupTable:
    """bucket -> partition map for covered buckets, hash rule for the rest.

    Only covered buckets can carry the hot flag; everything else resolves
    to ``bucket % k``. The table is what the region planner consults to
    find contended buckets and their hosts.
    """

    k: int
    entries: dict = field(default_factory=dict)  # bucket -> (partition, hot, p_c)
    coverage: float = 1.0
    hot_threshold: float = 0.01
    epsilon: float = 0.0

    def partition_of(self, bucket):
        entry = self.entries.get(bucket)
        if entry is not None:
            return entry[0]
        return bucket % self.k

    def is_hot(self, bucket):
        entry = self.entries.get(bucket)
        return bool(entry and entry[1])

    def hot_buckets(self):
        return {b for b, e in self.entries.items() if e[1]}

    def override(self, mapping):
        """Pin explicit placements (ground-truth layouts in tests/demos)."""
        for bucket, pid in mapping.items():
            old = self.entries.get(bucket)
            self.entries[bucket] = (pid, old[1] if old else False, old[2] if old else 0.0)
        return self

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.k},{self.epsilon},{self.coverage},{self.hot_threshold}\n")
            for bucket in sorted(self.entries):
                pid, hot, p_c = self.entries[bucket]
                fh.write(f"{bucket},{pid},{int(hot)},{p_c:.6f}\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            k, epsilon, coverage, hot_threshold = (
                int(header[0]), float(header[1]), float(header[2]), float(header[3]),
            )
            table = cls(k=k, coverage=coverage, hot_threshold=hot_threshold,
                        epsilon=epsilon)
            for line in fh:
                if not line.strip():
                    continue
                bucket, pid, hot, p_c = line.strip().split(",")
                table.entries[int(bucket)] = (int(pid), bool(int(hot)), float(p_c))
        return table


def emit_lookup_table(assignment, stats, hot_threshold=0.01, coverage=1.0):
    """Keep the top-coverage fraction of buckets (by conflict likelihood).

    Covered buckets map to their assigned partitions and are flagged hot
    when their likelihood reaches the threshold; the rest fall back to
    hash placement and occupy no table space. coverage=0 therefore yields
    pure hash partitioning.
    """
    if not 0.0 <= coverage <= 1.0:
        raise ConfigError("coverage must be within [0, 1]")
    bucket_parts = assignment.bucket_partitions()
    ranked = sorted(bucket_parts, key=lambda b: (-stats.p_c(b), b))
    n_covered = int(round(coverage * len(ranked)))
    table = LookupTable(k=assignment.k, coverage=coverage,
                        hot_threshold=hot_threshold, epsilon=assignment.epsilon)
    for bucket in ranked[:n_covered]:
        p_c = stats.p_c(bucket)
        table.entries[bucket] = (bucket_parts[bucket], p_c >= hot_threshold, p_c)
    return table


# ---------------------------------------------------------------------------
# sample file round-trip (external interface)
# ---------------------------------------------------------------------------


def save_samples(samples, path):
    """One line per sampled txn: `txn_type,R:<bucket;...>,W:<bucket;...>`."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            reads = ";".join(str(b) for b in s.read_buckets)
            writes = ";".join(str(b) for b in s.write_buckets)
            fh.write(f"{s.txn_type},R:{reads},W:{writes}\n")


def load_samples(path):
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                txn_type, r_part, w_part = line.split(",")
                assert r_part.startswith("R:") and w_part.startswith("W:")
                reads = [int(b) for b in r_part[2:].split(";") if b]
                writes = [int(b) for b in w_part[2:].split(";") if b]
            except (ValueError, AssertionError) as exc:
                raise ConfigError(f"bad sample line {i}: {line!r}") from exc
            samples.append(AccessSample(txn_type, reads, writes, sampled_at=i))
    return samples
