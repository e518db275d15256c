"""Transaction execution protocols over the simulated cluster.

Four protocols run on the same event-driven substrate: 2PL+2PC with either
NO_WAIT or WAIT_DIE deadlock prevention (the final execution round always
piggybacks the prepare), a timestamp-range OCC in the style of distributed
optimistic validators, a reorder-only variant that merely accesses hot
buckets last under a single commit point, and the two-region protocol that
executes a transaction's hot part at a single inner host which commits
early -- before the cold (outer) participants finish 2PC.

Each partition is one simulator node; many transactions are in flight per
partition as interleaved state machines, but a partition's state is only
ever touched by its own message handlers. Cross-partition effects travel
only as messages.
"""
from __future__ import annotations

import math
import random as _random
from dataclasses import dataclass, field

from .errors import ConfigError
from .simulator import LatencyModel, Simulator, UP
from .storage import (
    NO_WAIT,
    WAIT_DIE,
    LockMode,
    LockResult,
    PartitionStore,
    TxnTimestamp,
    bucket_of,
)
from .txn import READ_KINDS, build_dependency_graph, plan_regions

INF = math.inf

COMMITTED = "committed"
ABORTED = "aborted"

# stage names used by crash-injection hooks and recovery logs
OUTER_EXEC_STARTED = "outer_exec_started"
OUTER_LOCKED = "outer_locked"
INNER_RECEIVED = "inner_received"
BEFORE_INNER_SHIP = "before_inner_ship"
AFTER_INNER_SHIP = "after_inner_ship"
INNER_COMMITTED = "inner_committed"
BEFORE_OUTER_COMMIT = "before_outer_commit"
OUTER_COMMITTED = "outer_committed"


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------


@dataclass(slots=True)
class MStart:
    txn_id: int


@dataclass(slots=True)
class MRetry:
    txn_id: int
    attempt: int


@dataclass(slots=True)
class MExec:
    txn_id: int
    attempt: int
    coordinator: int
    ts: tuple  # (logical, node)
    items: list  # [(op_id, bucket, key, kind)]
    modes: dict  # bucket -> LockMode, max over the whole transaction
    prepare: bool


@dataclass(slots=True)
class MExecReply:
    txn_id: int
    attempt: int
    node: int
    ok: bool
    values: dict
    denied_bucket: int = -1


@dataclass(slots=True)
class MCommit:
    txn_id: int
    attempt: int
    writes: list  # [(op_id, bucket, key, value, kind)]


@dataclass(slots=True)
class MAbort:
    txn_id: int
    attempt: int


@dataclass(slots=True)
class MDone:
    txn_id: int
    attempt: int
    node: int


@dataclass(slots=True)
class ReplicationMsg:
    """Synchronous log-shipping unit; replicas apply strictly in seq order."""

    primary: int
    seq_id: int
    txn_id: int
    attempt: int
    new_values: list  # [(op_id, bucket, key, value, kind)]
    read_set: dict | None  # full transaction read-set, inner-region path only
    notify: str  # "primary" | "coordinator"
    coordinator: int


@dataclass(slots=True)
class MShipApplied:
    primary: int
    seq_id: int
    txn_id: int
    attempt: int
    backup: int


@dataclass(slots=True)
class MInnerNotify:
    txn_id: int
    attempt: int
    backup: int


@dataclass(slots=True)
class MNicDone:
    txn_id: int
    attempt: int


@dataclass(slots=True)
class MInnerExec:
    txn_id: int
    attempt: int
    coordinator: int
    ts: tuple
    read_set: dict  # outer reads, op_id -> value


@dataclass(slots=True)
class MInnerReply:
    txn_id: int
    attempt: int
    ok: bool
    values: dict  # inner reads
    outputs: dict
    commit_time: int = -1


@dataclass(slots=True)
class MOccExec:
    txn_id: int
    attempt: int
    coordinator: int
    items: list


@dataclass(slots=True)
class MOccExecReply:
    txn_id: int
    attempt: int
    node: int
    values: dict


@dataclass(slots=True)
class MOccValidate:
    txn_id: int
    attempt: int


@dataclass(slots=True)
class MOccValidateReply:
    txn_id: int
    attempt: int
    node: int
    ok: bool
    lo: float
    hi: float


@dataclass(slots=True)
class MOccFinal:
    txn_id: int
    attempt: int
    commit: bool
    cts: int
    writes: list


@dataclass(slots=True)
class MOccFinalAck:
    txn_id: int
    attempt: int
    node: int


# ---------------------------------------------------------------------------
# outcomes & history
# ---------------------------------------------------------------------------


@dataclass
class TxnOutcome:
    """Result of one attempt of one transaction."""

    txn_id: int
    attempt: int
    status: str
    abort_site: tuple | None  # ("outer", partition) | ("inner",) | ("validation",)
    submit_time: int
    finish_time: int
    commit_time: int = -1
    contention_spans: dict = field(default_factory=dict)  # bucket -> duration
    participants: int = 1
    final: bool = True

    @property
    def latency(self):
        return self.finish_time - self.submit_time

    @property
    def distributed(self):
        return self.participants > 1


class History:
    """Record of a run: accesses, lock spans, per-attempt outcomes.

    Access order within a bucket is totalized by a monotone counter so the
    serializability checker never depends on simultaneous-time ties.
    Access recording can be disabled for large metric runs; spans and
    outcomes are always kept.
    """

    def __init__(self, record_accesses=True):
        self.record_accesses = record_accesses
        self.accesses = []   # (txn, attempt, bucket, key, kind, time, ctr)
        self.span_map = {}   # (txn, attempt) -> {bucket: duration}
        self.outcomes = []   # TxnOutcome per attempt
        self.final = {}      # txn -> final TxnOutcome
        self._ctr = 0

    def record_access(self, txn, attempt, bucket, key, kind, time):
        self._ctr += 1
        if self.record_accesses:
            self.accesses.append((txn, attempt, bucket, key, kind, time, self._ctr))

    def record_span(self, bucket, grant, release, txn, attempt):
        self.span_map.setdefault((txn, attempt), {})[bucket] = release - grant

    def record_outcome(self, outcome):
        self.outcomes.append(outcome)
        if outcome.final:
            self.final[outcome.txn_id] = outcome

    def spans_for(self, txn, attempt):
        return self.span_map.get((txn, attempt), {})

    def committed_ids(self):
        return {t for t, o in self.final.items() if o.status == COMMITTED}

    def committed_attempts(self):
        return {(o.txn_id, o.attempt) for o in self.outcomes if o.status == COMMITTED}


def measure_contention_span(outcomes, committed_only=True):
    """Per-bucket duration statistics over a stream of transaction outcomes.

    Returns {bucket: {count, mean, median, max}}. By default only spans of
    committed attempts enter the distribution: an aborted attempt releases
    its partial locks almost immediately, and those near-zero holds would
    drown the signal the metric exists to expose.
    """
    per_bucket = {}
    for outcome in outcomes:
        if committed_only and outcome.status != COMMITTED:
            continue
        for bucket, span in outcome.contention_spans.items():
            per_bucket.setdefault(bucket, []).append(span)
    stats = {}
    for bucket, spans in per_bucket.items():
        spans.sort()
        n = len(spans)
        mid = n // 2
        median = spans[mid] if n % 2 else (spans[mid - 1] + spans[mid]) / 2
        stats[bucket] = {
            "count": n,
            "mean": sum(spans) / n,
            "median": median,
            "max": spans[-1],
        }
    return stats


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------


@dataclass
class ReplicaGroup:
    """Primary plus exactly f backups; liveness needs <= f of f+1 down."""

    primary: int
    backups: list


class _NodeTxn:
    """Participant-side state for one (txn, attempt) at one node."""

    __slots__ = (
        "ts", "coordinator", "granted", "modes", "pending", "cursor",
        "values", "queued_bucket", "await_acks", "commit_writes",
        "inner", "inner_msg", "read_ws", "reads", "writes", "occ_final",
    )

    def __init__(self, ts, coordinator):
        self.ts = ts
        self.coordinator = coordinator
        self.granted = {}       # bucket -> grant time
        self.modes = {}         # bucket -> LockMode
        self.pending = []       # exec items not yet processed
        self.cursor = 0
        self.values = {}
        self.queued_bucket = None
        self.await_acks = 0
        self.commit_writes = None
        self.inner = False
        self.inner_msg = None
        self.read_ws = {}       # OCC: bucket -> wts seen at read time
        self.reads = set()
        self.writes = set()
        self.occ_final = None


class Node:
    """One partition: primary store, backup copies, logs, protocol state."""

    def __init__(self, node_id, cluster, debug_checks=True):
        self.id = node_id
        self.cluster = cluster
        self.store = PartitionStore(node_id, debug_checks=debug_checks)
        self.replica_stores = {}  # primary partition -> PartitionStore copy
        self.log = []             # append-only; a crashed node's log is fenced off
        self.repl_seq = 0
        self.applied_seq = {}     # primary -> last applied seq
        self.replica_msgs = {}    # (primary, seq) -> ReplicationMsg
        self.part = {}            # (txn, attempt) -> _NodeTxn
        self.inner_part = {}      # (txn, attempt) -> _NodeTxn, inner activations
        self.waiting_ts = {}      # TxnTimestamp -> (txn, attempt, region)
        # OCC metadata: per-bucket committed read/write timestamps, pending
        # reader/writer id sets, and the per-node timetable of live ranges.
        self.occ_wts = {}
        self.occ_rts = {}
        self.occ_readers = {}
        self.occ_writers = {}
        self.occ_table = {}       # txn -> [lo, hi, state]

    def handle(self, src, msg):
        self.cluster.engine.on_message(self, src, msg)


class Cluster:
    """Simulated cluster wiring: nodes, replica groups, admission, history."""

    def __init__(self, partitions, lookup, latency=None, replication_f=2,
                 seed=0, inflight_per_partition=8, max_attempts=500,
                 debug_checks=True, trace=False, record_accesses=True,
                 runtime_bucket_space=4096):
        if replication_f >= partitions and replication_f > 0:
            raise ConfigError("replication_f must be smaller than partitions")
        self.k = partitions
        self.lookup = lookup
        self.sim = Simulator(partitions, latency=latency or LatencyModel(),
                             seed=seed, trace=trace)
        self.nodes = [Node(i, self, debug_checks=debug_checks)
                      for i in range(partitions)]
        for node in self.nodes:
            self.sim.register(node.id, node.handle)
        self.f = replication_f
        self.groups = [
            ReplicaGroup(p, [(p + i) % partitions for i in range(1, replication_f + 1)])
            for p in range(partitions)
        ]
        for group in self.groups:
            for b in group.backups:
                self.nodes[b].replica_stores[group.primary] = PartitionStore(
                    group.primary, debug_checks=False
                )
        self.history = History(record_accesses=record_accesses)
        self.inflight_per_partition = inflight_per_partition
        self.max_attempts = max_attempts
        self.runtime_bucket_space = runtime_bucket_space
        self.seed = seed
        self._ts_counter = 0
        self._backoff_rng = _random.Random(f"{seed}:backoff")
        self.engine = None
        self.meta = {}            # txn -> dict(program=, graph=, home=, plan=)
        self.queues = [[] for _ in range(partitions)]
        self._cursor = [0] * partitions
        self.crash_times = []     # [(node, time)] wall-clock crash schedule
        self.stage_crashes = {}   # (txn, stage) -> node to crash

    # -- setup -----------------------------------------------------------------

    def load_workload(self, workload):
        """Place initial buckets and records on primaries and their backups."""
        for bucket in workload.all_buckets():
            self._ensure_bucket(bucket)
        for bucket, key, value in workload.initial_records():
            pid = self.lookup.partition_of(bucket)
            self._ensure_bucket(bucket)
            if key is None:
                continue
            self.nodes[pid].store.load(bucket, key, value)
            for b in self.groups[pid].backups:
                self.nodes[b].replica_stores[pid].load(bucket, key, value)

    def _ensure_bucket(self, bucket):
        pid = self.lookup.partition_of(bucket)
        self.nodes[pid].store.ensure_bucket(bucket)
        for b in self.groups[pid].backups:
            self.nodes[b].replica_stores[pid].ensure_bucket(bucket)

    def next_ts(self, node):
        self._ts_counter += 1
        return TxnTimestamp(self._ts_counter, node)

    def resolve_bucket(self, op, key):
        """Static bucket when known; otherwise hash the materialized key."""
        if op.bucket is not None:
            return op.bucket
        return bucket_of(key, self.runtime_bucket_space)

    # -- crash injection ----------------------------------------------------------

    def crash_at_stage(self, txn_id, stage, node):
        self.stage_crashes[(txn_id, stage)] = node

    def on_stage(self, txn_id, stage, current_node):
        """Fire a scheduled stage crash; True if the current node just died."""
        target = self.stage_crashes.pop((txn_id, stage), None)
        if target is None:
            return False
        self.sim.crash_now(target)
        return target == current_node

    # -- run ------------------------------------------------------------------------

    def run(self, programs, protocol, policy=NO_WAIT, max_attempts=None):
        """Drive a batch of programs to completion; returns final outcomes.

        Closed-loop admission: each partition keeps at most
        inflight_per_partition of its transactions in flight, admitting the
        next when one finishes. Aborted attempts retry with a fresh
        timestamp after a short seeded backoff, up to max_attempts.
        """
        self.engine = make_engine(self, protocol, policy)
        if max_attempts is not None:
            self.max_attempts = max_attempts
        for node, time in self.crash_times:
            self.sim.crash(node, at=time)
        for txn_id, program in enumerate(programs):
            self.meta[txn_id] = {
                "program": program,
                "graph": build_dependency_graph(program),
                "home": program.home_partition,
            }
            self.queues[program.home_partition].append(txn_id)
        for p in range(self.k):
            for _ in range(self.inflight_per_partition):
                self._admit_next(p)
        self.sim.run_until_quiescent()
        return [self.history.final[t] for t in sorted(self.history.final)]

    def _admit_next(self, partition):
        if self.sim.status(partition) != UP:
            return
        cur = self._cursor[partition]
        if cur >= len(self.queues[partition]):
            return
        self._cursor[partition] += 1
        self.sim.call_later(partition, 0, MStart(self.queues[partition][cur]))

    def txn_finished(self, txn_id, attempt, outcome):
        """Record an attempt outcome; retry on abort, admit next when final."""
        self.history.record_outcome(outcome)
        home = self.meta[txn_id]["home"]
        if outcome.final:
            self._admit_next(home)
        else:
            backoff = self._backoff_rng.randint(1, 4) * self.sim.latency.local_delay
            self.sim.call_later(home, backoff, MRetry(txn_id, attempt + 1))

    # -- verification helpers ---------------------------------------------------------

    def scan_writers(self):
        """(bucket, key) -> last writer txn over all live primary stores."""
        writers = {}
        for node in self.nodes:
            if self.sim.status(node.id) == UP:
                writers.update(node.store.last_writer)
        return writers

    def replicas_consistent(self):
        """Replica copies must equal their primary's contents when quiesced."""
        for group in self.groups:
            if self.sim.status(group.primary) != UP:
                continue
            want = self.nodes[group.primary].store.snapshot()
            for b in group.backups:
                if self.sim.status(b) != UP:
                    continue
                if self.nodes[b].replica_stores[group.primary].snapshot() != want:
                    return False
        return True


def make_engine(cluster, protocol, policy=NO_WAIT):
    if protocol == "no_wait":
        return LockingEngine(cluster, NO_WAIT)
    if protocol == "wait_die":
        return LockingEngine(cluster, WAIT_DIE)
    if protocol == "partition_only":
        return LockingEngine(cluster, policy)
    if protocol == "occ":
        return OccEngine(cluster)
    if protocol == "two_region":
        return TwoRegionEngine(cluster, policy)
    if protocol == "reorder_only":
        return ReorderOnlyEngine(cluster, policy)
    raise ConfigError(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# coordinator-side state
# ---------------------------------------------------------------------------


class _CoordTxn:
    __slots__ = (
        "txn_id", "attempt", "program", "graph", "plan", "home", "ts",
        "submit_time", "stages", "stage_idx", "pending", "participants",
        "outer_contacted", "reads", "phase", "decision", "commit_pending",
        "static_modes", "inner_ok", "inner_notifies", "inner_outputs",
        "commit_time", "occ_lo", "occ_hi", "occ_all_ok", "abort_site",
    )

    def __init__(self, txn_id, attempt, program, graph, home, ts, now):
        self.txn_id = txn_id
        self.attempt = attempt
        self.program = program
        self.graph = graph
        self.plan = None
        self.home = home
        self.ts = ts
        self.submit_time = now
        self.stages = []
        self.stage_idx = 0
        self.pending = set()
        self.participants = set()
        self.outer_contacted = set()
        self.reads = {}
        self.phase = "exec"
        self.decision = None
        self.commit_pending = set()
        self.static_modes = {}
        self.inner_ok = False
        self.inner_notifies = 0
        self.inner_outputs = {}
        self.commit_time = -1
        self.occ_lo = 0.0
        self.occ_hi = INF
        self.occ_all_ok = True
        self.abort_site = None


def _pk_depth_stages(program, graph, ops=None):
    """Group ops by key-dependency depth; ops in one stage run in parallel."""
    include = set(ops) if ops is not None else {op.op_id for op in program.ops}
    depth = {}
    for op in program.ops:
        if op.op_id not in include:
            continue
        preds = [p for p in graph.pk_preds(op.op_id) if p in include]
        depth[op.op_id] = 1 + max((depth[p] for p in preds), default=-1)
    stages = {}
    for op_id, d in depth.items():
        stages.setdefault(d, []).append(op_id)
    return [sorted(stages[d]) for d in sorted(stages)]


def _static_bucket_modes(program, op_ids=None):
    """Max lock mode per statically-known bucket over the given ops."""
    include = set(op_ids) if op_ids is not None else None
    modes = {}
    for op in program.ops:
        if include is not None and op.op_id not in include:
            continue
        if op.bucket is None:
            continue
        mode = LockMode.EXCLUSIVE if op.is_write() else LockMode.SHARED
        if modes.get(op.bucket) is not LockMode.EXCLUSIVE:
            modes[op.bucket] = mode
    return modes


# ---------------------------------------------------------------------------
# shared engine machinery
# ---------------------------------------------------------------------------


class BaseEngine:
    protocol = "base"

    def __init__(self, cluster):
        self.cluster = cluster
        self.txns = {}  # txn_id -> _CoordTxn of the active attempt

    def on_message(self, node, src, msg):
        kind = type(msg)
        if kind is MStart:
            self.start(node, msg.txn_id, 0)
        elif kind is MRetry:
            self.start(node, msg.txn_id, msg.attempt)
        else:
            handler = getattr(self, "on_" + kind.__name__, None)
            if handler is None:
                raise ConfigError(f"{self.protocol} cannot handle {kind.__name__}")
            handler(node, src, msg)

    def _new_coord(self, node, txn_id, attempt):
        meta = self.cluster.meta[txn_id]
        ts = self.cluster.next_ts(node.id)
        ct = _CoordTxn(txn_id, attempt, meta["program"], meta["graph"],
                       meta["home"], ts, self.cluster.sim.now())
        self.txns[txn_id] = ct
        return ct

    def _resolve_key(self, ct, op):
        src_kind, src = op.key_source
        if src_kind == "lit":
            return src
        base = ct.reads.get(src)
        if base is None:
            return None
        return op.key_fn(base) if op.key_fn else base

    def _items_for(self, ct, op_ids):
        """Materialize (op_id, bucket, key, kind) items, grouped by partition."""
        by_node = {}
        for op_id in sorted(op_ids):
            op = ct.program.op(op_id)
            key = self._resolve_key(ct, op)
            bucket = self.cluster.resolve_bucket(op, key)
            pid = self.cluster.lookup.partition_of(bucket)
            by_node.setdefault(pid, []).append((op_id, bucket, key, op.kind))
        return by_node

    def _modes_for(self, ct, items):
        """Lock modes for a message: whole-transaction max per bucket."""
        modes = {}
        for op_id, bucket, _key, kind in items:
            if bucket in ct.static_modes:
                modes[bucket] = ct.static_modes[bucket]
            else:
                mode = (LockMode.EXCLUSIVE if kind != "read" else LockMode.SHARED)
                if modes.get(bucket) is not LockMode.EXCLUSIVE:
                    modes[bucket] = mode
        return modes

    def _finish(self, ct, status, abort_site=None, commit_time=None):
        cluster = self.cluster
        now = cluster.sim.now()
        final = status == COMMITTED or ct.attempt + 1 >= cluster.max_attempts
        outcome = TxnOutcome(
            txn_id=ct.txn_id,
            attempt=ct.attempt,
            status=status,
            abort_site=abort_site,
            submit_time=ct.submit_time,
            finish_time=now,
            commit_time=commit_time if commit_time is not None else -1,
            contention_spans=cluster.history.spans_for(ct.txn_id, ct.attempt),
            participants=max(1, len(ct.participants)),
            final=final,
        )
        self.txns.pop(ct.txn_id, None)
        cluster.txn_finished(ct.txn_id, ct.attempt, outcome)

    # -- participant-side lock bookkeeping (locking protocols) ------------------

    def _release_node_locks(self, node, ns, txn_id, attempt):
        buckets = set(ns.granted)
        if ns.ts in node.waiting_ts and ns.queued_bucket is not None:
            buckets.add(ns.queued_bucket)
            del node.waiting_ts[ns.ts]
            ns.queued_bucket = None
        if not buckets:
            return
        now = self.cluster.sim.now()
        for bucket, grant in ns.granted.items():
            self.cluster.history.record_span(bucket, grant, now, txn_id, attempt)
        promoted = node.store.release_locks(ns.ts, sorted(buckets))
        ns.granted = {}
        self._resume_promoted(node, promoted)

    def _resume_promoted(self, node, promoted):
        now = self.cluster.sim.now()
        for bucket, ts, _mode in promoted:
            ref = node.waiting_ts.pop(ts, None)
            if ref is None:
                continue
            txn_id, attempt, region = ref
            table = node.inner_part if region == "inner" else node.part
            ns = table.get((txn_id, attempt))
            if ns is None:
                continue
            ns.granted[bucket] = now
            ns.queued_bucket = None
            if region == "inner":
                msg = ns.inner_msg
                ns.inner_msg = None
                self._inner_exec(node, node.id, msg)
            else:
                self._run_items(node, txn_id, attempt, ns)


# ---------------------------------------------------------------------------
# 2PL + 2PC
# ---------------------------------------------------------------------------


class LockingEngine(BaseEngine):
    """Conventional distributed 2PL with 2PC and piggybacked prepare.

    The growing phase acquires all locks, remote ones via per-stage execute
    messages; the last stage doubles as the prepare round. Writes are
    buffered at the coordinator and shipped with the commit decision;
    participants replicate to their backups, apply, release, then ack.
    Any lock denial aborts the whole attempt.
    """

    protocol = "2pl"

    def __init__(self, cluster, policy):
        super().__init__(cluster)
        self.policy = policy

    # -- coordinator --------------------------------------------------------------

    def start(self, node, txn_id, attempt):
        ct = self._new_coord(node, txn_id, attempt)
        ct.static_modes = _static_bucket_modes(ct.program)
        ct.stages = self._stages(ct)
        self._launch_stage(node, ct)

    def _stages(self, ct):
        return _pk_depth_stages(ct.program, ct.graph)

    def _launch_stage(self, node, ct):
        by_node = self._items_for(ct, ct.stages[ct.stage_idx])
        last = ct.stage_idx == len(ct.stages) - 1
        ct.pending = set(by_node)
        ct.participants |= set(by_node)
        for pid, items in sorted(by_node.items()):
            msg = MExec(ct.txn_id, ct.attempt, node.id,
                        (ct.ts.logical, ct.ts.node), items,
                        self._modes_for(ct, items), last)
            if pid == node.id:
                self._participant_exec(node, msg)
            else:
                self.cluster.sim.send(node.id, pid, msg)

    def _on_exec_reply(self, node, msg):
        ct = self.txns.get(msg.txn_id)
        if ct is None or ct.attempt != msg.attempt or ct.phase != "exec":
            return
        if not msg.ok:
            self._abort_attempt(node, ct, ("outer", msg.node))
            return
        ct.reads.update(msg.values)
        ct.pending.discard(msg.node)
        if ct.pending:
            return
        if ct.stage_idx + 1 < len(ct.stages):
            ct.stage_idx += 1
            self._launch_stage(node, ct)
            return
        self._decide(node, ct)

    def on_MExecReply(self, node, src, msg):
        self._on_exec_reply(node, msg)

    def _decide(self, node, ct):
        decision = ct.program.logic(ct.reads)
        if not decision.commit:
            self._abort_attempt(node, ct, ("inner",))
            return
        ct.decision = decision
        ct.phase = "commit"
        writes_by_node = {}
        for op_id in sorted(decision.writes):
            op = ct.program.op(op_id)
            key = self._resolve_key(ct, op)
            bucket = self.cluster.resolve_bucket(op, key)
            pid = self.cluster.lookup.partition_of(bucket)
            writes_by_node.setdefault(pid, []).append(
                (op_id, bucket, key, decision.writes[op_id], op.kind)
            )
        ct.commit_pending = set(ct.participants)
        for pid in sorted(ct.participants):
            msg = MCommit(ct.txn_id, ct.attempt, writes_by_node.get(pid, []))
            if pid == node.id:
                self._participant_commit(node, msg)
            else:
                self.cluster.sim.send(node.id, pid, msg)

    def _abort_attempt(self, node, ct, site):
        ct.phase = "aborting"
        for pid in sorted(ct.participants):
            msg = MAbort(ct.txn_id, ct.attempt)
            if pid == node.id:
                self._participant_abort(node, msg)
            else:
                self.cluster.sim.send(node.id, pid, msg)
        self._finish(ct, ABORTED, abort_site=site)

    def on_MDone(self, node, src, msg):
        ct = self.txns.get(msg.txn_id)
        if ct is None or ct.attempt != msg.attempt or ct.phase != "commit":
            return
        ct.commit_pending.discard(msg.node)
        if not ct.commit_pending:
            self._finish(ct, COMMITTED, commit_time=ct.commit_time)

    # -- participant ----------------------------------------------------------------

    def on_MExec(self, node, src, msg):
        self._participant_exec(node, msg)

    def _participant_exec(self, node, msg):
        key = (msg.txn_id, msg.attempt)
        ns = node.part.get(key)
        if ns is None:
            ns = node.part[key] = _NodeTxn(TxnTimestamp(*msg.ts), msg.coordinator)
        ns.modes.update(msg.modes)
        ns.pending.extend(msg.items)
        self._run_items(node, msg.txn_id, msg.attempt, ns)

    def _run_items(self, node, txn_id, attempt, ns):
        cluster = self.cluster
        now = cluster.sim.now()
        while ns.cursor < len(ns.pending):
            op_id, bucket, key, kind = ns.pending[ns.cursor]
            if bucket not in ns.granted:
                result = node.store.acquire_lock(
                    bucket, ns.modes[bucket], ns.ts, self.policy
                )
                if result is LockResult.ABORT:
                    self._release_node_locks(node, ns, txn_id, attempt)
                    node.part.pop((txn_id, attempt), None)
                    self._reply(node, ns.coordinator,
                                MExecReply(txn_id, attempt, node.id, False, {},
                                           bucket))
                    return
                if result is LockResult.ENQUEUED:
                    node.waiting_ts[ns.ts] = (txn_id, attempt, "outer")
                    ns.queued_bucket = bucket
                    return
                ns.granted[bucket] = now
            if kind in READ_KINDS:
                value = node.store.read(bucket, key, ns.ts)
                ns.values[op_id] = value
                cluster.history.record_access(txn_id, attempt, bucket, key, "r", now)
            ns.cursor += 1
        reply = MExecReply(txn_id, attempt, node.id, True, dict(ns.values))
        ns.values = {}
        self._reply(node, ns.coordinator, reply)

    def _reply(self, node, coordinator, msg):
        if coordinator == node.id:
            self._dispatch_local_reply(node, msg)
        else:
            self.cluster.sim.send(node.id, coordinator, msg)

    def _dispatch_local_reply(self, node, msg):
        kind = type(msg)
        if kind is MExecReply:
            self._on_exec_reply(node, msg)
        elif kind is MDone:
            self.on_MDone(node, node.id, msg)
        elif kind is MInnerReply:
            self._on_inner_reply(node, msg)
        else:
            raise ConfigError(f"unexpected local reply {kind.__name__}")

    def on_MAbort(self, node, src, msg):
        self._participant_abort(node, msg)

    def _participant_abort(self, node, msg):
        ns = node.part.pop((msg.txn_id, msg.attempt), None)
        if ns is None:
            return
        self._release_node_locks(node, ns, msg.txn_id, msg.attempt)

    def on_MCommit(self, node, src, msg):
        self._participant_commit(node, msg)

    def _participant_commit(self, node, msg):
        ns = node.part.get((msg.txn_id, msg.attempt))
        if ns is None:
            return
        ns.commit_writes = msg.writes
        if self.cluster.f > 0 and msg.writes:
            self._ship(node, msg.txn_id, msg.attempt, msg.writes, None,
                       "primary", ns.coordinator)
            ns.await_acks = self.cluster.f
            return
        self._apply_and_release(node, ns, msg.txn_id, msg.attempt)

    # -- replication ------------------------------------------------------------------

    def _ship(self, node, txn_id, attempt, new_values, read_set, notify, coord):
        node.repl_seq += 1
        msg = ReplicationMsg(node.id, node.repl_seq, txn_id, attempt,
                             new_values, read_set, notify, coord)
        node.log.append(("shipped", txn_id, attempt, node.repl_seq))
        for backup in self.cluster.groups[node.id].backups:
            self.cluster.sim.send(node.id, backup, msg, reliable=True)
        return node.repl_seq

    def on_ReplicationMsg(self, node, src, msg):
        expected = node.applied_seq.get(msg.primary, 0) + 1
        assert msg.seq_id == expected, "replication must apply in seq order"
        node.applied_seq[msg.primary] = msg.seq_id
        node.replica_msgs[(msg.primary, msg.seq_id)] = msg
        store = node.replica_stores[msg.primary]
        for _op, bucket, key, value, kind in msg.new_values:
            if kind == "delete":
                store.delete(bucket, key)
            else:
                store.write(bucket, key, value)
        node.log.append(("applied", msg.txn_id, msg.attempt, msg.primary, msg.seq_id))
        if msg.notify == "coordinator":
            self.cluster.sim.send(node.id, msg.coordinator,
                                  MInnerNotify(msg.txn_id, msg.attempt, node.id))
        else:
            self.cluster.sim.send(
                node.id, msg.primary,
                MShipApplied(msg.primary, msg.seq_id, msg.txn_id, msg.attempt,
                             node.id))

    def on_MShipApplied(self, node, src, msg):
        ns = node.part.get((msg.txn_id, msg.attempt))
        if ns is None or ns.await_acks == 0:
            return
        ns.await_acks -= 1
        if ns.await_acks == 0:
            self._apply_and_release(node, ns, msg.txn_id, msg.attempt)

    def _apply_and_release(self, node, ns, txn_id, attempt):
        now = self.cluster.sim.now()
        for op_id, bucket, key, value, kind in ns.commit_writes or []:
            if kind == "delete":
                node.store.delete(bucket, key, ns.ts, writer=txn_id)
            else:
                node.store.write(bucket, key, value, ns.ts, writer=txn_id)
            self.cluster.history.record_access(txn_id, attempt, bucket, key, "w", now)
        node.log.append(("committed", txn_id, attempt))
        self._release_node_locks(node, ns, txn_id, attempt)
        node.part.pop((txn_id, attempt), None)
        ct = self.txns.get(txn_id)
        if ct is not None and ct.attempt == attempt and ct.commit_time < 0:
            ct.commit_time = now
        self._reply(node, ns.coordinator, MDone(txn_id, attempt, node.id))

    # present for subclass use; the base engine has no inner region
    def _inner_exec(self, node, src, msg):
        raise ConfigError("plain 2PL has no inner region")

    def _on_inner_reply(self, node, msg):
        raise ConfigError("plain 2PL has no inner region")


# ---------------------------------------------------------------------------
# reorder-only variant: hot buckets last, single commit point
# ---------------------------------------------------------------------------


class ReorderOnlyEngine(LockingEngine):
    """Accesses low-contention buckets first and hot buckets last, but all
    locks are held to one global commit point, so hot contention spans only
    shrink by the execution head, not by the 2PC tail."""

    protocol = "reorder_only"

    def _stages(self, ct):
        graph, program = ct.graph, ct.program
        earliest = {}
        for op in program.ops:
            preds = graph.pk_preds(op.op_id)
            earliest[op.op_id] = 1 + max((earliest[p] for p in preds), default=-1)
        max_depth = max(earliest.values(), default=0)
        lookup = self.cluster.lookup
        stage_of = {}
        for op in reversed(program.ops):
            succs = graph.pk_succs(op.op_id)
            cap = min((stage_of[s] - 1 for s in succs), default=max_depth + 1)
            hot = op.bucket is not None and lookup.is_hot(op.bucket)
            stage_of[op.op_id] = cap if hot else earliest[op.op_id]
        stages = {}
        for op_id, s in stage_of.items():
            stages.setdefault(s, []).append(op_id)
        return [sorted(stages[s]) for s in sorted(stages)]


# ---------------------------------------------------------------------------
# timestamp-range OCC
# ---------------------------------------------------------------------------

RUNNING = 0
VALIDATED = 1


class OccEngine(BaseEngine):
    """Optimistic execution with per-node commit-timestamp ranges.

    Reads and writes execute without locks while each touched bucket tracks
    pending reader/writer ids and the timestamps of the last committed read
    and write. A transaction starts with the range [0, inf); validation at
    each participant adjusts the validating transaction's range -- and
    symmetrically shrinks conflicting live transactions' local ranges, ties
    favoring the validator -- then freezes it. The coordinator commits iff
    every participant voted yes and the intersection of their ranges is
    non-empty, picking the commit timestamp just above the final lower
    bound. Committed writes apply in timestamp order, so an older write
    never clobbers a newer committed one.
    """

    protocol = "occ"

    def start(self, node, txn_id, attempt):
        ct = self._new_coord(node, txn_id, attempt)
        ct.stages = _pk_depth_stages(ct.program, ct.graph)
        self._launch_stage(node, ct)

    def _launch_stage(self, node, ct):
        by_node = self._items_for(ct, ct.stages[ct.stage_idx])
        ct.pending = set(by_node)
        ct.participants |= set(by_node)
        for pid, items in sorted(by_node.items()):
            msg = MOccExec(ct.txn_id, ct.attempt, node.id, items)
            if pid == node.id:
                self._occ_exec(node, msg)
            else:
                self.cluster.sim.send(node.id, pid, msg)

    def on_MOccExec(self, node, src, msg):
        self._occ_exec(node, msg)

    def _occ_exec(self, node, msg):
        key = (msg.txn_id, msg.attempt)
        ns = node.part.get(key)
        if ns is None:
            ns = node.part[key] = _NodeTxn(None, msg.coordinator)
        node.occ_table.setdefault(msg.txn_id, [0.0, INF, RUNNING])
        now = self.cluster.sim.now()
        values = {}
        for op_id, bucket, k, kind in msg.items:
            if kind in READ_KINDS:
                values[op_id] = node.store.read(bucket, k)
                ns.reads.add(bucket)
                ns.read_ws.setdefault(bucket, node.occ_wts.get(bucket, 0))
                node.occ_readers.setdefault(bucket, set()).add(msg.txn_id)
                self.cluster.history.record_access(
                    msg.txn_id, msg.attempt, bucket, k, "r", now)
            if kind != "read":
                ns.writes.add(bucket)
                node.occ_writers.setdefault(bucket, set()).add(msg.txn_id)
        reply = MOccExecReply(msg.txn_id, msg.attempt, node.id, values)
        if msg.coordinator == node.id:
            self._on_occ_exec_reply(node, reply)
        else:
            self.cluster.sim.send(node.id, msg.coordinator, reply)

    def on_MOccExecReply(self, node, src, msg):
        self._on_occ_exec_reply(node, msg)

    def _on_occ_exec_reply(self, node, msg):
        ct = self.txns.get(msg.txn_id)
        if ct is None or ct.attempt != msg.attempt or ct.phase != "exec":
            return
        ct.reads.update(msg.values)
        ct.pending.discard(msg.node)
        if ct.pending:
            return
        if ct.stage_idx + 1 < len(ct.stages):
            ct.stage_idx += 1
            self._launch_stage(node, ct)
            return
        decision = ct.program.logic(ct.reads)
        if not decision.commit:
            self._broadcast_final(node, ct, False, site=("inner",))
            return
        ct.decision = decision
        ct.phase = "validate"
        ct.pending = set(ct.participants)
        for pid in sorted(ct.participants):
            msg_v = MOccValidate(ct.txn_id, ct.attempt)
            if pid == node.id:
                self._occ_validate(node, msg_v)
            else:
                self.cluster.sim.send(node.id, pid, msg_v)

    def on_MOccValidate(self, node, src, msg):
        self._occ_validate(node, msg)

    def _occ_validate(self, node, msg):
        ns = node.part[(msg.txn_id, msg.attempt)]
        entry = node.occ_table[msg.txn_id]
        table = node.occ_table
        lo, hi = entry[0], entry[1]

        for bucket in sorted(ns.reads):
            # strictly after the committed write whose value was read
            lo = max(lo, ns.read_ws[bucket] + 1)
            for other in sorted(node.occ_writers.get(bucket, ())):
                if other == msg.txn_id or other not in table:
                    continue
                ott = table[other]
                if ott[2] == RUNNING:
                    s = max(lo + 1, ott[0])  # this reader precedes that writer
                    hi = min(hi, s)
                    ott[0] = max(ott[0], s)
                else:
                    hi = min(hi, ott[0])  # frozen writer: fit strictly below
        for bucket in sorted(ns.writes):
            lo = max(lo, node.occ_wts.get(bucket, 0) + 1,
                     node.occ_rts.get(bucket, 0) + 1)
            writer_peers = node.occ_writers.get(bucket, ())
            for other in sorted(node.occ_readers.get(bucket, ())):
                if other == msg.txn_id or other not in table:
                    continue
                if other in writer_peers:
                    # read-modify-write peer: the w-w rule below orders it
                    # after this validator, and its now-stale read aborts
                    # it at its own validation
                    continue
                ott = table[other]
                if ott[2] == RUNNING:
                    s = max(lo, ott[0] + 1)  # that reader precedes this writer
                    ott[1] = min(ott[1], s)
                    lo = max(lo, s)
                elif ott[1] == INF:
                    lo = INF  # cannot order above an unbounded frozen reader
                else:
                    lo = max(lo, ott[1])
            for other in sorted(node.occ_writers.get(bucket, ())):
                if other == msg.txn_id or other not in table:
                    continue
                ott = table[other]
                if ott[2] == RUNNING:
                    s = max(lo + 1, ott[0])  # validator wins the w-w race
                    hi = min(hi, s)
                    ott[0] = max(ott[0], s)
                elif ott[1] < INF:
                    lo = max(lo, ott[1])  # commit after the frozen writer
                else:
                    hi = min(hi, ott[0])
        ok = lo < hi
        if ok:
            entry[0], entry[1], entry[2] = lo, hi, VALIDATED
        reply = MOccValidateReply(msg.txn_id, msg.attempt, node.id, ok, lo, hi)
        if ns.coordinator == node.id:
            self._on_validate_reply(node, reply)
        else:
            self.cluster.sim.send(node.id, ns.coordinator, reply)

    def on_MOccValidateReply(self, node, src, msg):
        self._on_validate_reply(node, msg)

    def _on_validate_reply(self, node, msg):
        ct = self.txns.get(msg.txn_id)
        if ct is None or ct.attempt != msg.attempt or ct.phase != "validate":
            return
        ct.occ_all_ok = ct.occ_all_ok and msg.ok
        ct.occ_lo = max(ct.occ_lo, msg.lo)
        ct.occ_hi = min(ct.occ_hi, msg.hi)
        ct.pending.discard(msg.node)
        if ct.pending:
            return
        if not (ct.occ_all_ok and ct.occ_lo < ct.occ_hi):
            self._broadcast_final(node, ct, False, site=("validation",))
            return
        if ct.occ_hi == INF or ct.occ_lo + 1 < ct.occ_hi:
            cts = int(ct.occ_lo) + 1
        else:
            cts = int(ct.occ_lo)
        self._broadcast_final(node, ct, True, cts=cts)

    def _broadcast_final(self, node, ct, commit, cts=0, site=None):
        ct.phase = "final"
        writes_by_node = {}
        if commit:
            for op_id in sorted(ct.decision.writes):
                op = ct.program.op(op_id)
                key = self._resolve_key(ct, op)
                bucket = self.cluster.resolve_bucket(op, key)
                pid = self.cluster.lookup.partition_of(bucket)
                writes_by_node.setdefault(pid, []).append(
                    (op_id, bucket, key, ct.decision.writes[op_id], op.kind))
        else:
            ct.decision = None
        ct.abort_site = site
        ct.commit_pending = set(ct.participants)
        ct.commit_time = self.cluster.sim.now() if commit else -1
        for pid in sorted(ct.participants):
            msg = MOccFinal(ct.txn_id, ct.attempt, commit, cts,
                            writes_by_node.get(pid, []))
            if pid == node.id:
                self._occ_final(node, msg)
            else:
                self.cluster.sim.send(node.id, pid, msg)

    def on_MOccFinal(self, node, src, msg):
        self._occ_final(node, msg)

    def _occ_final(self, node, msg):
        ns = node.part.get((msg.txn_id, msg.attempt))
        if ns is None:
            return
        if msg.commit and self.cluster.f > 0 and msg.writes:
            ns.occ_final = msg
            ns.await_acks = self.cluster.f
            LockingEngine._ship(self, node, msg.txn_id, msg.attempt,
                                msg.writes, None, "primary", ns.coordinator)
            return
        self._occ_apply(node, ns, msg)

    on_ReplicationMsg = LockingEngine.on_ReplicationMsg

    def on_MShipApplied(self, node, src, msg):
        ns = node.part.get((msg.txn_id, msg.attempt))
        if ns is None or ns.await_acks == 0:
            return
        ns.await_acks -= 1
        if ns.await_acks == 0:
            self._occ_apply(node, ns, ns.occ_final)

    def _occ_apply(self, node, ns, msg):
        now = self.cluster.sim.now()
        table = node.occ_table

        def running(other):
            return other != msg.txn_id and other in table and table[other][2] == RUNNING

        if msg.commit:
            cts = msg.cts
            for op_id, bucket, k, value, kind in msg.writes:
                if cts >= node.occ_wts.get(bucket, 0):
                    # newest timestamp wins; a late older write stays invisible
                    if kind == "delete":
                        node.store.delete(bucket, k, writer=msg.txn_id)
                    else:
                        node.store.write(bucket, k, value, writer=msg.txn_id)
                    self.cluster.history.record_access(
                        msg.txn_id, msg.attempt, bucket, k, "w", now)
                node.occ_wts[bucket] = max(node.occ_wts.get(bucket, 0), cts)
                for other in sorted(node.occ_readers.get(bucket, ())):
                    if running(other):
                        table[other][1] = min(table[other][1], cts)
                for other in sorted(node.occ_writers.get(bucket, ())):
                    if running(other):
                        table[other][0] = max(table[other][0], cts + 1)
            for bucket in sorted(ns.reads):
                node.occ_rts[bucket] = max(node.occ_rts.get(bucket, 0), cts)
                for other in sorted(node.occ_writers.get(bucket, ())):
                    if running(other):
                        table[other][0] = max(table[other][0], cts + 1)
            node.log.append(("occ_committed", msg.txn_id, msg.attempt, cts))
        for bucket in ns.reads:
            readers = node.occ_readers.get(bucket)
            if readers:
                readers.discard(msg.txn_id)
        for bucket in ns.writes:
            writers = node.occ_writers.get(bucket)
            if writers:
                writers.discard(msg.txn_id)
        table.pop(msg.txn_id, None)
        node.part.pop((msg.txn_id, msg.attempt), None)
        ack = MOccFinalAck(msg.txn_id, msg.attempt, node.id)
        if ns.coordinator == node.id:
            self.on_MOccFinalAck(node, node.id, ack)
        else:
            self.cluster.sim.send(node.id, ns.coordinator, ack)

    def on_MOccFinalAck(self, node, src, msg):
        ct = self.txns.get(msg.txn_id)
        if ct is None or ct.attempt != msg.attempt or ct.phase != "final":
            return
        ct.commit_pending.discard(msg.node)
        if ct.commit_pending:
            return
        if ct.decision is not None:
            self._finish(ct, COMMITTED, commit_time=ct.commit_time)
        else:
            self._finish(ct, ABORTED, abort_site=ct.abort_site)


# ---------------------------------------------------------------------------
# two-region execution
# ---------------------------------------------------------------------------


class TwoRegionEngine(LockingEngine):
    """Early-commit execution of the contended part of a transaction.

    Step 3 locks and reads the cold (outer) operations under plain 2PL;
    shared locks for read-only buckets, exclusive for read-then-update.
    Step 4 ships the transaction id, inputs and outer read-set to the
    single inner host, which locks its hot buckets, completes the read-set,
    evaluates the full transaction logic, replicates to its backups, then
    commits and releases within one activation plus a hardware-ack wait --
    no network roundtrip sits inside a hot contention span. The inner
    replicas notify the original coordinator directly, and only after the
    inner reply plus all f notifications does step 5 apply the outer
    writes, replicate them normally, and release the outer locks. After
    inner commit no participant may abort. Transactions whose plan has no
    inner region run as plain 2PL with the same lock policy.
    """

    protocol = "two_region"

    def start(self, node, txn_id, attempt):
        meta = self.cluster.meta[txn_id]
        if "plan" not in meta:
            meta["plan"] = plan_regions(meta["program"], meta["graph"],
                                        self.cluster.lookup)
        plan = meta["plan"]
        if plan.inner_host is None:
            super().start(node, txn_id, attempt)  # degenerate: plain 2PL
            return
        ct = self._new_coord(node, txn_id, attempt)
        ct.plan = plan
        outer = plan.all_outer_ops()
        ct.static_modes = _static_bucket_modes(ct.program, outer)
        ct.stages = _pk_depth_stages(ct.program, ct.graph, ops=outer)
        ct.phase = "outer_exec"
        ct.participants = {plan.inner_host}
        node.log.append(("pending", txn_id, attempt, node.id, plan.inner_host,
                         sorted(plan.outer_ops_by_partition)))
        if self.cluster.on_stage(txn_id, OUTER_EXEC_STARTED, node.id):
            return
        if not ct.stages:
            self._start_inner(node, ct)
        else:
            self._launch_stage(node, ct)

    def _launch_stage(self, node, ct):
        if ct.plan is None:
            super()._launch_stage(node, ct)
            return
        by_node = self._items_for(ct, ct.stages[ct.stage_idx])
        ct.pending = set(by_node)
        ct.participants |= set(by_node)
        ct.outer_contacted |= set(by_node)
        for pid, items in sorted(by_node.items()):
            msg = MExec(ct.txn_id, ct.attempt, node.id,
                        (ct.ts.logical, ct.ts.node), items,
                        self._modes_for(ct, items), prepare=False)
            if pid == node.id:
                self._participant_exec(node, msg)
            else:
                self.cluster.sim.send(node.id, pid, msg)

    def _on_exec_reply(self, node, msg):
        ct = self.txns.get(msg.txn_id)
        if ct is None or ct.attempt != msg.attempt:
            return
        if ct.plan is None:
            super()._on_exec_reply(node, msg)
            return
        if ct.phase != "outer_exec":
            return
        if not msg.ok:
            self._abort_outer(node, ct, ("outer", msg.node))
            return
        ct.reads.update(msg.values)
        ct.pending.discard(msg.node)
        if ct.pending:
            return
        if ct.stage_idx + 1 < len(ct.stages):
            ct.stage_idx += 1
            self._launch_stage(node, ct)
            return
        self._start_inner(node, ct)

    def _start_inner(self, node, ct):
        ct.phase = "inner"
        if self.cluster.on_stage(ct.txn_id, OUTER_LOCKED, node.id):
            return
        node.log.append(("inner_sent", ct.txn_id, ct.attempt, ct.plan.inner_host))
        msg = MInnerExec(ct.txn_id, ct.attempt, node.id,
                         (ct.ts.logical, ct.ts.node), dict(ct.reads))
        if ct.plan.inner_host == node.id:
            self._inner_exec(node, node.id, msg)
        else:
            self.cluster.sim.send(node.id, ct.plan.inner_host, msg)

    def _abort_outer(self, node, ct, site):
        ct.phase = "aborting"
        for pid in sorted(ct.outer_contacted):
            msg = MAbort(ct.txn_id, ct.attempt)
            if pid == node.id:
                self._participant_abort(node, msg)
            else:
                self.cluster.sim.send(node.id, pid, msg)
        node.log.append(("aborted", ct.txn_id, ct.attempt))
        self._finish(ct, ABORTED, abort_site=site)

    # -- inner host ---------------------------------------------------------------

    def on_MInnerExec(self, node, src, msg):
        self._inner_exec(node, src, msg)

    def _inner_exec(self, node, src, msg):
        cluster = self.cluster
        if cluster.on_stage(msg.txn_id, INNER_RECEIVED, node.id):
            return
        meta = cluster.meta[msg.txn_id]
        program, graph, plan = meta["program"], meta["graph"], meta["plan"]
        key = (msg.txn_id, msg.attempt)
        ns = node.inner_part.get(key)
        if ns is None:
            ns = node.inner_part[key] = _NodeTxn(TxnTimestamp(*msg.ts),
                                                 msg.coordinator)
            node.log.append(("inner_received", msg.txn_id, msg.attempt,
                             msg.coordinator))
        ns.inner = True
        now = cluster.sim.now()
        inner_ops = sorted(plan.inner_ops)
        modes = _static_bucket_modes(program, inner_ops)
        reads = dict(msg.read_set)
        reads.update(ns.values)
        resolved = {}
        for stage in _pk_depth_stages(program, graph, ops=inner_ops):
            for op_id in stage:
                op = program.op(op_id)
                src_kind, src_op = op.key_source
                if src_kind == "lit":
                    k = src_op
                else:
                    base = reads.get(src_op)
                    k = op.key_fn(base) if op.key_fn else base
                bucket = op.bucket
                resolved[op_id] = (bucket, k)
                if bucket not in ns.granted:
                    result = node.store.acquire_lock(bucket, modes[bucket],
                                                     ns.ts, self.policy)
                    if result is LockResult.ABORT:
                        self._inner_abort(node, ns, msg)
                        return
                    if result is LockResult.ENQUEUED:
                        node.waiting_ts[ns.ts] = (msg.txn_id, msg.attempt,
                                                  "inner")
                        ns.queued_bucket = bucket
                        ns.inner_msg = msg
                        return  # resumes on promotion
                    ns.granted[bucket] = now
                if op.kind in READ_KINDS and op_id not in ns.values:
                    value = node.store.read(bucket, k, ns.ts)
                    reads[op_id] = value
                    ns.values[op_id] = value
                    cluster.history.record_access(
                        msg.txn_id, msg.attempt, bucket, k, "r", now)
        decision = program.logic(reads)
        if not decision.commit:
            self._inner_abort(node, ns, msg)
            return
        ns.commit_writes = [
            (op_id, resolved[op_id][0], resolved[op_id][1],
             decision.writes[op_id], program.op(op_id).kind)
            for op_id in inner_ops if op_id in decision.writes
        ]
        meta.setdefault("inner_outputs", {})[msg.attempt] = decision.outputs
        if cluster.on_stage(msg.txn_id, BEFORE_INNER_SHIP, node.id):
            return
        if cluster.f > 0:
            self._ship(node, msg.txn_id, msg.attempt, ns.commit_writes,
                       dict(reads), "coordinator", msg.coordinator)
            if cluster.on_stage(msg.txn_id, AFTER_INNER_SHIP, node.id):
                return
            cluster.sim.call_later(node.id, cluster.sim.latency.local_delay,
                                   MNicDone(msg.txn_id, msg.attempt))
            return
        self._inner_commit(node, ns, msg.txn_id, msg.attempt)

    def on_MNicDone(self, node, src, msg):
        ns = node.inner_part.get((msg.txn_id, msg.attempt))
        if ns is None:
            return
        self._inner_commit(node, ns, msg.txn_id, msg.attempt)

    def _inner_commit(self, node, ns, txn_id, attempt):
        """Commit point: hardware acks confirmed the ships left the node."""
        cluster = self.cluster
        now = cluster.sim.now()
        for op_id, bucket, k, value, kind in ns.commit_writes or []:
            if kind == "delete":
                node.store.delete(bucket, k, ns.ts, writer=txn_id)
            else:
                node.store.write(bucket, k, value, ns.ts, writer=txn_id)
            cluster.history.record_access(txn_id, attempt, bucket, k, "w", now)
        outputs = cluster.meta[txn_id].get("inner_outputs", {}).get(attempt, {})
        node.log.append(("inner_committed", txn_id, attempt, dict(ns.values),
                         outputs))
        self._release_node_locks(node, ns, txn_id, attempt)
        coord = ns.coordinator
        values = dict(ns.values)
        node.inner_part.pop((txn_id, attempt), None)
        if cluster.on_stage(txn_id, INNER_COMMITTED, node.id):
            return
        reply = MInnerReply(txn_id, attempt, True, values, outputs,
                            commit_time=now)
        self._reply(node, coord, reply)

    def _inner_abort(self, node, ns, msg):
        self._release_node_locks(node, ns, msg.txn_id, msg.attempt)
        node.log.append(("inner_aborted", msg.txn_id, msg.attempt))
        node.inner_part.pop((msg.txn_id, msg.attempt), None)
        reply = MInnerReply(msg.txn_id, msg.attempt, False, {}, {})
        self._reply(node, msg.coordinator, reply)

    def on_MInnerReply(self, node, src, msg):
        self._on_inner_reply(node, msg)

    def _on_inner_reply(self, node, msg):
        ct = self.txns.get(msg.txn_id)
        if ct is None or ct.attempt != msg.attempt or ct.phase != "inner":
            return
        if not msg.ok:
            # the inner host informs the coordinator directly; outer locks
            # release and the whole transaction aborts
            self._abort_outer(node, ct, ("inner",))
            return
        ct.inner_ok = True
        ct.reads.update(msg.values)
        ct.inner_outputs = msg.outputs
        ct.commit_time = msg.commit_time
        self._maybe_outer_commit(node, ct)

    def on_MInnerNotify(self, node, src, msg):
        ct = self.txns.get(msg.txn_id)
        if ct is None or ct.attempt != msg.attempt:
            return
        ct.inner_notifies += 1
        self._maybe_outer_commit(node, ct)

    def _maybe_outer_commit(self, node, ct):
        """Resume step 5 only once the inner commit reply and every inner
        replica's notification have arrived."""
        if ct.phase != "inner" or not ct.inner_ok:
            return
        if ct.inner_notifies < self.cluster.f:
            return
        ct.phase = "commit"
        if self.cluster.on_stage(ct.txn_id, BEFORE_OUTER_COMMIT, node.id):
            return
        decision = ct.program.logic(ct.reads)
        assert decision.commit, "logic must be deterministic over the read-set"
        outer_ops = ct.plan.all_outer_ops()
        writes_by_node = {}
        for op_id in sorted(decision.writes):
            if op_id not in outer_ops:
                continue
            op = ct.program.op(op_id)
            key = self._resolve_key(ct, op)
            bucket = self.cluster.resolve_bucket(op, key)
            pid = self.cluster.lookup.partition_of(bucket)
            writes_by_node.setdefault(pid, []).append(
                (op_id, bucket, key, decision.writes[op_id], op.kind))
        ct.commit_pending = set(ct.outer_contacted)
        if not ct.commit_pending:
            node.log.append(("complete", ct.txn_id, ct.attempt))
            self._finish(ct, COMMITTED, commit_time=ct.commit_time)
            return
        for pid in sorted(ct.outer_contacted):
            msg = MCommit(ct.txn_id, ct.attempt, writes_by_node.get(pid, []))
            if pid == node.id:
                self._participant_commit(node, msg)
            else:
                self.cluster.sim.send(node.id, pid, msg)

    def on_MDone(self, node, src, msg):
        ct = self.txns.get(msg.txn_id)
        if ct is None or ct.attempt != msg.attempt:
            return
        if ct.plan is None:
            super().on_MDone(node, src, msg)
            return
        if ct.phase != "commit":
            return
        ct.commit_pending.discard(msg.node)
        if not ct.commit_pending:
            node.log.append(("complete", ct.txn_id, ct.attempt))
            self.cluster.on_stage(ct.txn_id, OUTER_COMMITTED, node.id)
            self._finish(ct, COMMITTED, commit_time=ct.commit_time)

    def _dispatch_local_reply(self, node, msg):
        if type(msg) is MInnerReply:
            self._on_inner_reply(node, msg)
        else:
            super()._dispatch_local_reply(node, msg)
