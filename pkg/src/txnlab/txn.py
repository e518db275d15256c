"""Declarative one-shot transaction programs and the region planner.

A program is an ordered list of operations plus a deterministic decision
function over its read values. Dependencies between operations come in two
flavors: key dependencies (an operation's key is known only after another
operation's read -- these constrain reordering) and value dependencies (a
written value derives from another read -- these do not constrain lock
order). The planner splits a program into a hot region hosted by a single
partition (the "inner" region, committed early) and the remaining "outer"
operations, grouped per partition.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import MalformedProgramError

READ = "read"
UPDATE = "update"  # read-modify-write of one record
INSERT = "insert"
DELETE = "delete"

WRITE_KINDS = (UPDATE, INSERT, DELETE)
READ_KINDS = (READ, UPDATE)


@dataclass
class TxnOp:
    """One operation of a one-shot program.

    key_source is ("lit", key) or ("from", op_id): in the latter case the
    key is derived at runtime from the source read's value via key_fn.
    bucket is the statically resolved bucket id, or None when the hosting
    partition cannot be determined up front (no primary-key access path);
    such operations are never eligible for the inner region.
    value_source mirrors the value dependencies: ("lit", value),
    ("from", [op_ids]) or None for pure reads.
    """

    op_id: int
    kind: str
    key_source: tuple
    bucket: Optional[int] = None
    value_source: Optional[tuple] = None
    key_fn: Optional[Callable[[bytes], bytes]] = None
    constraint: Optional[str] = None

    def is_write(self):
        return self.kind in WRITE_KINDS

    def literal_key(self):
        return self.key_source[1] if self.key_source[0] == "lit" else None


@dataclass
class LogicDecision:
    """Outcome of a program's decision function over its read values."""

    commit: bool
    writes: dict = field(default_factory=dict)  # op_id -> value bytes
    outputs: dict = field(default_factory=dict)  # named values returned to the coordinator


@dataclass
class TransactionProgram:
    """One-shot program: all operations known up front, no triggers.

    ``logic`` must be a pure function of the read values (op_id -> bytes or
    None for absent keys) so any host holding the full read-set can
    re-execute the decision.
    """

    txn_type: str
    ops: list
    logic: Callable[[dict], LogicDecision]
    home_partition: int = 0

    def op(self, op_id):
        return self.ops[op_id]

    def read_ops(self):
        return [op for op in self.ops if op.kind in READ_KINDS]

    def buckets(self):
        return {op.bucket for op in self.ops if op.bucket is not None}


def always_commit(program):
    """Default decision function: write each op's literal value."""

    def logic(reads):
        writes = {}
        for op in program.ops:
            if op.is_write() and op.value_source and op.value_source[0] == "lit":
                writes[op.op_id] = op.value_source[1]
        return LogicDecision(True, writes)

    return logic


@dataclass
class DependencyGraph:
    nodes: list
    pk_edges: set  # (from_op, to_op): to's key comes from from's read
    v_edges: set   # (from_op, to_op): to's value derives from from's read

    def pk_preds(self, op_id):
        return [a for a, b in self.pk_edges if b == op_id]

    def pk_succs(self, op_id):
        return [b for a, b in self.pk_edges if a == op_id]


def build_dependency_graph(program):
    """Extract key and value dependency edges from a program.

    Raises MalformedProgramError on dangling references, on a key source
    that is not an earlier read, or on value sources that are not reads.
    The result is acyclic by construction (edges point forward in program
    order).
    """
    ids = {op.op_id for op in program.ops}
    pk_edges = set()
    v_edges = set()
    for op in program.ops:
        src_kind, src = op.key_source
        if src_kind == "from":
            if src not in ids:
                raise MalformedProgramError(
                    f"op {op.op_id} keys from missing op {src}"
                )
            source = program.op(src)
            if source.kind not in READ_KINDS or src >= op.op_id:
                raise MalformedProgramError(
                    f"op {op.op_id} must key from an earlier read, got op {src}"
                )
            pk_edges.add((src, op.op_id))
        if op.value_source and op.value_source[0] == "from":
            for src in op.value_source[1]:
                if src not in ids:
                    raise MalformedProgramError(
                        f"op {op.op_id} takes values from missing op {src}"
                    )
                if program.op(src).kind not in READ_KINDS or src >= op.op_id:
                    raise MalformedProgramError(
                        f"op {op.op_id} must take values from earlier reads"
                    )
                v_edges.add((src, op.op_id))
    return DependencyGraph([op.op_id for op in program.ops], pk_edges, v_edges)


@dataclass
class ExecutionPlan:
    """Inner/outer split of one transaction.

    inner_host is None when nothing qualifies for early commit (the
    protocol then degrades to plain 2PL+2PC). Operations whose partition
    is unknown statically end up in unresolved_outer_ops and are routed at
    runtime once their keys materialize.
    """

    inner_host: Optional[int]
    inner_ops: set
    outer_ops_by_partition: dict  # partition -> set of op_id
    unresolved_outer_ops: set = field(default_factory=set)

    def all_outer_ops(self):
        out = set(self.unresolved_outer_ops)
        for ops in self.outer_ops_by_partition.values():
            out |= ops
        return out

    def validate(self, program):
        every = self.inner_ops | self.all_outer_ops()
        assert every == {op.op_id for op in program.ops}, "ops must be covered once"
        assert not (self.inner_ops & self.all_outer_ops()), "regions must not overlap"
        assert (self.inner_host is None) == (not self.inner_ops)


def candidate_inner_ops(graph, program, lookup):
    """Operations eligible for the inner region.

    An op qualifies when its bucket is marked hot in the lookup table and
    every key-dependency neighbor (source or dependent) resolves to the
    same partition. Dependents must themselves qualify: a hot op whose key
    feeds a cold or remote op cannot commit early, because that dependent
    runs in the outer region before the inner region executes. Finally the
    set is closed bucket-wise, so a bucket is never locked by both regions.
    """
    resolved = {}
    for op in program.ops:
        if op.bucket is not None:
            resolved[op.op_id] = lookup.partition_of(op.bucket)

    candidates = set()
    for op in program.ops:
        if op.bucket is None or not lookup.is_hot(op.bucket):
            continue
        here = resolved[op.op_id]
        neighbors = graph.pk_preds(op.op_id) + graph.pk_succs(op.op_id)
        if all(resolved.get(nb) == here for nb in neighbors):
            candidates.add(op.op_id)

    changed = True
    while changed:
        changed = False
        for op_id in list(candidates):
            if any(s not in candidates for s in graph.pk_succs(op_id)):
                candidates.discard(op_id)
                changed = True
        # bucket closure: all ops of a bucket stay in the same region
        by_bucket = {}
        for op in program.ops:
            if op.bucket is not None:
                by_bucket.setdefault(op.bucket, []).append(op.op_id)
        for ops in by_bucket.values():
            inside = [o for o in ops if o in candidates]
            if inside and len(inside) != len(ops):
                for o in inside:
                    candidates.discard(o)
                changed = True
    return candidates


def select_inner_host(candidates, resolved):
    """The partition hosting the most candidate ops; ties break low."""
    if not candidates:
        return None
    counts = {}
    for op_id in candidates:
        pid = resolved[op_id]
        counts[pid] = counts.get(pid, 0) + 1
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0]


def plan_regions(program, graph, lookup):
    """Split a program into its inner region and per-partition outer ops."""
    resolved = {}
    for op in program.ops:
        if op.bucket is not None:
            resolved[op.op_id] = lookup.partition_of(op.bucket)

    candidates = candidate_inner_ops(graph, program, lookup)
    host = select_inner_host(candidates, resolved)
    inner = {c for c in candidates if resolved[c] == host} if host is not None else set()
    if not inner:
        host = None

    outer = {}
    unresolved = set()
    for op in program.ops:
        if op.op_id in inner:
            continue
        pid = resolved.get(op.op_id)
        if pid is None:
            unresolved.add(op.op_id)
        else:
            outer.setdefault(pid, set()).add(op.op_id)
    plan = ExecutionPlan(host, inner, outer, unresolved)
    plan.validate(program)
    return plan
