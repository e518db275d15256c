"""Failure recovery for pending early-commit transactions.

The replication mechanics themselves (synchronous log shipping with
distinct inner and outer paths) live in the protocol engines; this module
owns what happens after a crash. Recovery runs only while the cluster is
quiesced: failed nodes are fenced, a designated node (lowest surviving id)
aggregates the surviving partitions' logs and pending-transaction state,
and every pending transaction is driven to a terminal decision:

* commit forward when the inner region provably committed -- the inner
  host's own log says so, or at least one surviving inner replica holds
  the replication message (which carries the full read-set, so a new
  coordinator can re-execute the decision logic and finish the outer
  region, including on promoted backups of crashed outer participants);
* abort otherwise -- in particular when the inner host died before any
  replica received its message, which proves it had not committed.

No run may ever leave two participants disagreeing on a transaction's
outcome; that property is exercised by the crash-matrix tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import UnrecoverableGroupError
from .protocols import COMMITTED, ABORTED, TxnOutcome
from .simulator import UP

COMMIT_FORWARD = "commit_forward"
ABORT = "abort"


@dataclass
class PendingTxnEntry:
    """One unfinished transaction as reconstructed from partition state."""

    txn_id: int
    attempt: int
    coordinator: int
    inner_host: int | None
    outer_participants: list
    stage: str


@dataclass
class RecoveryReport:
    designated_node: int
    decisions: dict = field(default_factory=dict)  # txn -> COMMIT_FORWARD|ABORT
    pending: list = field(default_factory=list)
    promotions: dict = field(default_factory=dict)  # partition -> new primary


def _inner_evidence(cluster, txn_id):
    """(committed_locally, replication_msg) as visible to survivors."""
    committed = False
    evidence_msg = None
    for node in cluster.nodes:
        if cluster.sim.status(node.id) != UP:
            continue
        for entry in node.log:
            if entry[0] == "inner_committed" and entry[1] == txn_id:
                committed = True
        for msg in node.replica_msgs.values():
            if msg.txn_id == txn_id and msg.read_set is not None:
                evidence_msg = msg
    return committed, evidence_msg


def _collect_pending(cluster):
    engine = cluster.engine
    pending = []
    for txn_id in sorted(engine.txns):
        ct = engine.txns[txn_id]
        plan = ct.plan
        stage = ct.phase
        pending.append(PendingTxnEntry(
            txn_id=txn_id,
            attempt=ct.attempt,
            coordinator=ct.home,
            inner_host=plan.inner_host if plan is not None else None,
            outer_participants=sorted(ct.outer_contacted or ct.participants),
            stage=stage,
        ))
    return pending


def recover(cluster):
    """Resolve every pending transaction after crashes; returns a report.

    Raises UnrecoverableGroupError when all f+1 copies of a group needed
    for a decision are gone (the liveness precondition is violated).
    """
    survivors = cluster.sim.live_nodes()
    if not survivors:
        raise UnrecoverableGroupError("no surviving nodes")
    report = RecoveryReport(designated_node=min(survivors))
    report.pending = _collect_pending(cluster)
    crashed = [n for n in range(cluster.k) if cluster.sim.status(n) != UP]
    for down in crashed:
        group = cluster.groups[down]
        alive_backups = [b for b in group.backups if cluster.sim.status(b) == UP]
        if not alive_backups and cluster.f > 0:
            raise UnrecoverableGroupError(
                f"all {cluster.f + 1} copies of partition {down} failed"
            )
        if alive_backups:
            report.promotions[down] = min(alive_backups)

    for entry in report.pending:
        committed, msg = _inner_evidence(cluster, entry.txn_id)
        if committed or msg is not None:
            report.decisions[entry.txn_id] = COMMIT_FORWARD
            _commit_forward(cluster, entry, msg, report)
        else:
            report.decisions[entry.txn_id] = ABORT
            _abort_everywhere(cluster, entry)
    return report


def _release_at_survivors(cluster, txn_id):
    for node in cluster.nodes:
        if cluster.sim.status(node.id) != UP:
            continue
        for table in (node.part, node.inner_part):
            for key in [k for k in table if k[0] == txn_id]:
                ns = table.pop(key)
                cluster.engine._release_node_locks(node, ns, key[0], key[1])


def _abort_everywhere(cluster, entry):
    _release_at_survivors(cluster, entry.txn_id)
    for node in cluster.nodes:
        if cluster.sim.status(node.id) == UP:
            node.log.append(("recovery_abort", entry.txn_id, entry.attempt))
    now = cluster.sim.now()
    cluster.engine.txns.pop(entry.txn_id, None)
    cluster.history.record_outcome(TxnOutcome(
        txn_id=entry.txn_id, attempt=entry.attempt, status=ABORTED,
        abort_site=("recovery",), submit_time=now, finish_time=now,
    ))


def _commit_forward(cluster, entry, msg, report):
    """Finish an inner-committed transaction at every surviving copy."""
    meta = cluster.meta[entry.txn_id]
    program, plan = meta["program"], meta["plan"]
    inner = plan.inner_host

    # full read-set: prefer the replication message; the inner host's own
    # log carries it too when it survived long enough to commit
    read_set = dict(msg.read_set) if msg is not None else None
    if read_set is None:
        for entry_log in cluster.nodes[inner].log:
            if entry_log[0] == "inner_committed" and entry_log[1] == entry.txn_id:
                read_set = dict(entry_log[3])
    assert read_set is not None, "commit-forward requires the shipped read-set"

    # inner writes must land on every surviving copy of the inner group
    inner_writes = list(msg.new_values) if msg is not None else []
    if cluster.sim.status(inner) == UP:
        node = cluster.nodes[inner]
        has_local = any(e[0] == "inner_committed" and e[1] == entry.txn_id
                        for e in node.log)
        if not has_local and inner_writes:
            _apply_writes(cluster, node.store, inner_writes, entry.txn_id)
            node.log.append(("recovery_inner_commit", entry.txn_id, entry.attempt))
    for backup in cluster.groups[inner].backups:
        if cluster.sim.status(backup) != UP:
            continue
        bnode = cluster.nodes[backup]
        holds = any(m.txn_id == entry.txn_id and m.read_set is not None
                    for m in bnode.replica_msgs.values())
        if not holds and inner_writes:
            _apply_writes(cluster, bnode.replica_stores[inner], inner_writes,
                          entry.txn_id)
            bnode.log.append(("recovery_inner_apply", entry.txn_id, entry.attempt))

    # outer region: re-execute the decision logic on the recovered read-set
    decision = program.logic(read_set)
    assert decision.commit, "an inner-committed transaction must re-decide commit"
    outer_ops = plan.all_outer_ops()
    for op_id in sorted(decision.writes):
        if op_id not in outer_ops:
            continue
        op = program.op(op_id)
        src_kind, src = op.key_source
        if src_kind == "lit":
            key = src
        else:
            base = read_set.get(src)
            key = op.key_fn(base) if op.key_fn else base
        bucket = cluster.resolve_bucket(op, key)
        owner = cluster.lookup.partition_of(bucket)
        write = [(op_id, bucket, key, decision.writes[op_id], op.kind)]
        if cluster.sim.status(owner) == UP:
            _apply_writes(cluster, cluster.nodes[owner].store, write,
                          entry.txn_id)
            # keep surviving backups of the outer group in sync
            for backup in cluster.groups[owner].backups:
                if cluster.sim.status(backup) == UP:
                    _apply_writes(cluster,
                                  cluster.nodes[backup].replica_stores[owner],
                                  write, entry.txn_id)
        else:
            promoted = report.promotions[owner]
            _apply_writes(cluster, cluster.nodes[promoted].replica_stores[owner],
                          write, entry.txn_id)
            cluster.nodes[promoted].log.append(
                ("recovery_outer_apply", entry.txn_id, entry.attempt, owner))

    _release_at_survivors(cluster, entry.txn_id)
    for node in cluster.nodes:
        if cluster.sim.status(node.id) == UP:
            node.log.append(("recovery_commit", entry.txn_id, entry.attempt))
    now = cluster.sim.now()
    cluster.engine.txns.pop(entry.txn_id, None)
    cluster.history.record_outcome(TxnOutcome(
        txn_id=entry.txn_id, attempt=entry.attempt, status=COMMITTED,
        abort_site=None, submit_time=now, finish_time=now, commit_time=now,
    ))


def _apply_writes(cluster, store, writes, txn_id):
    for _op, bucket, key, value, kind in writes:
        if store.buckets.get(bucket) is None:
            store.ensure_bucket(bucket)
        if kind == "delete":
            store.delete(bucket, key, writer=txn_id)
        else:
            store.write(bucket, key, value, writer=txn_id)


def outcome_agreement(cluster, report):
    """Cross-check every recovered decision against surviving state.

    Returns a list of violation strings; empty means all participants
    agree with the global decision (and inner-committed transactions all
    went forward).
    """
    problems = []
    for entry in report.pending:
        decision = report.decisions[entry.txn_id]
        committed_evidence, _ = _inner_evidence(cluster, entry.txn_id)
        if committed_evidence and decision != COMMIT_FORWARD:
            problems.append(f"txn {entry.txn_id}: inner committed but {decision}")
        writers = set()
        for node in cluster.nodes:
            if cluster.sim.status(node.id) != UP:
                continue
            for (bucket, key), writer in node.store.last_writer.items():
                if writer == entry.txn_id:
                    writers.add((node.id, bucket))
        if decision == ABORT and writers:
            problems.append(
                f"txn {entry.txn_id}: aborted but wrote {sorted(writers)}"
            )
        for node in cluster.nodes:
            if cluster.sim.status(node.id) != UP:
                continue
            for table in (node.part, node.inner_part):
                for key in table:
                    if key[0] == entry.txn_id:
                        problems.append(
                            f"txn {entry.txn_id}: residual state at node {node.id}"
                        )
            for ts, ref in node.waiting_ts.items():
                if ref[0] == entry.txn_id:
                    problems.append(
                        f"txn {entry.txn_id}: still queued at node {node.id}"
                    )
    return problems
