"""Partitioned in-memory hash-bucket store with an embedded lock manager.

The unit of locking is the bucket: each bucket header carries its own lock
state, so there is no per-partition lock table. Two deadlock-prevention
policies are supported: NO_WAIT (abort on any conflict, queues never form)
and WAIT_DIE (a requester older than every conflicting holder enqueues,
a younger one aborts). Record-level locking is emulated by configuring a
high bucket count.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

from .errors import LockProtocolError, RoutingError


def bucket_of(key, bucket_count):
    """Map a key to its bucket: stable hash of the key modulo bucket count.

    Pure function of (key, bucket_count); uniform for hash-distributed keys.
    """
    if bucket_count <= 0:
        raise ValueError("bucket_count must be positive")
    if isinstance(key, str):
        key = key.encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big") % bucket_count


class LockMode(Enum):
    SHARED = "S"
    EXCLUSIVE = "X"


class LockResult(Enum):
    GRANTED = "granted"
    ABORT = "abort"
    ENQUEUED = "enqueued"


NO_WAIT = "no_wait"
WAIT_DIE = "wait_die"


@dataclass(frozen=True, order=True)
class TxnTimestamp:
    """Globally unique transaction timestamp; total order by (logical, node).

    Smaller compares older. Retried transactions draw a fresh timestamp.
    """

    logical: int
    node: int


class LockState:
    """Lock metadata living in a bucket header.

    holders maps timestamp -> mode; under a shared grant there may be many
    holders, under an exclusive grant exactly one. The wait queue is kept
    sorted oldest-first and is only ever populated under WAIT_DIE.
    """

    __slots__ = ("holders", "queue")

    def __init__(self):
        self.holders = {}
        self.queue = []  # [(TxnTimestamp, LockMode)], sorted by ts (oldest first)

    def mode(self):
        if not self.holders:
            return None
        if any(m is LockMode.EXCLUSIVE for m in self.holders.values()):
            return LockMode.EXCLUSIVE
        return LockMode.SHARED

    def check_invariants(self):
        modes = list(self.holders.values())
        if LockMode.EXCLUSIVE in modes:
            assert len(modes) == 1, "exclusive lock must be sole"
        ages = [ts for ts, _ in self.queue]
        assert ages == sorted(ages), "wait queue must be age-sorted"


class Bucket:
    __slots__ = ("id", "records", "lock")

    def __init__(self, bucket_id):
        self.id = bucket_id
        self.records = {}
        self.lock = LockState()


class PartitionStore:
    """One partition's buckets; all access is serialized by the owning node.

    With debug_checks on (the default), reads and writes verify that the
    calling transaction holds an appropriate lock, and every NO_WAIT
    acquisition asserts the queue stays empty.
    """

    def __init__(self, partition_id, debug_checks=True):
        self.partition_id = partition_id
        self.debug_checks = debug_checks
        self.buckets = {}
        self.last_writer = {}  # (bucket, key) -> txn_id, write provenance

    # -- loading -----------------------------------------------------------

    def ensure_bucket(self, bucket_id):
        bucket = self.buckets.get(bucket_id)
        if bucket is None:
            bucket = self.buckets[bucket_id] = Bucket(bucket_id)
        return bucket

    def load(self, bucket_id, key, value):
        self.ensure_bucket(bucket_id).records[key] = value

    def _bucket(self, bucket_id):
        bucket = self.buckets.get(bucket_id)
        if bucket is None:
            raise RoutingError(
                f"partition {self.partition_id} does not own bucket {bucket_id}"
            )
        return bucket

    # -- locking -----------------------------------------------------------

    def acquire_lock(self, bucket_id, mode, ts, policy):
        """Try to lock a bucket. Never blocks; WAIT_DIE may enqueue.

        Returns GRANTED, ABORT, or ENQUEUED. ABORT leaves the lock state
        unchanged. A repeated request for an already-held equal-or-weaker
        mode is granted idempotently; a strengthening request is a protocol
        bug (the engines compute the max mode per bucket up front).
        """
        lock = self._bucket(bucket_id).lock
        held = lock.holders.get(ts)
        if held is not None:
            if held is mode or held is LockMode.EXCLUSIVE:
                return LockResult.GRANTED
            raise LockProtocolError(
                f"txn {ts} upgrading {held} -> {mode} on bucket {bucket_id}"
            )
        conflicting = [
            holder
            for holder, hmode in lock.holders.items()
            if mode is LockMode.EXCLUSIVE or hmode is LockMode.EXCLUSIVE
        ]
        if not conflicting:
            lock.holders[ts] = mode
            if self.debug_checks and policy == NO_WAIT:
                assert not lock.queue, "NO_WAIT bucket must have an empty queue"
            return LockResult.GRANTED
        if policy == NO_WAIT:
            return LockResult.ABORT
        # WAIT_DIE: wait only if older than every conflicting holder.
        if all(ts < holder for holder in conflicting):
            entry = (ts, mode)
            lo, hi = 0, len(lock.queue)
            while lo < hi:  # insert by age, oldest first
                mid = (lo + hi) // 2
                if lock.queue[mid][0] < ts:
                    lo = mid + 1
                else:
                    hi = mid
            lock.queue.insert(lo, entry)
            return LockResult.ENQUEUED
        return LockResult.ABORT

    def release_locks(self, ts, bucket_ids):
        """Release held locks (or cancel queued waits) on the given buckets.

        Returns the promotions triggered: a list of (bucket_id, ts, mode)
        for waiters that became holders, in grant order. Promotion grants
        the contiguous run of compatible waiters from the queue head.
        """
        promoted = []
        for bucket_id in bucket_ids:
            lock = self._bucket(bucket_id).lock
            if ts in lock.holders:
                del lock.holders[ts]
            else:
                before = len(lock.queue)
                lock.queue = [(w, m) for w, m in lock.queue if w != ts]
                if len(lock.queue) == before:
                    raise LockProtocolError(
                        f"txn {ts} released unheld lock on bucket {bucket_id}"
                    )
                continue
            while lock.queue:
                wts, wmode = lock.queue[0]
                blocked = any(
                    wmode is LockMode.EXCLUSIVE or hmode is LockMode.EXCLUSIVE
                    for hmode in lock.holders.values()
                )
                if blocked:
                    break
                lock.queue.pop(0)
                lock.holders[wts] = wmode
                promoted.append((bucket_id, wts, wmode))
        return promoted

    def holds_lock(self, bucket_id, ts, mode=None):
        held = self._bucket(bucket_id).lock.holders.get(ts)
        if held is None:
            return False
        return mode is None or held is mode or held is LockMode.EXCLUSIVE

    # -- data access ---------------------------------------------------------

    def read(self, bucket_id, key, ts=None):
        """Return the value for key, or None when absent."""
        bucket = self._bucket(bucket_id)
        if self.debug_checks and ts is not None:
            if ts not in bucket.lock.holders:
                raise LockProtocolError(
                    f"read of bucket {bucket_id} without a lock (txn {ts})"
                )
        return bucket.records.get(key)

    def write(self, bucket_id, key, value, ts=None, writer=None):
        bucket = self._bucket(bucket_id)
        if self.debug_checks and ts is not None:
            if bucket.lock.holders.get(ts) is not LockMode.EXCLUSIVE:
                raise LockProtocolError(
                    f"write of bucket {bucket_id} without an exclusive lock (txn {ts})"
                )
        bucket.records[key] = value
        if writer is not None:
            self.last_writer[(bucket_id, key)] = writer

    def delete(self, bucket_id, key, ts=None, writer=None):
        bucket = self._bucket(bucket_id)
        if self.debug_checks and ts is not None:
            if bucket.lock.holders.get(ts) is not LockMode.EXCLUSIVE:
                raise LockProtocolError(
                    f"delete in bucket {bucket_id} without an exclusive lock (txn {ts})"
                )
        bucket.records.pop(key, None)
        if writer is not None:
            self.last_writer[(bucket_id, key)] = writer

    def snapshot(self):
        """Bucket contents as a plain dict, for replica-consistency checks."""
        return {bid: dict(b.records) for bid, b in sorted(self.buckets.items())}
