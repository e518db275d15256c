"""Deterministic discrete-event cluster simulator.

Nodes exchange point-to-point messages with configurable latency. A single
event loop processes events in (deliver_at, seq) order, so identical
(config, seed) pairs produce identical traces. Crashed nodes neither send
nor receive: in-flight messages touching them are dropped (fencing), with
one exception -- a message sent with ``reliable=True`` whose send completion
already fired survives a later crash of its sender. Send completions model
transport-level hardware acks: they fire ``local_delay`` after the send,
strictly before delivery.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass

UP = "up"
CRASHED = "crashed"

_CRASH_MARKER = object()


@dataclass
class LatencyModel:
    """Point-to-point message delays, in simulated time units.

    ``local_delay`` models an intra-node hop (memory-access scale) and is
    also the send-completion delay for reliable sends. ``remote_delay``
    models a cross-partition one-way message. Default ratio is 10:1.
    ``jitter`` adds a seeded uniform integer in [0, jitter] to remote sends.
    """

    local_delay: int = 1
    remote_delay: int = 10
    jitter: int = 0

    def __post_init__(self):
        if not (self.remote_delay >= self.local_delay >= 0):
            raise ValueError("latency model requires remote_delay >= local_delay >= 0")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


class Simulator:
    """Single-threaded deterministic event loop over a fixed node set."""

    def __init__(self, node_count, latency=None, seed=0, trace=False):
        self.node_count = node_count
        self.latency = latency or LatencyModel()
        self._heap = []
        self._seq = 0
        self._now = 0
        self._handlers = [None] * node_count
        self._crashed = {}  # node -> crash time
        self._rng = random.Random(f"{seed}:netsim")
        self.dropped = 0
        self.delivered = 0
        self.trace = [] if trace else None
        self._last_popped = (-1, -1)

    # -- clock & status ----------------------------------------------------

    def now(self):
        return self._now

    def status(self, node):
        return CRASHED if node in self._crashed else UP

    def live_nodes(self):
        return [n for n in range(self.node_count) if n not in self._crashed]

    def register(self, node, handler):
        """handler(src, msg) is invoked for each delivery to `node`."""
        self._handlers[node] = handler

    # -- event injection ---------------------------------------------------

    def _push(self, deliver_at, src, dst, msg, safe_at=None):
        self._seq += 1
        heapq.heappush(self._heap, (deliver_at, self._seq, src, dst, msg, safe_at))

    def send(self, src, dst, msg, reliable=False):
        """Queue a message; delivery order is deterministic under the seed.

        Sends to or from an already-crashed node are silently dropped (and
        counted). A ``reliable`` send survives a sender crash that happens
        at or after its completion time (now + local_delay).
        """
        if src in self._crashed or dst in self._crashed:
            self.dropped += 1
            return
        if src == dst:
            delay = self.latency.local_delay
        else:
            delay = self.latency.remote_delay
            if self.latency.jitter:
                delay += self._rng.randint(0, self.latency.jitter)
        safe_at = self._now + self.latency.local_delay if reliable else None
        self._push(self._now + delay, src, dst, msg, safe_at)

    def call_later(self, node, delay, msg):
        """Self-addressed timer event; dropped if the node crashes first."""
        if node in self._crashed:
            self.dropped += 1
            return
        self._push(self._now + delay, node, node, msg)

    def crash(self, node, at=None):
        """Schedule a whole-node crash; fencing applies from that instant."""
        when = self._now if at is None else at
        if when < self._now:
            raise ValueError("cannot crash in the past")
        self._push(when, node, node, _CRASH_MARKER)

    def crash_now(self, node):
        """Immediate crash, effective before any event queued after now."""
        self._crashed.setdefault(node, self._now)

    # -- event loop ----------------------------------------------------------

    def run_until_quiescent(self, max_events=50_000_000):
        """Drain the event queue; returns the final simulated time."""
        heap = self._heap
        crashed = self._crashed
        processed = 0
        while heap:
            deliver_at, seq, src, dst, msg, safe_at = heapq.heappop(heap)
            assert (deliver_at, seq) > self._last_popped, "event order violated"
            self._last_popped = (deliver_at, seq)
            self._now = deliver_at
            if msg is _CRASH_MARKER:
                crashed.setdefault(dst, deliver_at)
                continue
            if dst in crashed:
                self.dropped += 1
                continue
            if src in crashed and src != dst:
                # fencing: unreliable in-flight traffic from a crashed node
                # is lost; reliable traffic survives once its completion
                # (hardware ack) fired before the crash.
                if safe_at is None or safe_at > crashed[src]:
                    self.dropped += 1
                    continue
            if self.trace is not None:
                self.trace.append(
                    (deliver_at, seq, src, dst, type(msg).__name__,
                     getattr(msg, "txn_id", ""))
                )
            self.delivered += 1
            self._handlers[dst](src, msg)
            processed += 1
            if processed > max_events:
                raise RuntimeError("event budget exhausted; runaway simulation?")
        return self._now

    def dump_trace(self, path):
        """Write the event trace: one `time,seq,from,to,msg_kind,txn_id` line."""
        if self.trace is None:
            raise ValueError("simulator was created with trace=False")
        with open(path, "w", encoding="utf-8") as fh:
            for time, seq, src, dst, kind, txn in self.trace:
                fh.write(f"{time},{seq},{src},{dst},{kind},{txn}\n")
