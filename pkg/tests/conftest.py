import pytest

from txnlab.partitioning import LookupTable
from txnlab.protocols import Cluster
from txnlab.txn import (
    INSERT,
    READ,
    UPDATE,
    LogicDecision,
    TransactionProgram,
    TxnOp,
)


class ListWorkload:
    """Minimal workload wrapper for hand-built scenarios."""

    def __init__(self, buckets, records=()):
        self._buckets = list(buckets)
        self._records = list(records)

    def all_buckets(self):
        return self._buckets

    def initial_records(self):
        for bucket in self._buckets:
            yield bucket, b"k", b"0"
        yield from self._records

    def ground_truth(self):
        return None


def simple_lookup(k, placements, hot=()):
    """LookupTable with explicit bucket -> partition pins."""
    table = LookupTable(k=k)
    for bucket, pid in placements.items():
        table.entries[bucket] = (pid, bucket in hot, 0.9 if bucket in hot else 0.0)
    return table


def rmw_program(buckets, home=0, txn_type="rmw"):
    """One update op per bucket; each bumps its counter by one."""
    ops = [TxnOp(i, UPDATE, ("lit", b"k"), bucket=b) for i, b in enumerate(buckets)]

    def logic(reads):
        writes = {op.op_id: str(int(reads.get(op.op_id) or b"0") + 1).encode()
                  for op in ops}
        return LogicDecision(True, writes)

    return TransactionProgram(txn_type, ops, logic, home_partition=home)


def mini_cluster(k=4, placements=None, hot=(), replication_f=0, seed=1, **kw):
    placements = placements or {}
    lookup = simple_lookup(k, placements, hot=hot)
    cluster = Cluster(k, lookup, replication_f=replication_f, seed=seed, **kw)
    cluster.load_workload(ListWorkload(sorted(placements)))
    return cluster


# the running example used across planner tests: a ticket-booking style
# program whose hot read+insert+update cluster sits on one partition
def booking_program(flight_b=10, seats_b=11, cust_b=20, tax_b=30,
                    seats_left=3, balance=100, price=40, tax=2):
    ops = [
        TxnOp(0, READ, ("lit", b"flight"), bucket=flight_b),
        TxnOp(1, READ, ("lit", b"cust"), bucket=cust_b),
        TxnOp(2, READ, ("from", 1), bucket=tax_b, key_fn=lambda v: b"tax"),
        TxnOp(3, INSERT, ("from", 0), bucket=seats_b,
              value_source=("from", [1]), key_fn=lambda v: b"seat" + v,
              constraint="seat_available"),
        TxnOp(4, UPDATE, ("lit", b"flight"), bucket=flight_b,
              value_source=("from", [0])),
        TxnOp(5, UPDATE, ("lit", b"cust"), bucket=cust_b,
              value_source=("from", [0, 1, 2])),
    ]

    def logic(reads):
        seats = int(reads.get(0) or b"0")
        bal = int(reads.get(1) or b"0")
        rate = int(reads.get(2) or b"0")
        cost = price + rate
        if seats <= 0 or bal < cost:
            return LogicDecision(False)
        return LogicDecision(True, {
            3: b"booked",
            4: str(seats - 1).encode(),
            5: str(bal - cost).encode(),
        }, outputs={"cost": cost})

    prog = TransactionProgram("booking", ops, logic, home_partition=0)
    prog.initial = [
        (flight_b, b"flight", str(seats_left).encode()),
        (cust_b, b"cust", str(balance).encode()),
        (tax_b, b"tax", str(tax).encode()),
        (seats_b, None, None),
    ]
    return prog


@pytest.fixture
def booking():
    return booking_program()
