"""Exception types shared across the package."""


class TxnLabError(Exception):
    """Base class for all txnlab errors."""


class ConfigError(TxnLabError):
    """Invalid or infeasible configuration; message names the offending field."""


class RoutingError(TxnLabError):
    """A request reached a partition that does not own the bucket.

    This always indicates a routing bug (stale or inconsistent lookup
    table), never a legitimate runtime condition.
    """


class LockProtocolError(TxnLabError):
    """A lock was used in a way the protocol forbids (e.g. releasing an
    unheld lock, or writing without an exclusive lock)."""


class MalformedProgramError(TxnLabError):
    """A transaction program references operations that do not exist or
    violates the one-shot ordering rules."""


class TraceParseError(TxnLabError):
    """An order-trace file could not be parsed; carries the line number."""

    def __init__(self, message, line_no=None):
        super().__init__(message if line_no is None else f"line {line_no}: {message}")
        self.line_no = line_no


class UnrecoverableGroupError(TxnLabError):
    """All f+1 copies of a replica group failed; liveness precondition broken."""
