"""txnlab: a deterministic lab for contention-centric distributed
transaction processing on a simulated cluster."""

from .errors import (
    ConfigError,
    LockProtocolError,
    MalformedProgramError,
    RoutingError,
    TraceParseError,
    TxnLabError,
    UnrecoverableGroupError,
)
from .harness import (
    ExperimentConfig,
    MetricsReport,
    check_serializable,
    emit_report,
    run_experiment,
    sweep,
    verify_atomicity,
)
from .partitioning import (
    AccessSample,
    ContentionStats,
    LookupTable,
    PartitionAssignment,
    WorkloadGraph,
    build_record_graph,
    build_star_graph,
    contention_likelihood,
    emit_lookup_table,
    estimate_rates,
    partition_graph,
)
from .protocols import (
    Cluster,
    History,
    ReplicaGroup,
    TxnOutcome,
    measure_contention_span,
)
from .replication import PendingTxnEntry, RecoveryReport, recover
from .simulator import LatencyModel, Simulator
from .storage import (
    NO_WAIT,
    WAIT_DIE,
    LockMode,
    LockResult,
    PartitionStore,
    TxnTimestamp,
    bucket_of,
)
from .txn import (
    DependencyGraph,
    ExecutionPlan,
    LogicDecision,
    TransactionProgram,
    TxnOp,
    build_dependency_graph,
    candidate_inner_ops,
    plan_regions,
    select_inner_host,
)
from .workloads import (
    OrderTrace,
    OrderTraceWorkload,
    TpccLite,
    TpccLiteConfig,
    YcsbDistributed,
    YcsbLocal,
    ZipfSampler,
    load_order_trace,
    synthetic_order_trace,
    trace_to_neworder,
)

__version__ = "0.1.0"
