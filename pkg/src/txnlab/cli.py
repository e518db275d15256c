"""Command-line entry points: run one experiment, partition a sample file,
or sweep a config field across values."""
from __future__ import annotations

import argparse
import sys

from .errors import TxnLabError
from .harness import (
    ExperimentConfig,
    check_serializable,
    emit_report,
    run_experiment,
    sweep,
)
from .partitioning import (
    build_star_graph,
    emit_lookup_table,
    estimate_rates,
    load_samples,
    partition_graph,
)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="txnlab",
        description="deterministic lab for contention-centric distributed "
                    "transaction processing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--emit", choices=("csv", "json"), default="csv")
    p_run.add_argument("--out", default="report.csv")
    p_run.add_argument("--trace", default=None,
                       help="write the event trace to this file")
    p_run.add_argument("--check", action="store_true",
                       help="verify the committed history is serializable")

    p_part = sub.add_parser("partition", help="partition a sample file")
    p_part.add_argument("--samples", required=True)
    p_part.add_argument("--k", type=int, required=True)
    p_part.add_argument("--epsilon", type=float, default=0.10)
    p_part.add_argument("--coverage", type=float, default=1.0)
    p_part.add_argument("--hot-threshold", type=float, default=0.01)
    p_part.add_argument("--lock-window", type=float, default=32.0)
    p_part.add_argument("--min-edge-weight", type=int, default=0)
    p_part.add_argument("--seed", type=int, default=1)
    p_part.add_argument("--out", required=True)

    p_sweep = sub.add_parser("sweep", help="vary one config field over values")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--vary", required=True, metavar="field=v1,v2,...")
    p_sweep.add_argument("--emit", choices=("csv", "json"), default="csv")
    p_sweep.add_argument("--out", default="sweep.csv")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "partition":
            return _cmd_partition(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
    except TxnLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _cmd_run(args):
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        data = cfg.to_dict()
        data["seed"] = args.seed
        cfg = ExperimentConfig.from_dict(data)
    if args.trace:
        data = cfg.to_dict()
        data["trace"] = True
        cfg = ExperimentConfig.from_dict(data)
    report, history, cluster = run_experiment(cfg, return_cluster=True)
    emit_report([report], args.emit, args.out)
    if args.trace:
        cluster.sim.dump_trace(args.trace)
    print(f"committed={report.committed} aborted={report.aborted} "
          f"abort_rate={report.abort_rate:.3f} throughput={report.throughput:.4f}")
    if args.check:
        verdict, cycle = check_serializable(history)
        print(f"serializability: {verdict}" + (f" {cycle}" if cycle else ""))
        if verdict != "serializable":
            return 1
    print(f"report written to {args.out}")
    return 0


def _cmd_partition(args):
    samples = load_samples(args.samples)
    stats = estimate_rates(samples, window=max(len(samples), 1),
                           lock_window=args.lock_window)
    graph = build_star_graph(samples, stats, min_edge_weight=args.min_edge_weight)
    assignment = partition_graph(graph, args.k, args.epsilon, seed=args.seed)
    table = emit_lookup_table(assignment, stats,
                              hot_threshold=args.hot_threshold,
                              coverage=args.coverage)
    table.save(args.out)
    print(f"cut_weight={assignment.cut_weight} entries={len(table.entries)} "
          f"hot={len(table.hot_buckets())} -> {args.out}")
    return 0


def _cmd_sweep(args):
    cfg = ExperimentConfig.from_json(args.config)
    field, _, raw = args.vary.partition("=")
    if not raw:
        raise TxnLabError("--vary expects field=v1,v2,...")
    values = [_coerce(v) for v in raw.split(",")]
    reports = sweep(cfg, field, values)
    emit_report(reports, args.emit, args.out)
    for value, report in zip(values, reports):
        print(f"{field}={value}: committed={report.committed} "
              f"throughput={report.throughput:.4f}")
    print(f"sweep written to {args.out}")
    return 0


def _coerce(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


if __name__ == "__main__":
    raise SystemExit(main())
