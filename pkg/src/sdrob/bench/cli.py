"""Benchmark command line.

    sdrob-bench switch   [--backend B] [--iters N]
    sdrob-bench rollback [--backend B] [--scrub] [--faults N]
    sdrob-bench throughput [--backend B] [--workers N] [--payload BYTES]
    sdrob-bench memory   [--backend B] [--items N] [--payload BYTES]

Every run prints the records and, with --csv/--jsonl, writes them out.
Exit code 3 flags a rollback run that measured no faults.
"""

import argparse
import sys

from ..config import Config
from . import harness
from .records import print_records, write_csv, write_jsonl


def _config(args) -> Config:
    cfg = Config.from_env()
    if args.backend:
        cfg = Config(backend=args.backend, stack_size=cfg.stack_size,
                     heap_size=cfg.heap_size,
                     scrub_on_destroy=cfg.scrub_on_destroy)
    return cfg


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sdrob-bench")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--backend", default="",
                        choices=("", "hardware", "paging", "audit"))
    common.add_argument("--csv", default="", help="write records to this CSV file")
    common.add_argument("--jsonl", default="", help="write records as JSON lines")
    sub = ap.add_subparsers(dest="cmd", required=True)

    sw = sub.add_parser("switch", parents=[common],
                        help="domain enter+exit latency")
    sw.add_argument("--iters", type=int, default=1_000_000)

    rb = sub.add_parser("rollback", parents=[common],
                        help="rollback vs process restart")
    rb.add_argument("--scrub", action="store_true")
    rb.add_argument("--faults", type=int, default=1000)
    rb.add_argument("--restarts", type=int, default=30)

    tp = sub.add_parser("throughput", parents=[common],
                        help="ops/sec vs the baseline build")
    tp.add_argument("--workers", type=int, default=1)
    tp.add_argument("--payload", type=int, default=1024)
    tp.add_argument("--duration", type=float, default=3.0)
    tp.add_argument("--clients", type=int, default=4)

    me = sub.add_parser("memory", parents=[common],
                        help="resident set size vs the baseline")
    me.add_argument("--items", type=int, default=100_000)
    me.add_argument("--payload", type=int, default=1024)
    me.add_argument("--reps", type=int, default=1)
    me.add_argument("--workers", type=int, default=1)

    args = ap.parse_args(argv)
    cfg = _config(args)

    if args.cmd == "switch":
        records = harness.bench_switch_latency(cfg, iters=args.iters)
    elif args.cmd == "rollback":
        records = harness.bench_rollback_latency(cfg, scrub=args.scrub,
                                                 faults=args.faults,
                                                 restarts=args.restarts)
    elif args.cmd == "throughput":
        records = harness.bench_throughput(cfg, workers=args.workers,
                                           payload=args.payload,
                                           duration=args.duration,
                                           clients=args.clients)
    else:
        records = harness.bench_memory(cfg, items=args.items,
                                       payload=args.payload, reps=args.reps,
                                       workers=args.workers)

    print_records(records)
    if args.csv:
        write_csv(records, args.csv)
    if args.jsonl:
        write_jsonl(records, args.jsonl)
    if args.cmd == "rollback" and not any(r.metric == "rollback_latency"
                                          for r in records):
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
