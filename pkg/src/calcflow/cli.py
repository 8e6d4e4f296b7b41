"""Command-line runner: ``calcflow run | validate | trace-report``."""
from __future__ import annotations

import argparse
import heapq
import json
import logging
import sys

from .config import SubgraphRegistry, expand_subgraphs, load_subgraph_dir, parse_file, validate
from .core import payload_from_json, payload_to_json
from .errors import (
    CalcflowError,
    ConfigSyntaxError,
    GraphTerminated,
    GraphValidationError,
    MalformedTrace,
)
from .scheduler import GraphRun, RunOptions
from .tracer import critical_path, export_file, load_trace, summarize, terminal_emits
from .tracer import _Lineage

EXIT_OK, EXIT_RUN_ERROR, EXIT_USAGE = 0, 1, 2

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


def _pairs(items, what):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"{what} must look like NAME=VALUE, got {item!r}")
        out[key] = value
    return out


def _literal(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load(args):
    reg = SubgraphRegistry()
    for d in args.subgraph_path or ():
        load_subgraph_dir(d, reg)
    g = parse_file(args.graph)
    return validate(expand_subgraphs(g, reg), subgraph_reg=reg)


def _read_records(path, stream, type_name):
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ts = rec["ts"]
                value = payload_from_json(type_name, rec["value"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise UsageError(f"{path}:{lineno}: bad input record for {stream!r}: {e}") from None
            if isinstance(ts, bool) or not isinstance(ts, int):
                raise UsageError(f"{path}:{lineno}: ts must be an integer")
            records.append((ts, value))
    return records


def _record(p) -> str:
    return json.dumps({"ts": p.timestamp, "value": payload_to_json(p.payload)},
                      sort_keys=True, separators=(",", ":"))


def cmd_run(args) -> int:
    graph = _load(args)
    inputs = _pairs(args.input, "--input")
    outputs = _pairs(args.output, "--output")
    for s in inputs:
        if s not in graph.graph_inputs:
            raise UsageError(f"--input {s!r}: not a graph input stream (have {graph.graph_inputs})")
    for s in outputs:
        if s not in graph.graph_outputs:
            raise UsageError(f"--output {s!r}: not a graph output stream (have {graph.graph_outputs})")
    missing = [s for s in graph.graph_inputs if s not in inputs]
    if missing:
        log.info("graph inputs without --input are closed immediately: %s", missing)
    side = {k: _literal(v) for k, v in _pairs(args.side, "--side").items()}
    executors = {k: int(v) for k, v in _pairs(args.executor, "--executor").items()}
    options = RunOptions(
        workers=args.workers,
        executor_workers=executors,
        max_queue_size=args.max_queue_size,
        trace=True if args.trace else None,
        deterministic=args.deterministic,
        seed=args.seed,
    )
    feeds = []
    for k, (stream, path) in enumerate(inputs.items()):
        for seq, (ts, value) in enumerate(_read_records(path, stream, graph.streams[stream].type_name)):
            feeds.append((ts, k, seq, stream, value))
    heapq.heapify(feeds)

    gr = GraphRun(graph, side, options)
    collected = {s: [] for s in outputs}
    for s, lines in collected.items():
        gr.observe_output(s, lambda p, lines=lines: lines.append(_record(p)))
    gr.start()
    try:
        while feeds:
            ts, _, _, stream, value = heapq.heappop(feeds)
            gr.add_packet(stream, value, ts)
        gr.close_all_inputs()
    except GraphTerminated:
        pass
    result = gr.wait()

    for s, path in outputs.items():
        with open(path, "w", encoding="utf-8") as f:
            f.writelines(line + "\n" for line in collected[s])
    if args.trace:
        export_file(args.trace, result.events, result.node_names, result.stream_names)
        if args.summary:
            print(summarize(result.events, result.node_names).table())
    if not result.ok:
        print(f"graph error: {result.message}", file=sys.stderr)
        return EXIT_RUN_ERROR
    return EXIT_OK


def cmd_validate(args) -> int:
    graph = _load(args)
    for w in graph.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{'node':<32} {'calculator':<32} {'priority':>8}")
    for n in sorted(graph.nodes, key=lambda n: (-n.priority, n.index)):
        print(f"{n.name:<32} {n.calculator:<32} {n.priority:>8}")
    return EXIT_OK


def cmd_trace_report(args) -> int:
    with open(args.trace, encoding="utf-8") as f:
        events, names = load_trace(f.read())
    summary = summarize(events, names)
    if args.machine:
        for line in summary.machine_lines():
            print(line)
    else:
        print(summary.table())
    if summary.unmatched:
        print(f"{len(summary.unmatched)} unmatched interval events (ring overflow)", file=sys.stderr)
    lineage = _Lineage(events)
    for e in terminal_emits(events):
        try:
            path = critical_path(events, e.packet_data_id, e.stream_id, e.packet_timestamp, lineage)
        except CalcflowError as err:
            print(f"ts={e.packet_timestamp} stream={e.stream_id}: {err}")
            continue
        chain = " -> ".join(names.get(s.node_id, str(s.node_id)) for s in path)
        span = (path[-1].finish_ns - path[0].start_ns) / 1e3 if path else 0.0
        print(f"ts={e.packet_timestamp} stream={e.stream_id}: {chain} ({span:.1f} us)")
    if summary.relaxations:
        print(f"deadlock relaxations: {summary.relaxations}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calcflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def graph_args(sp):
        sp.add_argument("--graph", required=True, help="graph config file")
        sp.add_argument("--subgraph-path", action="append", metavar="DIR",
                        help="directory of subgraph configs (repeatable)")

    r = sub.add_parser("run", help="run a graph to completion")
    graph_args(r)
    r.add_argument("--input", action="append", metavar="STREAM=PATH", help="JSON-lines input")
    r.add_argument("--output", action="append", metavar="STREAM=PATH", help="JSON-lines output")
    r.add_argument("--side", action="append", metavar="NAME=VALUE",
                   help="side packet; VALUE is JSON, else taken as a string")
    r.add_argument("--trace", metavar="PATH", help="write a trace-event JSON file")
    r.add_argument("--summary", action="store_true", help="print a per-node summary (needs --trace)")
    r.add_argument("--workers", type=int, help="workers of the default executor")
    r.add_argument("--executor", action="append", metavar="NAME=N", help="workers of a named executor")
    r.add_argument("--max-queue-size", type=int)
    r.add_argument("--deterministic", action="store_true", help="single worker, fixed tie-breaks")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="parse, expand and validate; print priorities")
    graph_args(v)
    v.set_defaults(func=cmd_validate)

    t = sub.add_parser("trace-report", help="summarize a trace file")
    t.add_argument("trace")
    t.add_argument("--machine", action="store_true", help="comma-separated rows")
    t.set_defaults(func=cmd_trace_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigSyntaxError as e:
        print(f"config error: {e}", file=sys.stderr)
    except GraphValidationError as e:
        for v in e.violations:
            print(f"{getattr(args, 'graph', '')}: {type(v).__name__}: {v}", file=sys.stderr)
    except MalformedTrace as e:
        print(f"malformed trace: {e}", file=sys.stderr)
    except (UsageError, CalcflowError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
