"""Trace recording, export, summaries and critical-path analysis."""
from __future__ import annotations

import itertools
import json
import os
import threading
import time
from bisect import bisect_left
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

from .core import UNSET
from .errors import LineageBroken, MalformedTrace

DEFAULT_CAPACITY = 65536
GRAPH_NODE = -1  # node_id used for events with no owning node (graph inputs)


class EventType(IntEnum):
    ProcessStart = 1
    ProcessFinish = 2
    OpenStart = 3
    OpenFinish = 4
    CloseStart = 5
    CloseFinish = 6
    PacketEmitted = 7
    PacketQueued = 8
    PacketConsumed = 9
    PacketDropped = 10
    BoundAdvanced = 11
    NodeReady = 12
    Throttled = 13
    Unthrottled = 14
    DeadlockRelaxation = 15


_STARTS = {EventType.ProcessStart, EventType.OpenStart, EventType.CloseStart}
_FINISH_OF = {
    EventType.ProcessStart: EventType.ProcessFinish,
    EventType.OpenStart: EventType.OpenFinish,
    EventType.CloseStart: EventType.CloseFinish,
}
_START_OF = {v: k for k, v in _FINISH_OF.items()}


class TraceEvent(NamedTuple):
    event_time: int
    event_type: EventType
    packet_timestamp: int = UNSET
    packet_data_id: int = 0
    node_id: int = GRAPH_NODE
    stream_id: int = 0
    seq: int = 0


class _Shard:
    __slots__ = ("buf", "cap", "n")

    def __init__(self, cap):
        self.buf = [None] * cap
        self.cap = cap
        self.n = 0

    def append(self, e):
        self.buf[self.n % self.cap] = e
        self.n += 1

    def items(self):
        while True:
            n = self.n
            buf = list(self.buf)
            if n == self.n:
                break
        if n <= self.cap:
            return buf[:n]
        start = n % self.cap
        return buf[start:] + buf[:start]

    @property
    def dropped(self):
        return max(0, self.n - self.cap)


class TraceBuffer:
    """Bounded ring of trace events, one shard per recording thread.

    Threads never wait on each other to record: each writes only its own
    shard, and ordering comes from a shared atomic sequence counter.
    """

    enabled = True

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._local = threading.local()
        self._shards: list[_Shard] = []
        self._shards_lock = threading.Lock()
        self._seq = itertools.count()

    def _shard(self):
        shard = getattr(self._local, "shard", None)
        if shard is None:
            shard = _Shard(self.capacity)
            with self._shards_lock:  # once per thread
                self._shards.append(shard)
            self._local.shard = shard
        return shard

    def record(self, event_type, packet_timestamp=UNSET, data_id=0, node_id=GRAPH_NODE,
               stream_id=0, event_time=None):
        e = TraceEvent(
            time.monotonic_ns() if event_time is None else event_time,
            event_type, packet_timestamp, data_id, node_id, stream_id, next(self._seq),
        )
        self._shard().append(e)
        return e

    def record_event(self, e: TraceEvent) -> None:
        self._shard().append(e._replace(seq=next(self._seq)))

    @property
    def dropped(self) -> int:
        return sum(s.dropped for s in list(self._shards))

    def snapshot(self) -> list[TraceEvent]:
        events = []
        for s in list(self._shards):
            events.extend(s.items())
        events.sort(key=lambda e: (e.event_time, e.seq))
        return events

    def __len__(self):
        return sum(min(s.n, s.cap) for s in list(self._shards))


class NullTracer:
    """Stand-in used when tracing is off; every call is a no-op."""

    enabled = False
    capacity = 0
    dropped = 0

    def record(self, *args, **kwargs):
        return None

    def record_event(self, e):
        return None

    def snapshot(self):
        return []

    def __len__(self):
        return 0


def make_tracer(enabled: bool, capacity: int = DEFAULT_CAPACITY):
    # CALCFLOW_NO_TRACER=1 strips tracing regardless of configuration.
    if not enabled or os.environ.get("CALCFLOW_NO_TRACER") == "1":
        return NullTracer()
    return TraceBuffer(capacity)


# export / import

def export(events, node_names=None, stream_names=None) -> str:
    """Serialize to the JSON trace-event array understood by timeline viewers."""
    node_names = node_names or {}
    stream_names = stream_names or {}
    out = []
    for nid in sorted({e.node_id for e in events}):
        out.append({"name": "thread_name", "ph": "M", "ts": 0, "pid": 1, "tid": nid,
                    "args": {"name": node_names.get(nid, f"node{nid}" if nid >= 0 else "graph")}})
    for e in events:
        et = EventType(e.event_type)
        args = {
            "event": et.name,
            "t_ns": e.event_time,
            "seq": e.seq,
            "packet_timestamp": None if e.packet_timestamp == UNSET else e.packet_timestamp,
            "data_id": e.packet_data_id,
            "stream": e.stream_id,
        }
        if e.stream_id in stream_names:
            args["stream_name"] = stream_names[e.stream_id]
        if et in _STARTS or et in _START_OF:
            ph = "B" if et in _STARTS else "E"
            name = node_names.get(e.node_id, f"node{e.node_id}")
        else:
            ph, name = "i", et.name
        obj = {"name": name, "ph": ph, "ts": e.event_time / 1000.0, "pid": 1,
               "tid": e.node_id, "args": args}
        if ph == "i":
            obj["s"] = "t"
        out.append(obj)
    return json.dumps(out, separators=(",", ":"))


def export_file(path, events, node_names=None, stream_names=None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(export(events, node_names, stream_names))


def load_trace(text: str):
    """Inverse of ``export``; returns (events, node_names)."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedTrace(f"not valid JSON: {e}") from None
    if not isinstance(data, list):
        raise MalformedTrace("trace must be a JSON array")
    events, names = [], {}
    for i, obj in enumerate(data):
        try:
            if obj["ph"] == "M":
                names[int(obj["tid"])] = obj["args"]["name"]
                continue
            a = obj["args"]
            pts = a["packet_timestamp"]
            events.append(TraceEvent(
                int(a["t_ns"]), EventType[a["event"]], UNSET if pts is None else int(pts),
                int(a["data_id"]), int(obj["tid"]), int(a["stream"]), int(a["seq"]),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedTrace(f"bad trace record #{i}: {e!r}") from None
    events.sort(key=lambda e: (e.event_time, e.seq))
    return events, names


# summaries

def _bucket(duration_ns: int) -> int:
    """Power-of-two microsecond bucket: k covers [2**k, 2**(k+1)) us; 0 also holds < 1 us."""
    us = duration_ns // 1000
    return max(0, us.bit_length() - 1)


@dataclass
class NodeStats:
    node_id: int
    name: str
    count: int = 0
    total_ns: int = 0
    max_ns: int = 0
    histogram: dict[int, int] = field(default_factory=dict)
    opens: int = 0
    closes: int = 0

    @property
    def mean_ns(self) -> float:
        return self.total_ns / self.count if self.count else 0.0


@dataclass
class StreamStats:
    stream_id: int
    queued: int = 0
    consumed: int = 0
    dropped: int = 0
    discarded: int = 0  # dropped while still queued, never consumed
    emitted: int = 0
    high_water: int = 0
    residency_total_ns: int = 0
    residency_max_ns: int = 0


@dataclass
class TraceSummary:
    nodes: dict[int, NodeStats] = field(default_factory=dict)
    streams: dict[int, StreamStats] = field(default_factory=dict)
    unmatched: list[TraceEvent] = field(default_factory=list)
    throttled_events: int = 0
    relaxations: int = 0
    output_latency: list[tuple[int, int, int]] = field(default_factory=list)

    def table(self) -> str:
        rows = [f"{'node':<32} {'count':>7} {'total_us':>12} {'mean_us':>10} {'max_us':>10}"]
        for s in self.nodes.values():
            rows.append(f"{s.name:<32} {s.count:>7} {s.total_ns / 1e3:>12.1f} "
                        f"{s.mean_ns / 1e3:>10.1f} {s.max_ns / 1e3:>10.1f}")
        return "\n".join(rows)

    def machine_lines(self) -> list[str]:
        return [f"node,{s.name},{s.count},{s.total_ns / 1e3:.3f},{s.mean_ns / 1e3:.3f},{s.max_ns / 1e3:.3f}"
                for s in self.nodes.values()]


def _intervals(events, strict=True):
    """Pair Start/Finish per node -> ({node: [(kind, start_ev, finish_ev)]}, unmatched)."""
    open_ev: dict[int, TraceEvent] = {}
    seen_start: set[int] = set()
    out: dict[int, list] = defaultdict(list)
    unmatched = []
    for e in events:
        et = e.event_type
        if et in _STARTS:
            if e.node_id in open_ev:
                raise MalformedTrace(f"node {e.node_id}: {et.name} while "
                                     f"{open_ev[e.node_id].event_type.name} still running")
            open_ev[e.node_id] = e
            seen_start.add(e.node_id)
        elif et in _START_OF:
            start = open_ev.pop(e.node_id, None)
            if start is None:
                if e.node_id in seen_start:
                    raise MalformedTrace(f"node {e.node_id}: {et.name} without a start")
                unmatched.append(e)  # its start fell off the ring
                continue
            if start.event_type != _START_OF[et]:
                raise MalformedTrace(f"node {e.node_id}: {start.event_type.name} closed by {et.name}")
            out[e.node_id].append((start.event_type, start, e))
    unmatched.extend(open_ev.values())
    return out, unmatched


def summarize(events, node_names=None) -> TraceSummary:
    node_names = node_names or {}
    summary = TraceSummary()
    intervals, summary.unmatched = _intervals(events)
    for nid in sorted(set(intervals) | {e.node_id for e in summary.unmatched if e.node_id >= 0}):
        stats = NodeStats(nid, node_names.get(nid, f"node{nid}"))
        for kind, start, finish in intervals.get(nid, ()):
            if kind == EventType.OpenStart:
                stats.opens += 1
            elif kind == EventType.CloseStart:
                stats.closes += 1
            else:
                d = finish.event_time - start.event_time
                stats.count += 1
                stats.total_ns += d
                stats.max_ns = max(stats.max_ns, d)
                b = _bucket(d)
                stats.histogram[b] = stats.histogram.get(b, 0) + 1
        summary.nodes[nid] = stats

    sizes: dict[tuple[int, int], int] = defaultdict(int)
    pending: dict[tuple[int, int], deque] = defaultdict(deque)
    consumed_keys: set = set()
    for e in events:
        et = e.event_type
        if et == EventType.Throttled:
            summary.throttled_events += 1
        elif et == EventType.DeadlockRelaxation:
            summary.relaxations += 1
        if not e.stream_id:
            continue
        st = summary.streams.get(e.stream_id)
        if st is None:
            st = summary.streams[e.stream_id] = StreamStats(e.stream_id)
        key = (e.stream_id, e.node_id)
        if et == EventType.PacketEmitted:
            st.emitted += 1
        elif et == EventType.PacketQueued:
            st.queued += 1
            sizes[key] += 1
            st.high_water = max(st.high_water, sizes[key])
            pending[key].append(e)
        elif et == EventType.PacketConsumed:
            st.consumed += 1
            sizes[key] -= 1
            consumed_keys.add((key, e.packet_data_id, e.packet_timestamp))
            if pending[key]:
                q = pending[key].popleft()
                d = e.event_time - q.event_time
                st.residency_total_ns += d
                st.residency_max_ns = max(st.residency_max_ns, d)
        elif et == EventType.PacketDropped:
            st.dropped += 1
            if (key, e.packet_data_id, e.packet_timestamp) not in consumed_keys:
                st.discarded += 1
                sizes[key] -= 1
                if pending[key]:
                    pending[key].popleft()
    if any(e.event_type == EventType.PacketConsumed for e in events):
        lin = _Lineage(events)
        for e in terminal_emits(events):
            try:
                path = critical_path(events, e.packet_data_id, e.stream_id, e.packet_timestamp, lin)
            except LineageBroken:
                continue
            if path:
                summary.output_latency.append(
                    (e.packet_data_id, e.packet_timestamp, path[-1].finish_ns - path[0].start_ns))
    return summary


def queue_sizes(events):
    """Yield (event, stream_id, consumer, size) after every queue change."""
    sizes: dict[tuple[int, int], int] = defaultdict(int)
    consumed_keys = set()
    for e in events:
        key = (e.stream_id, e.node_id)
        if e.event_type == EventType.PacketQueued:
            sizes[key] += 1
        elif e.event_type == EventType.PacketConsumed:
            sizes[key] -= 1
            consumed_keys.add((key, e.packet_data_id, e.packet_timestamp))
        elif e.event_type == EventType.PacketDropped and \
                (key, e.packet_data_id, e.packet_timestamp) not in consumed_keys:
            sizes[key] -= 1
        else:
            continue
        yield e, e.stream_id, e.node_id, sizes[key]


# critical path

class PathStep(NamedTuple):
    node_id: int
    start_ns: int
    finish_ns: int

    @property
    def duration_ns(self):
        return self.finish_ns - self.start_ns


class _Lineage:
    def __init__(self, events):
        self.intervals, _ = _intervals(events)
        self.starts = {n: [s.seq for _, s, _ in iv] for n, iv in self.intervals.items()}
        self.emits: dict[int, list[TraceEvent]] = defaultdict(list)
        self.consumed: dict[int, list[TraceEvent]] = defaultdict(list)
        for e in events:
            if e.event_type == EventType.PacketEmitted:
                self.emits[e.packet_data_id].append(e)
            elif e.event_type == EventType.PacketConsumed:
                self.consumed[e.node_id].append(e)
        self.consumed_seqs = {n: [e.seq for e in evs] for n, evs in self.consumed.items()}

    def invocation(self, node, seq):
        """Index of the node's interval enclosing `seq`, or None."""
        starts = self.starts.get(node, [])
        i = bisect_left(starts, seq) - 1
        if i >= 0:
            _, s, f = self.intervals[node][i]
            if s.seq < seq < f.seq:
                return i
        return None

    def inputs_of(self, node, i):
        """PacketConsumed events recorded between the previous interval and this start."""
        _, start, _ = self.intervals[node][i]
        lo = self.intervals[node][i - 1][2].seq if i > 0 else -1
        seqs = self.consumed_seqs.get(node, [])
        a = bisect_left(seqs, lo)
        b = bisect_left(seqs, start.seq)
        return self.consumed[node][a:b]

    def producer_emit(self, consumed):
        best = None
        for e in self.emits.get(consumed.packet_data_id, ()):
            if (e.stream_id == consumed.stream_id and e.packet_timestamp == consumed.packet_timestamp
                    and e.seq < consumed.seq and (best is None or e.seq > best.seq)):
                best = e
        return best


def critical_path(events, output_packet_data_id, stream_id=None, timestamp=None,
                  lineage=None) -> list[PathStep]:
    """Chain of invocations that determined when the given output packet was emitted.

    Walks back from the emitting invocation, at each step following the
    input whose producing invocation finished last.  Returns steps from the
    origin (a source or the invocation fed by a graph input) to the output.
    """
    lin = lineage or _Lineage(events)
    candidates = [e for e in lin.emits.get(output_packet_data_id, ())
                  if (stream_id is None or e.stream_id == stream_id)
                  and (timestamp is None or e.packet_timestamp == timestamp)]
    if not candidates:
        raise LineageBroken(f"no emission of data_id {output_packet_data_id} in trace")
    emit = max(candidates, key=lambda e: e.seq)
    path = []
    while True:
        if emit.node_id == GRAPH_NODE:
            break
        i = lin.invocation(emit.node_id, emit.seq)
        if i is None:
            raise LineageBroken(f"emission by node {emit.node_id} outside any traced invocation")
        kind, start, finish = lin.intervals[emit.node_id][i]
        path.append(PathStep(emit.node_id, start.event_time, finish.event_time))
        if kind != EventType.ProcessStart:
            break
        best = None
        for c in lin.inputs_of(emit.node_id, i):
            src = lin.producer_emit(c)
            if src is None:
                raise LineageBroken(f"input data_id {c.packet_data_id} has no traced producer")
            if src.node_id == GRAPH_NODE:
                fin = src.event_time
            else:
                j = lin.invocation(src.node_id, src.seq)
                if j is None:
                    raise LineageBroken(f"producer of data_id {c.packet_data_id} not traced")
                fin = lin.intervals[src.node_id][j][2].event_time
            if best is None or fin > best[0]:
                best = (fin, src)
        if best is None:
            break
        emit = best[1]
    path.reverse()
    return path


def terminal_emits(events):
    """Emissions on streams that reach a sink (a node that never emits) or nobody at all."""
    emitters = {e.node_id for e in events if e.event_type == EventType.PacketEmitted}
    consumers: dict[int, set[int]] = defaultdict(set)
    for e in events:
        if e.event_type == EventType.PacketQueued:
            consumers[e.stream_id].add(e.node_id)
    return [e for e in events if e.event_type == EventType.PacketEmitted
            and e.node_id != GRAPH_NODE
            and (not consumers[e.stream_id] or consumers[e.stream_id] - emitters)]
