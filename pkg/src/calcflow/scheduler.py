"""Graph execution: input policies, priority scheduling, flow control, run lifecycle."""
from __future__ import annotations

import heapq
import itertools
import logging
import os
import queue
import random
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from .calculator import (
    CalculatorContext,
    InputPolicy,
    InputSet,
    run_close,
    run_open,
    run_process,
)
from .calculator import registry as default_calculators
from .config import DEFAULT_EXECUTOR, ValidatedGraph
from .core import DONE, InputQueue, OutputPort, Packet, make_packet
from .errors import (
    GraphTerminated,
    MissingSidePacket,
    NonMonotonicTimestamp,
    UnknownStream,
)
from .tracer import DEFAULT_CAPACITY, GRAPH_NODE, EventType, make_tracer

log = logging.getLogger(__name__)


# input policies

def default_ready(queues: dict[str, InputQueue], pop: bool = True) -> InputSet | None:
    """Earliest timestamp settled on every input with a packet on at least one."""
    if not queues:
        return None
    bound = min(q.bound for q in queues.values())
    fronts = [q.front() for q in queues.values() if q.packets]
    if not fronts:
        return None
    t = min(fronts)
    if t >= bound:
        return None
    return _take(queues, t, pop)


def immediate_ready(queues: dict[str, InputQueue], pop: bool = True) -> InputSet | None:
    """Smallest queued front timestamp, with no cross-stream settling wait."""
    fronts = [q.front() for q in queues.values() if q.packets]
    if not fronts:
        return None
    return _take(queues, min(fronts), pop)


def grouped_ready(queues: dict[str, InputQueue], groups, pop: bool = True):
    """Default policy applied per group; the lowest-timestamp ready group wins."""
    best = None
    for gi, group in enumerate(groups):
        sub = {tag: queues[tag] for tag in sorted(group) if tag in queues}
        s = default_ready(sub, pop=False)
        if s is not None and (best is None or s.timestamp < best[1].timestamp):
            best = (gi, s, sub)
    if best is None:
        return None
    gi, s, sub = best
    return gi, (_take(sub, s.timestamp, True) if pop else s)


def _take(queues, t, pop):
    entries = {}
    for tag, q in queues.items():
        if q.packets and q.packets[0].timestamp == t:
            entries[tag] = q.pop() if pop else q.packets[0]
        else:
            entries[tag] = None
    return InputSet(t, entries)


def throttled_producers(consumers_by_producer) -> set:
    """Producers with at least one saturated consumer queue."""
    return {p for p, qs in consumers_by_producer.items() if any(q.saturated for q in qs)}


# run-time state

class NodeState(Enum):
    NOT_READY = "not ready"
    READY = "ready"
    RUNNING = "running"
    CLOSED = "closed"


@dataclass
class RunOptions:
    workers: int | None = None
    executor_workers: dict[str, int] = field(default_factory=dict)
    max_queue_size: int | None = None
    trace: bool | None = None
    trace_capacity: int = DEFAULT_CAPACITY
    deterministic: bool = False
    task_delay_ms: float = 0.0
    shuffle_ties: bool = False
    seed: int | None = None


@dataclass
class RunResult:
    status: str
    message: str = ""
    events: list = field(default_factory=list, repr=False)
    node_names: dict[int, str] = field(default_factory=dict, repr=False)
    stream_names: dict[int, str] = field(default_factory=dict, repr=False)
    outputs: dict[str, list[Packet]] = field(default_factory=dict, repr=False)
    relaxations: int = 0
    dropped_events: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "Done"


class OutputPoller:
    """Pull-style observer: yields ("packet", p), ("bound", ts) and ("closed", None)."""

    def __init__(self):
        self._q: queue.Queue = queue.Queue()

    def _put(self, kind, value):
        self._q.put((kind, value))

    def next(self, timeout=None):
        return self._q.get(timeout=timeout)

    def packets(self, timeout=None):
        """Iterate packets until the stream closes."""
        while True:
            kind, value = self.next(timeout)
            if kind == "closed":
                return
            if kind == "packet":
                yield value


class _Feeder:
    """Virtual producer behind a graph input stream."""

    def __init__(self, port):
        self.port = port
        self.throttled = False
        self.waiting = 0
        self.name = f"<input {port.name}>"
        self.index = GRAPH_NODE


class _Node:
    """Scheduler-side state for one node; also the backend of its context."""

    def __init__(self, run, info, instance):
        self.run = run
        self.info = info
        self.index = info.index
        self.name = info.name
        self.instance = instance
        self.contract = info.contract
        self.policy: InputPolicy = info.contract.input_policy
        self.offset_zero = info.contract.timestamp_offset_zero
        self.is_source = info.is_source
        self.priority = info.priority
        self.inputs: dict[str, InputQueue] = {}
        self.outputs: dict[str, OutputPort] = {}
        self.ctx: CalculatorContext | None = None
        self.opened = False
        self.closed = False
        self.running = False
        self.queued = False
        self.throttled = False
        self.done_notified: set[str] = set()
        self.executor = info.executor

    @property
    def state(self) -> NodeState:
        if self.closed:
            return NodeState.CLOSED
        if self.running:
            return NodeState.RUNNING
        if self.queued:
            return NodeState.READY
        return NodeState.NOT_READY

    # context backend
    def emit(self, tag, p):
        self.run._emit(self, tag, p)

    def set_bound(self, tag, b):
        with self.run._cond:
            self.run._advance(self.outputs[tag], b)

    def output_bound(self, tag):
        return self.outputs[tag].bound

    def output_tags(self):
        return list(self.outputs)

    def input_bound(self, tag):
        with self.run._cond:
            return self.inputs[tag].bound

    def input_done(self, tag):
        with self.run._cond:
            return self.inputs[tag].done

    def record_drop(self, tag, p):
        with self.run._cond:
            self.run._rec(EventType.PacketDropped, p.timestamp, p.data_id, self.index,
                          self.inputs[tag].stream_id)

    def set_output_side_packet(self, tag, value):
        with self.run._cond:
            self.run._side[self.info.output_sides[tag]] = value

    def __repr__(self):
        return f"<node {self.name} {self.state.value}>"


class GraphRun:
    """One execution of a validated graph.

    Attach observers, call ``start()``, feed graph inputs, close them, then
    ``wait()``.  ``run()`` wraps the whole sequence.
    """

    def __init__(self, graph: ValidatedGraph, side_packets=None, options: RunOptions | None = None,
                 calculators=None):
        self.graph = graph
        self.options = options or RunOptions()
        self._calculators = calculators if calculators is not None else default_calculators
        self._cond = threading.Condition(threading.Lock())
        trace_on = graph.trace_enabled if self.options.trace is None else self.options.trace
        self.tracer = make_tracer(trace_on, self.options.trace_capacity)
        self._tr = self.tracer if self.tracer.enabled else None
        self._side: dict[str, object] = dict(side_packets or {})
        self._rng = random.Random(self.options.seed)
        self._tick = itertools.count()
        self._errors: list[str] = []
        self._finished = False
        self._started = False
        self._status = "Running"
        self._running_count = 0
        self._relaxations = 0
        self._threads: list[threading.Thread] = []
        self._observers: dict[int, list] = {}
        self._ports: dict[str, OutputPort] = {}
        self._producer: dict[int, object] = {}
        self._feeders: dict[str, _Feeder] = {}

        missing = [s for s in graph.graph_side_packets if s not in self._side]
        if missing:
            raise MissingSidePacket(f"graph side packets not supplied: {missing}")

        for sname, s in graph.streams.items():
            self._ports[sname] = OutputPort(sname, s.type_name, s.id)

        limit_default = graph.max_queue_size if self.options.max_queue_size is None \
            else self.options.max_queue_size
        self.nodes: list[_Node] = []
        for info in graph.nodes:
            instance = self._calculators.lookup(info.calculator)()
            node = _Node(self, info, instance)
            limit = info.config.max_queue_size
            if limit is None:
                limit = limit_default
            for tag, sname in info.inputs.items():
                q = InputQueue(consumer=info.index, tag=tag, limit=limit,
                               back_edge=tag in info.back_edges)
                self._ports[sname].connect(q)
                node.inputs[tag] = q
            for tag, sname in info.outputs.items():
                node.outputs[tag] = self._ports[sname]
                self._producer[self._ports[sname].stream_id] = node
            if self.options.deterministic:
                node.executor = DEFAULT_EXECUTOR
            self.nodes.append(node)
        for sname in graph.graph_inputs:
            f = _Feeder(self._ports[sname])
            self._feeders[sname] = f
            self._producer[self._ports[sname].stream_id] = f

        self._executors: dict[str, int] = {}
        self._heaps: dict[str, list] = {}
        for name, configured in graph.executors.items():
            if self.options.deterministic:
                if name != DEFAULT_EXECUTOR:
                    continue
                n = 1
            elif name == DEFAULT_EXECUTOR:
                n = self.options.workers or configured or os.cpu_count() or 1
            else:
                n = self.options.executor_workers.get(name) or configured or 1
            self._executors[name] = max(1, int(n))
            self._heaps[name] = []

    # observation

    def observe_output(self, stream: str, callback=None):
        """Register a callback (called with each packet) or return an OutputPoller."""
        if stream not in self.graph.graph_outputs:
            raise UnknownStream(f"{stream!r} is not a graph output stream")
        if self._started:
            raise RuntimeError("observers must be attached before start()")
        obs = callback if callback is not None else OutputPoller()
        self._observers.setdefault(self._ports[stream].stream_id, []).append(obs)
        return obs

    def _notify_observers(self, port, kind, value, deferred):
        for obs in self._observers.get(port.stream_id, ()):
            if isinstance(obs, OutputPoller):
                obs._put(kind, value)
            elif kind == "packet":
                deferred.append((obs, value))

    # tracing helper; callers hold the lock
    def _rec(self, et, ts=None, data_id=0, node_id=GRAPH_NODE, stream_id=0):
        if self._tr is not None:
            from .core import UNSET
            self._tr.record(et, UNSET if ts is None else ts, data_id, node_id, stream_id)

    # data plane

    def _emit(self, node, tag, p):
        deferred = []
        with self._cond:
            port = node.outputs[tag]
            self._push(port, p, node.index, deferred)
        for cb, pkt in deferred:
            cb(pkt)

    def _push(self, port, p, producer_id, deferred):
        port.emit(p)
        self._rec(EventType.PacketEmitted, p.timestamp, p.data_id, producer_id, port.stream_id)
        for q in port.queues:
            self._rec(EventType.PacketQueued, p.timestamp, p.data_id, q.consumer, port.stream_id)
        self._notify_observers(port, "packet", p, deferred)
        self._refresh_throttle(self._producer.get(port.stream_id))
        for q in port.queues:
            self._schedule(self.nodes[q.consumer])

    def _advance(self, port, b):
        if not port.set_bound(b):
            return
        self._rec(EventType.BoundAdvanced, None if b == DONE else b, 0,
                  getattr(self._producer.get(port.stream_id), "index", GRAPH_NODE), port.stream_id)
        self._notify_observers(port, "closed" if b == DONE else "bound", None if b == DONE else b, [])
        for q in port.queues:
            self._schedule(self.nodes[q.consumer])

    def _refresh_throttle(self, producer):
        if producer is None:
            return
        ports = producer.outputs.values() if isinstance(producer, _Node) else [producer.port]
        now = any(q.saturated for port in ports for q in port.queues)
        if now == producer.throttled:
            return
        producer.throttled = now
        self._rec(EventType.Throttled if now else EventType.Unthrottled, node_id=producer.index)
        if not now:
            if isinstance(producer, _Node):
                self._schedule(producer)
            else:
                self._cond.notify_all()

    def _after_pop(self, q):
        if q.effective_limit > q.limit and len(q) < q.limit:
            q.effective_limit = q.limit
        self._refresh_throttle(self._producer.get(q.stream_id))

    # readiness

    def _close_condition(self, node):
        if node.is_source:
            return all(p.closed for p in node.outputs.values())
        return all(q.done for q in node.inputs.values())

    def _next_task(self, node, pop):
        if self._errors:
            return ("close", None)
        if node.is_source:
            if self._close_condition(node):
                return ("close", None)
            return ("process", InputSet(None, {}))
        kind = node.policy.kind
        if kind == "immediate":
            s = immediate_ready(node.inputs, pop)
            if s is None:
                fresh = [t for t, q in node.inputs.items() if q.done and t not in node.done_notified]
                if fresh:
                    if pop:
                        node.done_notified.update(fresh)
                    s = InputSet(None, {})
        elif kind == "grouped":
            got = grouped_ready(node.inputs, node.policy.groups, pop)
            s = got[1] if got else None
        else:
            s = default_ready(node.inputs, pop)
        if s is not None:
            return ("process", s)
        if self._close_condition(node):
            return ("close", None)
        return None

    def _propagate(self, node):
        """Timestamp-offset-zero nodes forward input settling to their outputs."""
        if not node.offset_zero or not node.outputs:
            return
        qs = [q for t, q in node.inputs.items() if t not in node.info.back_edges]
        if not qs:
            return
        target = min(q.bound for q in qs)
        fronts = [q.front() for q in qs if q.packets]
        if fronts:
            target = min(target, min(fronts))
        for port in node.outputs.values():
            if port.bound < target:
                self._advance(port, target)

    def _schedule(self, node):
        if node.closed or node.running or node.queued or not node.opened or self._finished:
            return
        self._propagate(node)
        if node.queued:  # propagation around a back edge may have queued it already
            return
        task = self._next_task(node, pop=False)
        if task is None:
            return
        if task[0] == "process" and node.throttled and not self._errors:
            return
        node.queued = True
        tie = self._rng.random() if self.options.shuffle_ties else node.index
        heapq.heappush(self._heaps[node.executor], (-node.priority, tie, next(self._tick), node))
        self._rec(EventType.NodeReady, node_id=node.index)
        self._cond.notify_all()

    def throttled_nodes(self):
        with self._cond:
            return {n.name for n in self.nodes if n.throttled}

    # lifecycle

    def start(self):
        if self._started:
            raise RuntimeError("run already started")
        self._started = True
        self._open_all()
        with self._cond:
            for node in self.nodes:
                self._schedule(node)
            self._check_quiescence()
        for name, n in self._executors.items():
            for k in range(n):
                t = threading.Thread(target=self._worker, args=(name, k),
                                     name=f"calcflow-{name}-{k}", daemon=True)
                t.start()
                self._threads.append(t)
        return self

    def _open_all(self):
        pending = list(self.nodes)
        while pending:
            progressed = False
            for node in list(pending):
                with self._cond:
                    if self._errors:
                        break
                    sides = node.info.input_sides
                    if not all(name in self._side for name in sides.values()):
                        continue
                    values = {tag: self._side[name] for tag, name in sides.items()}
                    node.ctx = CalculatorContext(node, node.info.config.options, values, node.contract)
                    self._rec(EventType.OpenStart, node_id=node.index)
                pending.remove(node)
                progressed = True
                err = None
                try:
                    run_open(node.instance, node.ctx)
                except Exception as e:
                    err = e
                with self._cond:
                    self._rec(EventType.OpenFinish, node_id=node.index)
                    node.opened = True
                    if err is not None:
                        self._fail(node, "Open", err)
            if self._errors or not progressed:
                break
        with self._cond:
            if pending and not self._errors:
                missing = sorted({s for n in pending for s in n.info.input_sides.values()
                                  if s not in self._side})
                self._errors.append(f"side packets never produced: {missing}")
            for node in pending:
                node.closed = True  # never opened, so never closed either

    def _worker(self, executor, k):
        rng = random.Random(None if self.options.seed is None else f"{self.options.seed}/{executor}/{k}")
        heap = self._heaps[executor]
        while True:
            with self._cond:
                while not heap and not self._finished:
                    self._cond.wait()
                if self._finished:
                    return
                _, _, _, node = heapq.heappop(heap)
                node.queued = False
                task = self._prepare(node)
                if task is None:
                    self._check_quiescence()
                    continue
            self._execute(node, task, rng)

    def _prepare(self, node):
        if node.closed:
            return None
        task = self._next_task(node, pop=True)
        if task is None:
            return None
        kind, inputs = task
        # mark running first: unthrottling a producer below can reach this node again
        node.running = True
        self._running_count += 1
        if kind == "process" and inputs is not None:
            for tag, p in inputs.entries.items():
                if p is not None:
                    q = node.inputs[tag]
                    self._rec(EventType.PacketConsumed, p.timestamp, p.data_id, node.index, q.stream_id)
                    self._after_pop(q)
        start = EventType.ProcessStart if kind == "process" else EventType.CloseStart
        ts = inputs.timestamp if inputs is not None else None
        self._rec(start, ts, node_id=node.index)
        return task

    def _execute(self, node, task, rng):
        kind, inputs = task
        if self.options.task_delay_ms > 0:
            time.sleep(rng.uniform(0, self.options.task_delay_ms) / 1000.0)
        err = None
        try:
            if kind == "process":
                run_process(node.instance, node.ctx, inputs)
            else:
                run_close(node.instance, node.ctx)
        except Exception as e:
            err = e
        with self._cond:
            try:
                self._finish(node, kind, inputs, err)
            except Exception as e:  # framework bug: never leave the run hanging
                log.exception("internal scheduler error")
                self._fail(node, "scheduler", e)
                self._check_quiescence()

    def _finish(self, node, kind, inputs, err):
        ts = inputs.timestamp if inputs is not None else None
        finish = EventType.ProcessFinish if kind == "process" else EventType.CloseFinish
        self._rec(finish, ts, node_id=node.index)
        node.running = False
        self._running_count -= 1
        if err is not None:
            self._fail(node, "Process" if kind == "process" else "Close", err)
        if kind == "close":
            node.closed = True
            for port in node.outputs.values():
                self._advance(port, DONE)
            for q in node.inputs.values():
                while q.packets:
                    p = q.pop()
                    self._rec(EventType.PacketDropped, p.timestamp, p.data_id, node.index, q.stream_id)
                self._after_pop(q)
        elif node.offset_zero and ts is not None and not self._errors and any(
                p is not None and t not in node.info.back_edges for t, p in inputs.entries.items()):
            for port in node.outputs.values():
                if port.bound < ts + 1:
                    self._advance(port, ts + 1)
        self._schedule(node)
        self._check_quiescence()

    def _fail(self, node, where, err):
        first = not self._errors
        self._errors.append(f"{node.name}: {where}: {type(err).__name__}: {err}")
        if first:
            log.error("graph error in %s.%s: %r", node.name, where, err)
            for n in self.nodes:
                if not n.opened:
                    n.closed = True
                elif not n.closed:
                    self._schedule(n)
            self._cond.notify_all()

    def _check_quiescence(self):
        if self._finished or self._running_count or any(self._heaps.values()):
            return
        if all(n.closed for n in self.nodes):
            self._status = "Error" if self._errors else "Done"
            self._finished = True
            for port in self._ports.values():
                if not port.closed and self._observers.get(port.stream_id):
                    self._notify_observers(port, "closed", None, [])
            self._cond.notify_all()
            return
        if not self._started or any(n.opened is False and not n.closed for n in self.nodes):
            return
        candidates = [n for n in self.nodes if n.throttled and not n.closed
                      and (t := self._next_task(n, pop=False)) is not None and t[0] == "process"]
        candidates += [f for f in self._feeders.values() if f.throttled and f.waiting]
        if candidates:
            self._relax(candidates)
            return
        if any(not f.port.closed for f in self._feeders.values()):
            return  # idle until the application feeds or closes inputs
        stuck = [n.name for n in self.nodes if not n.closed]
        self._errors.append(f"stalled: nodes {stuck} cannot make progress")
        for n in self.nodes:
            if n.opened and not n.closed:
                self._schedule(n)
        if not any(self._heaps.values()):
            for n in self.nodes:
                n.closed = True
            self._check_quiescence()

    def _relax(self, producers):
        saturated = []
        for p in producers:
            ports = p.outputs.values() if isinstance(p, _Node) else [p.port]
            for port in ports:
                for q in port.queues:
                    if q.saturated:
                        saturated.append(q)
        q = min(saturated, key=lambda q: (q.effective_limit, q.stream_id, q.consumer))
        q.effective_limit += q.limit
        self._relaxations += 1
        self._rec(EventType.DeadlockRelaxation, node_id=q.consumer, stream_id=q.stream_id)
        log.debug("relaxed queue limit of stream %d to %d", q.stream_id, q.effective_limit)
        self._refresh_throttle(self._producer.get(q.stream_id))

    # graph inputs

    def _feeder(self, stream):
        f = self._feeders.get(stream)
        if f is None:
            raise UnknownStream(f"{stream!r} is not a graph input stream")
        return f

    def add_packet(self, stream: str, packet, ts: int | None = None) -> None:
        """Feed a graph input; blocks while a consumer queue is at its limit."""
        if not isinstance(packet, Packet):
            packet = make_packet(packet, ts)
        elif ts is not None:
            packet = packet.at(ts)
        deferred = []
        with self._cond:
            f = self._feeder(stream)
            if self._finished or self._errors or f.port.closed:
                raise GraphTerminated(f"cannot feed {stream!r}: " + (
                    "input closed" if f.port.closed else "graph run ended"))
            if packet.timestamp <= f.port.last_ts or packet.timestamp < f.port.bound:
                raise NonMonotonicTimestamp(
                    f"graph input {stream!r}: timestamp {packet.timestamp} not increasing")
            while f.throttled and not (self._finished or self._errors):
                f.waiting += 1
                self._check_quiescence()
                self._cond.wait()
                f.waiting -= 1
            if self._finished or self._errors:
                raise GraphTerminated(f"graph run ended while feeding {stream!r}")
            self._push(f.port, packet, GRAPH_NODE, deferred)
        for cb, pkt in deferred:
            cb(pkt)

    add_to_graph_input = add_packet

    def set_input_bound(self, stream: str, bound: int) -> None:
        with self._cond:
            self._advance(self._feeder(stream).port, bound)

    def close_input(self, stream: str) -> None:
        with self._cond:
            f = self._feeder(stream)
            self._advance(f.port, DONE)
            self._check_quiescence()

    close_graph_input = close_input

    def close_all_inputs(self) -> None:
        for name in self._feeders:
            self.close_input(name)

    def wait(self, timeout: float | None = None) -> RunResult:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._finished:
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise TimeoutError("graph run did not finish in time")
                self._cond.wait(left)
        for t in self._threads:
            t.join()
        return self.result()

    def result(self) -> RunResult:
        return RunResult(
            status=self._status,
            message="; ".join(self._errors),
            events=self.tracer.snapshot(),
            node_names={n.index: n.name for n in self.nodes},
            stream_names={s.id: s.name for s in self.graph.streams.values()},
            relaxations=self._relaxations,
            dropped_events=self.tracer.dropped,
        )

    @property
    def status(self):
        return self._status


def run(graph: ValidatedGraph, side_packets=None, options: RunOptions | None = None,
        inputs=None, calculators=None, timeout: float | None = None) -> RunResult:
    """Run to completion: feed ``inputs`` ({stream: [(ts, value) | Packet]}), close,
    and collect every graph output stream into ``result.outputs``."""
    gr = GraphRun(graph, side_packets, options, calculators)
    collected: dict[str, list[Packet]] = {s: [] for s in graph.graph_outputs}
    for s in graph.graph_outputs:
        gr.observe_output(s, collected[s].append)
    gr.start()
    try:
        for stream, items in (inputs or {}).items():
            for item in items:
                if isinstance(item, Packet):
                    gr.add_packet(stream, item)
                else:
                    ts, value = item
                    gr.add_packet(stream, value, ts)
        for s in graph.graph_inputs:
            gr.close_input(s)
    except GraphTerminated:
        pass
    res = gr.wait(timeout)
    res.outputs = collected
    return res
