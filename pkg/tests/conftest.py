import threading

import pytest

import calcflow as cf
from calcflow.calculator import Calculator, CalculatorContract, InputSpec, option, registry

RECORDS: dict[str, list] = {}
_lock = threading.Lock()


def records(key):
    with _lock:
        return list(RECORDS.get(key, ()))


@cf.register("InputSetRecorder")
class InputSetRecorder(Calculator):
    """Records (timestamp, present tags) per Process call under options.key."""

    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(inputs={t: InputSpec(optional=True) for t in shape.input_tags},
                                  outputs={t: "any" for t in shape.output_tags})

    def open(self, ctx):
        self.key = option(ctx, "key", "default", str)
        with _lock:
            RECORDS[self.key] = []

    def process(self, ctx):
        with _lock:
            RECORDS[self.key].append((ctx.input_timestamp, tuple(sorted(ctx.inputs.present()))))


@cf.register("FlushOnCloseCalculator")
class FlushOnClose(Calculator):
    """Buffers everything and emits it all from Close."""

    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(inputs={"IN": InputSpec()}, outputs={"OUT": cf.SameAs("IN")})

    def open(self, ctx):
        self.buf = []

    def process(self, ctx):
        self.buf.append(ctx.input("IN"))

    def close(self, ctx):
        for p in self.buf:
            ctx.emit("OUT", p)


def graph(text, **kw):
    return cf.load_graph(text, **kw)


def run_text(text, inputs=None, side=None, timeout=30, **opts):
    g = graph(text)
    return cf.run(g, side_packets=side, options=cf.RunOptions(**opts), inputs=inputs, timeout=timeout)


def payloads(result, stream):
    return [(p.timestamp, p.payload) for p in result.outputs[stream]]


PASS = """
input_stream: "in"
output_stream: "out"
node { calculator: "PassThroughCalculator" input_stream: "IN:in" output_stream: "OUT:out" }
"""


@pytest.fixture
def pass_graph():
    return graph(PASS)


@cf.register("FloatSink")
class FloatSink(Calculator):
    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(inputs={"IN": InputSpec("float")})


GATES: dict[str, threading.Event] = {}


@cf.register("GateCalculator")
class Gate(Calculator):
    """Pass-through whose Process waits for GATES[options.gate]."""

    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(inputs={"IN": InputSpec()}, outputs={t: cf.SameAs("IN") for t in shape.output_tags})

    def open(self, ctx):
        self.event = GATES.setdefault(option(ctx, "gate", "g", str), threading.Event())

    def process(self, ctx):
        self.event.wait(10)
        for tag in ctx.output_tags:
            ctx.emit(tag, ctx.input("IN"))


@cf.register("SideProducer")
class SideProducer(Calculator):
    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(output_side_packets={"VALUE": "any"})

    def open(self, ctx):
        ctx.set_output_side_packet("VALUE", option(ctx, "value", 1))
        ctx.close_all_outputs()


@cf.register("SideEmitter")
class SideEmitter(Calculator):
    """Source that emits its VALUE side packet once, from Open, at ts=0."""

    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(input_side_packets={"VALUE": "any"}, outputs={"OUT": "any"})

    def open(self, ctx):
        ctx.emit("OUT", ctx.side_packet("VALUE"), 0)
        ctx.close_all_outputs()


@cf.register("BadCloseCalculator")
class BadClose(Calculator):
    """Re-emits its last input from Close, violating monotonicity."""

    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(inputs={"IN": InputSpec()}, outputs={"OUT": cf.SameAs("IN")})

    def open(self, ctx):
        self.last = None

    def process(self, ctx):
        self.last = ctx.input("IN")
        ctx.emit("OUT", self.last)

    def close(self, ctx):
        if self.last is not None:
            ctx.emit("OUT", self.last)


class Harness:
    """Drives one calculator directly, acting as its context backend."""

    def __init__(self, name, options=None, inputs=(), outputs=(), side=None):
        from calcflow.calculator import CalculatorContext, NodeShape, fill_contract, run_open
        from calcflow.core import TS_MIN
        options = dict(options or {})
        shape = NodeShape(options, tuple(inputs), tuple(outputs), tuple(side or ()))
        self.contract = fill_contract(name, shape=shape)
        self.instance = registry.lookup(name)()
        self.out_tags = list(outputs) or list(self.contract.outputs)
        self.in_tags = list(inputs) or list(self.contract.inputs)
        self.emitted = {t: [] for t in self.out_tags}
        self.bounds = {t: TS_MIN for t in self.out_tags}
        self.drops = []
        self.done = set()
        self.ctx = CalculatorContext(self, options, side or {}, self.contract)
        run_open(self.instance, self.ctx)

    # backend
    def emit(self, tag, p):
        if p.timestamp < self.bounds[tag]:
            raise cf.NonMonotonicTimestamp(f"{tag}: {p.timestamp} < {self.bounds[tag]}")
        self.emitted[tag].append(p)
        self.bounds[tag] = p.timestamp + 1

    def set_bound(self, tag, b):
        self.bounds[tag] = max(self.bounds[tag], b)

    def output_bound(self, tag):
        return self.bounds[tag]

    def output_tags(self):
        return list(self.out_tags)

    def input_bound(self, tag):
        return cf.DONE if tag in self.done else cf.TS_MIN

    def input_done(self, tag):
        if tag not in self.in_tags:
            raise KeyError(tag)
        return tag in self.done

    def record_drop(self, tag, p):
        self.drops.append((tag, p.timestamp))

    def set_output_side_packet(self, tag, value):
        pass

    # driving
    def feed(self, ts, **entries):
        from calcflow.calculator import InputSet, run_process
        packets = {t: (None if entries.get(t) is None else cf.make_packet(entries[t], ts))
                   for t in self.in_tags}
        run_process(self.instance, self.ctx, InputSet(ts, packets))

    def finish(self, tag):
        from calcflow.calculator import InputSet, run_process
        self.done.add(tag)
        if self.contract.input_policy.kind == "immediate":
            run_process(self.instance, self.ctx, InputSet(None, {}))

    def close(self):
        from calcflow.calculator import run_close
        self.done.update(self.in_tags)
        run_close(self.instance, self.ctx)

    def out(self, tag=None):
        tag = tag or self.out_tags[0]
        return [(p.timestamp, p.payload) for p in self.emitted[tag]]


_criteria: list[tuple[str, bool]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and (report.when == "call" or report.failed):
        label = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _criteria.append((label, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed in _criteria:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}")
