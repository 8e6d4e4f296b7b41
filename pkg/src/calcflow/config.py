"""Graph configuration language: parsing, serialization, subgraphs, validation.

Grammar (UTF-8 text, ``#`` comments to end of line)::

    file      := item*
    item      := KEY ':' VALUE | 'executor' '{' ... '}' | 'node' '{' nodeitem* '}'
    nodeitem  := KEY ':' VALUE | 'options' '{' (IDENT ':' VALUE)* '}'
    VALUE     := "string" | integer | float | true | false

Stream references inside quotes are ``[TAG:]name``; untagged entries get
positional tags (IN0, IN1, ... / OUT0, ... / SIDE0, ... / OUT_SIDE0, ...).
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any

from .calculator import CalculatorContract, NodeShape, SameAs, fill_contract
from .calculator import registry as default_calculators
from .core import ANY, types_compatible
from .errors import (
    ConfigSyntaxError,
    ContractViolation,
    CycleDetected,
    DuplicateKey,
    DuplicateName,
    GraphValidationError,
    InvalidOptions,
    MissingInterface,
    MultipleProducers,
    NotRegistered,
    RecursiveSubgraph,
    TypeMismatch,
    UnknownCalculator,
    UnknownExecutor,
    UnknownSubgraph,
    UnproducedInput,
)

log = logging.getLogger(__name__)

NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
TAG_RE = re.compile(r"[A-Z_][A-Z0-9_]*\Z")
DEFAULT_MAX_QUEUE_SIZE = 100
DEFAULT_EXECUTOR = "default"


# AST

@dataclass
class StreamRef:
    tag: str
    name: str
    implicit: bool = False

    def __str__(self):
        return self.name if self.implicit else f"{self.tag}:{self.name}"


@dataclass
class ExecutorConfig:
    name: str
    num_workers: int | None = None


@dataclass
class NodeConfig:
    calculator: str
    name: str | None = None
    input_streams: list[StreamRef] = field(default_factory=list)
    output_streams: list[StreamRef] = field(default_factory=list)
    input_side_packets: list[StreamRef] = field(default_factory=list)
    output_side_packets: list[StreamRef] = field(default_factory=list)
    executor: str | None = None
    back_edges: list[str] = field(default_factory=list)
    max_queue_size: int | None = None
    options: dict[str, Any] = field(default_factory=dict)
    line: int = field(default=0, compare=False, repr=False)


@dataclass
class GraphConfig:
    type: str | None = None
    input_streams: list[StreamRef] = field(default_factory=list)
    output_streams: list[StreamRef] = field(default_factory=list)
    input_side_packets: list[StreamRef] = field(default_factory=list)
    executors: list[ExecutorConfig] = field(default_factory=list)
    num_threads: int | None = None
    max_queue_size: int | None = None
    trace_enabled: bool | None = None
    nodes: list[NodeConfig] = field(default_factory=list)
    source: str | None = field(default=None, compare=False, repr=False)


_REF_LISTS = {
    "input_stream": ("input_streams", "IN"),
    "output_stream": ("output_streams", "OUT"),
    "input_side_packet": ("input_side_packets", "SIDE"),
    "output_side_packet": ("output_side_packets", "OUT_SIDE"),
}
_GRAPH_SCALARS = {"type": str, "num_threads": int, "max_queue_size": int, "trace_enabled": bool}
_GRAPH_LISTS = {"input_stream", "output_stream", "input_side_packet"}
_NODE_SCALARS = {"calculator": str, "name": str, "executor": str, "max_queue_size": int}
_NODE_LISTS = {"input_stream", "output_stream", "input_side_packet", "output_side_packet", "back_edge"}
_EXECUTOR_KEYS = {"name": str, "num_workers": int}


# tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<number>[-+]?(?:\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+[eE][-+]?\d+|\d+))
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[{}:])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    value: Any
    line: int
    col: int


def _tokenize(text, source=None):
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise ConfigSyntaxError(f"unexpected character {text[pos]!r}", line, col, source=source)
        kind = m.lastgroup
        tok = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "string":
            toks.append(_Tok("string", tok, json.loads(tok), line, col))
        elif kind == "number":
            value = float(tok) if any(c in tok for c in ".eE") else int(tok)
            toks.append(_Tok("number", tok, value, line, col))
        elif kind == "ident":
            value = {"true": True, "false": False}.get(tok, tok)
            toks.append(_Tok("bool" if isinstance(value, bool) else "ident", tok, value, line, col))
        elif kind == "punct":
            toks.append(_Tok(tok, tok, tok, line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", None, line, pos - line_start + 1))
    return toks


# parser

class _Parser:
    def __init__(self, text, source=None):
        self.toks = _tokenize(text, source)
        self.i = 0
        self.source = source

    def peek(self):
        return self.toks[self.i]

    def error(self, tok, msg, expected=None, cls=ConfigSyntaxError):
        return cls(msg, tok.line, tok.col, expected, self.source)

    def expect(self, kind, what=None):
        tok = self.peek()
        if tok.kind != kind:
            found = "end of input" if tok.kind == "eof" else repr(tok.text)
            raise self.error(tok, f"expected {what or kind!r}, found {found}", what or kind)
        self.i += 1
        return tok

    def value(self):
        tok = self.peek()
        if tok.kind not in ("string", "number", "bool"):
            raise self.error(tok, "expected a value", "value")
        self.i += 1
        return tok

    def typed(self, tok, kind, key):
        v = tok.value
        ok = {
            str: tok.kind == "string",
            int: tok.kind == "number" and isinstance(v, int),
            bool: tok.kind == "bool",
        }[kind]
        if not ok:
            raise self.error(tok, f"{key!r} expects a {kind.__name__} value", kind.__name__)
        return v

    def stream_ref(self, tok, key, implicit_prefix, counter):
        text = self.typed(tok, str, key)
        if ":" in text:
            tag, name = text.split(":", 1)
            if not TAG_RE.match(tag):
                raise self.error(tok, f"bad tag {tag!r}", "TAG")
            implicit = False
        else:
            tag, name, implicit = f"{implicit_prefix}{counter}", text, True
        if not NAME_RE.match(name):
            raise self.error(tok, f"bad stream name {name!r}", "NAME")
        return StreamRef(tag, name, implicit)

    def parse(self):
        g = GraphConfig(source=self.source)
        seen = set()
        counters = {}
        while self.peek().kind != "eof":
            key_tok = self.expect("ident", "key")
            key = key_tok.value
            if key in ("node", "executor"):
                self.expect("{")
                if key == "node":
                    g.nodes.append(self.node(key_tok))
                else:
                    g.executors.append(self.executor(key_tok))
                continue
            self.expect(":")
            vtok = self.value()
            if key in _GRAPH_LISTS:
                attr, prefix = _REF_LISTS[key]
                n = counters.get(key, 0)
                ref = self.stream_ref(vtok, key, prefix, n)
                counters[key] = n + ref.implicit
                getattr(g, attr).append(ref)
            elif key in _GRAPH_SCALARS:
                if key in seen:
                    raise self.error(key_tok, f"duplicate key {key!r}", cls=DuplicateKey)
                seen.add(key)
                setattr(g, key, self.typed(vtok, _GRAPH_SCALARS[key], key))
            else:
                raise self.error(key_tok, f"unknown graph key {key!r}", "graph key")
        return g

    def executor(self, start):
        fields = {}
        while self.peek().kind != "}":
            key_tok = self.expect("ident", "key")
            if key_tok.value not in _EXECUTOR_KEYS:
                raise self.error(key_tok, f"unknown executor key {key_tok.value!r}", "executor key")
            if key_tok.value in fields:
                raise self.error(key_tok, f"duplicate key {key_tok.value!r}", cls=DuplicateKey)
            self.expect(":")
            fields[key_tok.value] = self.typed(self.value(), _EXECUTOR_KEYS[key_tok.value], key_tok.value)
        self.expect("}")
        if "name" not in fields:
            raise self.error(start, "executor needs a name", "name")
        return ExecutorConfig(fields["name"], fields.get("num_workers"))

    def node(self, start):
        scalars = {}
        lists = {k: [] for k in _NODE_LISTS}
        counters = {}
        options = None
        while self.peek().kind != "}":
            if self.peek().kind == "eof":
                raise self.error(self.peek(), "unclosed node block, expected '}'", "}")
            key_tok = self.expect("ident", "key")
            key = key_tok.value
            if key == "options":
                if options is not None:
                    raise self.error(key_tok, "duplicate options block", cls=DuplicateKey)
                self.expect("{")
                options = self.options()
                continue
            self.expect(":")
            vtok = self.value()
            if key == "back_edge":
                if vtok.kind == "bool":
                    if not vtok.value:
                        continue
                    if not lists["input_stream"]:
                        raise self.error(vtok, "back_edge: true needs a preceding input_stream")
                    lists["back_edge"].append(lists["input_stream"][-1].tag)
                else:
                    lists["back_edge"].append(self.typed(vtok, str, key))
            elif key in _REF_LISTS:
                attr, prefix = _REF_LISTS[key]
                n = counters.get(key, 0)
                ref = self.stream_ref(vtok, key, prefix, n)
                counters[key] = n + ref.implicit
                lists[key].append(ref)
            elif key in _NODE_SCALARS:
                if key in scalars:
                    raise self.error(key_tok, f"duplicate key {key!r}", cls=DuplicateKey)
                scalars[key] = self.typed(vtok, _NODE_SCALARS[key], key)
            else:
                raise self.error(key_tok, f"unknown node key {key!r}", "node key")
        self.expect("}")
        if "calculator" not in scalars:
            raise self.error(start, "node needs a calculator", "calculator")
        for key, refs in lists.items():
            if key == "back_edge":
                continue
            tags = [r.tag for r in refs]
            dup = {t for t in tags if tags.count(t) > 1}
            if dup:
                raise self.error(start, f"tag {sorted(dup)[0]} bound twice in {key}", cls=DuplicateKey)
        return NodeConfig(
            calculator=scalars["calculator"],
            name=scalars.get("name"),
            input_streams=lists["input_stream"],
            output_streams=lists["output_stream"],
            input_side_packets=lists["input_side_packet"],
            output_side_packets=lists["output_side_packet"],
            executor=scalars.get("executor"),
            back_edges=lists["back_edge"],
            max_queue_size=scalars.get("max_queue_size"),
            options=options or {},
            line=start.line,
        )

    def options(self):
        opts = {}
        while self.peek().kind != "}":
            if self.peek().kind == "eof":
                raise self.error(self.peek(), "unclosed options block, expected '}'", "}")
            key_tok = self.expect("ident", "option name")
            if key_tok.value in opts:
                raise self.error(key_tok, f"duplicate option {key_tok.value!r}", cls=DuplicateKey)
            self.expect(":")
            opts[key_tok.value] = self.value().value
        self.expect("}")
        return opts


def parse(text: str, source: str | None = None) -> GraphConfig:
    return _Parser(text, source).parse()


def parse_file(path) -> GraphConfig:
    with open(path, encoding="utf-8") as f:
        return parse(f.read(), source=str(path))


# serializer

def _lit(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps(v, ensure_ascii=False)


def serialize(g: GraphConfig) -> str:
    out = []
    if g.type is not None:
        out.append(f"type: {_lit(g.type)}")
    for key in ("input_stream", "output_stream", "input_side_packet"):
        for ref in getattr(g, _REF_LISTS[key][0]):
            out.append(f"{key}: {_lit(str(ref))}")
    for key in ("num_threads", "max_queue_size", "trace_enabled"):
        v = getattr(g, key)
        if v is not None:
            out.append(f"{key}: {_lit(v)}")
    for ex in g.executors:
        out.append("executor {")
        out.append(f"  name: {_lit(ex.name)}")
        if ex.num_workers is not None:
            out.append(f"  num_workers: {_lit(ex.num_workers)}")
        out.append("}")
    for n in g.nodes:
        out.append("node {")
        out.append(f"  calculator: {_lit(n.calculator)}")
        if n.name is not None:
            out.append(f"  name: {_lit(n.name)}")
        for key in ("input_stream", "output_stream", "input_side_packet", "output_side_packet"):
            for ref in getattr(n, _REF_LISTS[key][0]):
                out.append(f"  {key}: {_lit(str(ref))}")
        for be in n.back_edges:
            out.append(f"  back_edge: {_lit(be)}")
        if n.executor is not None:
            out.append(f"  executor: {_lit(n.executor)}")
        if n.max_queue_size is not None:
            out.append(f"  max_queue_size: {_lit(n.max_queue_size)}")
        if n.options:
            out.append("  options {")
            for k, v in n.options.items():
                out.append(f"    {k}: {_lit(v)}")
            out.append("  }")
        out.append("}")
    return "\n".join(out) + "\n"


# subgraphs

class SubgraphRegistry:
    def __init__(self):
        self._graphs: dict[str, GraphConfig] = {}

    def __contains__(self, name):
        return name in self._graphs

    def get(self, name):
        return self._graphs[name]

    def add(self, g: GraphConfig):
        self._graphs[g.type] = g

    def remove(self, name):
        self._graphs.pop(name, None)


subgraphs = SubgraphRegistry()


def register_subgraph(g: GraphConfig, reg: SubgraphRegistry | None = None, calculators=None):
    reg = reg if reg is not None else subgraphs
    calculators = calculators if calculators is not None else default_calculators
    if not g.type:
        raise MissingInterface("a subgraph needs a nonempty type")
    if not g.output_streams:
        raise MissingInterface(f"subgraph {g.type!r} declares no output streams")
    if g.type in reg or g.type in calculators:
        raise DuplicateName(f"{g.type!r} is already registered")
    reg.add(g)


def load_subgraph_dir(directory, reg=None, calculators=None):
    loaded = []
    for fname in sorted(os.listdir(directory)):
        if fname.endswith((".pbtxt", ".graph", ".cfg")):
            g = parse_file(os.path.join(directory, fname))
            if g.type:
                register_subgraph(g, reg, calculators)
                loaded.append(g.type)
    return loaded


def expand_subgraphs(g: GraphConfig, reg: SubgraphRegistry | None = None,
                     calculators=None) -> GraphConfig:
    """Inline every subgraph node; private inner names become ``<path>__<name>``.

    When ``calculators`` is given, a node naming neither a subgraph nor a
    registered calculator raises UnknownSubgraph; otherwise it is left for
    validation to report.
    """
    reg = reg if reg is not None else subgraphs
    nodes = _expand_nodes(g.nodes, reg, prefix="", stack=())
    if calculators is not None:
        for n in nodes:
            if n.calculator not in calculators:
                raise UnknownSubgraph(f"{n.calculator!r} is neither a subgraph nor a calculator")
    return GraphConfig(
        type=g.type,
        input_streams=list(g.input_streams),
        output_streams=list(g.output_streams),
        input_side_packets=list(g.input_side_packets),
        executors=list(g.executors),
        num_threads=g.num_threads,
        max_queue_size=g.max_queue_size,
        trace_enabled=g.trace_enabled,
        nodes=nodes,
        source=g.source,
    )


def _expand_nodes(nodes, reg, prefix, stack):
    out = []
    counts: dict[str, int] = {}
    for node in nodes:
        if node.calculator not in reg:
            out.append(node)
            continue
        sub = reg.get(node.calculator)
        if sub.type in stack:
            raise RecursiveSubgraph(" -> ".join(stack + (sub.type,)))
        counts[sub.type] = counts.get(sub.type, 0) + 1
        instance = node.name or f"{sub.type.lower()}{counts[sub.type]}"
        path = f"{prefix}{instance}"

        mapping: dict[str, str] = {}
        side_mapping: dict[str, str] = {}
        for inner_list, outer_list, target, what in (
            (sub.input_streams, node.input_streams, mapping, "input stream"),
            (sub.output_streams, node.output_streams, mapping, "output stream"),
            (sub.input_side_packets, node.input_side_packets, side_mapping, "input side packet"),
        ):
            outer = {r.tag: r.name for r in outer_list}
            inner_tags = {r.tag for r in inner_list}
            extra = set(outer) - inner_tags
            if extra:
                raise ContractViolation(
                    f"subgraph {sub.type!r} has no {what} tag(s) {sorted(extra)}"
                )
            for r in inner_list:
                if r.tag in outer:
                    target[r.name] = outer[r.tag]

        def rename(ref, table):
            name = table.get(ref.name, f"{path}__{ref.name}")
            return StreamRef(ref.tag, name, ref.implicit)

        inner_nodes = []
        for inner in sub.nodes:
            inner_nodes.append(NodeConfig(
                calculator=inner.calculator,
                # nested subgraph nodes get their path from the recursive call
                name=inner.name if inner.calculator in reg else f"{path}__{inner.name or inner.calculator}",
                input_streams=[rename(r, mapping) for r in inner.input_streams],
                output_streams=[rename(r, mapping) for r in inner.output_streams],
                input_side_packets=[rename(r, side_mapping) for r in inner.input_side_packets],
                output_side_packets=[rename(r, side_mapping) for r in inner.output_side_packets],
                executor=inner.executor or node.executor,
                back_edges=list(inner.back_edges),
                max_queue_size=inner.max_queue_size,
                options=dict(inner.options),
                line=inner.line,
            ))
        out.extend(_expand_nodes(inner_nodes, reg, prefix=f"{path}__", stack=stack + (sub.type,)))
    return out


# validation

@dataclass
class StreamInfo:
    id: int
    name: str
    type_name: str = ANY
    producer: int | None = None          # None: graph input stream
    producer_tag: str | None = None
    consumers: list[tuple[int, str]] = field(default_factory=list)


@dataclass
class NodeInfo:
    index: int
    name: str
    calculator: str
    config: NodeConfig
    contract: CalculatorContract
    inputs: dict[str, str]
    outputs: dict[str, str]
    input_sides: dict[str, str]
    output_sides: dict[str, str]
    back_edges: set[str]
    executor: str
    queue_limit: int
    input_types: dict[str, str] = field(default_factory=dict)
    output_types: dict[str, str] = field(default_factory=dict)
    priority: int = 0

    @property
    def is_source(self):
        return not self.inputs


@dataclass
class ValidatedGraph:
    config: GraphConfig
    nodes: list[NodeInfo]
    streams: dict[str, StreamInfo]
    side_packets: dict[str, int | None]
    graph_inputs: list[str]
    graph_outputs: list[str]
    graph_side_packets: list[str]
    executors: dict[str, int | None]
    max_queue_size: int
    trace_enabled: bool
    warnings: list[str] = field(default_factory=list)

    def node(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def stream_by_id(self, sid):
        for s in self.streams.values():
            if s.id == sid:
                return s
        raise KeyError(sid)

    def priorities(self):
        return {n.name: n.priority for n in self.nodes}


def _node_names(nodes):
    totals: dict[str, int] = {}
    for n in nodes:
        totals[n.calculator] = totals.get(n.calculator, 0) + 1
    seen: dict[str, int] = {}
    names = []
    for n in nodes:
        if n.name:
            names.append(n.name)
            continue
        seen[n.calculator] = seen.get(n.calculator, 0) + 1
        names.append(n.calculator if totals[n.calculator] == 1 else f"{n.calculator}_{seen[n.calculator]}")
    return names


def assign_priorities(num_nodes: int, edges, sources=(), names=None) -> list[int]:
    """Priority = -(longest downstream path); sources share the minimum.

    ``edges`` are (producer, consumer) node indices with back edges removed.
    """
    succ = [set() for _ in range(num_nodes)]
    indeg = [0] * num_nodes
    for u, v in edges:
        if v not in succ[u]:
            succ[u].add(v)
            indeg[v] += 1
    order = []
    ready = [i for i in range(num_nodes) if indeg[i] == 0]
    while ready:
        u = ready.pop(0)
        order.append(u)
        for v in sorted(succ[u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    if len(order) != num_nodes:
        stuck = [i for i in range(num_nodes) if indeg[i] > 0]
        label = [names[i] if names else str(i) for i in stuck]
        raise CycleDetected(f"cycle without back_edge through nodes {label}")
    longest = [0] * num_nodes
    for u in reversed(order):
        if succ[u]:
            longest[u] = 1 + max(longest[v] for v in succ[u])
    prio = [-x for x in longest]
    if sources and prio:
        lowest = min(prio)
        for s in sources:
            prio[s] = lowest
    return prio


def validate(g: GraphConfig, calculators=None, subgraph_reg=None) -> ValidatedGraph:
    calculators = calculators if calculators is not None else default_calculators
    subgraph_reg = subgraph_reg if subgraph_reg is not None else subgraphs
    problems: list[Exception] = []
    warnings: list[str] = []

    names = _node_names(g.nodes)
    executors = {DEFAULT_EXECUTOR: g.num_threads}
    for ex in g.executors:
        if ex.name == DEFAULT_EXECUTOR:
            executors[ex.name] = ex.num_workers or g.num_threads
            continue
        if ex.name in executors:
            problems.append(DuplicateName(f"executor {ex.name!r} defined twice"))
        executors[ex.name] = ex.num_workers
    graph_limit = g.max_queue_size if g.max_queue_size is not None else DEFAULT_MAX_QUEUE_SIZE

    streams: dict[str, StreamInfo] = {}
    side_producers: dict[str, int | None] = {}

    def stream(name):
        if name not in streams:
            streams[name] = StreamInfo(len(streams) + 1, name)
        return streams[name]

    for k, ref in enumerate(g.input_streams):
        stream(ref.name)
        if ref.name in [r.name for r in g.input_streams[:k]]:
            problems.append(MultipleProducers(f"graph input stream {ref.name!r} declared twice"))
    for ref in g.input_side_packets:
        if ref.name in side_producers:
            problems.append(MultipleProducers(f"side packet {ref.name!r} declared twice"))
        side_producers[ref.name] = None

    infos: list[NodeInfo] = []
    for i, (nc, name) in enumerate(zip(g.nodes, names)):
        where = f"node {name!r}" + (f" (line {nc.line})" if nc.line else "")
        shape = NodeShape(
            options=dict(nc.options),
            input_tags=tuple(r.tag for r in nc.input_streams),
            output_tags=tuple(r.tag for r in nc.output_streams),
            input_side_tags=tuple(r.tag for r in nc.input_side_packets),
            output_side_tags=tuple(r.tag for r in nc.output_side_packets),
        )
        contract = None
        if nc.calculator in subgraph_reg:
            problems.append(UnknownCalculator(
                f"{where}: subgraph {nc.calculator!r} must be expanded before validation"))
        else:
            try:
                contract = fill_contract(nc.calculator, shape=shape, reg=calculators)
            except NotRegistered:
                problems.append(UnknownCalculator(f"{where}: unknown calculator {nc.calculator!r}"))
            except InvalidOptions as e:
                problems.append(ContractViolation(f"{where}: invalid options: {e}"))
            except Exception as e:  # contract functions are user code
                problems.append(ContractViolation(f"{where}: contract failed: {e!r}"))
        executor = nc.executor or DEFAULT_EXECUTOR
        if executor not in executors:
            problems.append(UnknownExecutor(f"{where}: unknown executor {executor!r}"))
        back = set()
        in_tags = {r.tag: r.name for r in nc.input_streams}
        for be in nc.back_edges:
            if be in in_tags:
                back.add(be)
            else:
                matches = [t for t, nm in in_tags.items() if nm == be]
                if matches:
                    back.update(matches)
                else:
                    problems.append(ContractViolation(f"{where}: back_edge {be!r} is not an input"))
        info = NodeInfo(
            index=i,
            name=name,
            calculator=nc.calculator,
            config=nc,
            contract=contract if contract is not None else CalculatorContract(),
            inputs=in_tags,
            outputs={r.tag: r.name for r in nc.output_streams},
            input_sides={r.tag: r.name for r in nc.input_side_packets},
            output_sides={r.tag: r.name for r in nc.output_side_packets},
            back_edges=back,
            executor=executor,
            queue_limit=nc.max_queue_size if nc.max_queue_size is not None else graph_limit,
        )
        infos.append(info)
        if contract is not None:
            _check_arity(info, contract, where, problems)

        for tag, sname in info.outputs.items():
            s = stream(sname)
            if s.producer is not None or sname in [r.name for r in g.input_streams]:
                prev = "a graph input" if s.producer is None else f"node {infos[s.producer].name!r}"
                problems.append(MultipleProducers(
                    f"stream {sname!r} produced by {prev} and {where}"))
            else:
                s.producer, s.producer_tag = i, tag
        for tag, sname in info.output_sides.items():
            if sname in side_producers:
                problems.append(MultipleProducers(f"side packet {sname!r} has more than one producer"))
            else:
                side_producers[sname] = i

    graph_input_names = {r.name for r in g.input_streams}
    for info in infos:
        where = f"node {info.name!r}"
        for tag, sname in info.inputs.items():
            s = stream(sname)
            s.consumers.append((info.index, tag))
            if s.producer is None and sname not in graph_input_names:
                problems.append(UnproducedInput(f"{where}: input {tag}:{sname} has no producer"))
        for tag, sname in info.input_sides.items():
            if sname not in side_producers:
                problems.append(UnproducedInput(f"{where}: side packet {tag}:{sname} has no producer"))
    for ref in g.output_streams:
        s = streams.get(ref.name)
        if s is None or (s.producer is None and ref.name not in graph_input_names):
            problems.append(UnproducedInput(f"graph output stream {ref.name!r} has no producer"))

    _resolve_types(infos, streams, graph_input_names, problems)

    output_names = {r.name for r in g.output_streams}
    for s in streams.values():
        if not s.consumers and s.name not in output_names:
            warnings.append(f"stream {s.name!r} has no consumers")
    for w in warnings:
        log.warning(w)

    edges = []
    for s in streams.values():
        if s.producer is None:
            continue
        for (c, tag) in s.consumers:
            if tag not in infos[c].back_edges:
                edges.append((s.producer, c))
    try:
        prios = assign_priorities(len(infos), edges, [n.index for n in infos if n.is_source], names)
        for n, p in zip(infos, prios):
            n.priority = p
    except CycleDetected as e:
        problems.append(e)

    if problems:
        raise GraphValidationError(problems)
    return ValidatedGraph(
        config=g,
        nodes=infos,
        streams=streams,
        side_packets=side_producers,
        graph_inputs=[r.name for r in g.input_streams],
        graph_outputs=[r.name for r in g.output_streams],
        graph_side_packets=[r.name for r in g.input_side_packets],
        executors=executors,
        max_queue_size=graph_limit,
        trace_enabled=bool(g.trace_enabled),
        warnings=warnings,
    )


def _check_arity(info, contract, where, problems):
    for tag in info.inputs:
        if tag not in contract.inputs:
            problems.append(ContractViolation(f"{where}: contract has no input tag {tag}"))
    for tag, spec in contract.inputs.items():
        if tag not in info.inputs and not spec.optional:
            problems.append(ContractViolation(f"{where}: required input {tag} not connected"))
    for tag in info.outputs:
        if tag not in contract.outputs:
            problems.append(ContractViolation(f"{where}: contract has no output tag {tag}"))
    for tag in info.input_sides:
        if tag not in contract.input_side_packets:
            problems.append(ContractViolation(f"{where}: contract has no input side packet {tag}"))
    for tag in contract.input_side_packets:
        if tag not in info.input_sides:
            problems.append(ContractViolation(f"{where}: required side packet {tag} not connected"))
    for tag in info.output_sides:
        if tag not in contract.output_side_packets:
            problems.append(ContractViolation(f"{where}: contract has no output side packet {tag}"))


def _resolve_types(infos, streams, graph_input_names, problems):
    # graph inputs take the common concrete type their consumers declare
    for sname in graph_input_names:
        s = streams[sname]
        wanted = {infos[c].contract.inputs[t].type_name for c, t in s.consumers
                  if t in infos[c].contract.inputs} - {ANY}
        s.type_name = wanted.pop() if len(wanted) == 1 else ANY
    resolved = {n for n in graph_input_names}
    pending = [(n, tag) for n in infos for tag in n.outputs]
    progress = True
    while pending and progress:
        progress = False
        rest = []
        for n, tag in pending:
            decl = n.contract.outputs.get(tag, ANY)
            if isinstance(decl, SameAs):
                src = n.inputs.get(decl.tag)
                if src is None:
                    t = ANY
                elif src in resolved:
                    t = streams[src].type_name
                else:
                    rest.append((n, tag))
                    continue
            else:
                t = decl
            streams[n.outputs[tag]].type_name = t
            n.output_types[tag] = t
            resolved.add(n.outputs[tag])
            progress = True
        pending = rest
    for n, tag in pending:
        streams[n.outputs[tag]].type_name = ANY
        n.output_types[tag] = ANY
    for n in infos:
        for tag, sname in n.inputs.items():
            s = streams[sname]
            want = n.contract.inputs[tag].type_name if tag in n.contract.inputs else ANY
            n.input_types[tag] = s.type_name if want == ANY else want
            if not types_compatible(s.type_name, want):
                src = "graph input" if s.producer is None else f"{infos[s.producer].name}.{s.producer_tag}"
                problems.append(TypeMismatch(
                    f"stream {sname!r} from {src} carries {s.type_name!r} but "
                    f"{n.name}.{tag} expects {want!r}"))


def load_graph(text_or_config, calculators=None, subgraph_reg=None, source=None) -> ValidatedGraph:
    """Parse (if needed), expand subgraphs and validate."""
    g = parse(text_or_config, source) if isinstance(text_or_config, str) else text_or_config
    g = expand_subgraphs(g, subgraph_reg)
    return validate(g, calculators, subgraph_reg)
