"""Calculator contracts, lifecycle, per-run context and the name registry."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

from .core import ANY, DONE, Packet, make_packet, with_timestamp
from .errors import DuplicateName, InvalidOptions, NotRegistered


@dataclass(frozen=True)
class SameAs:
    """Output type resolved from the type connected to an input tag."""

    tag: str


@dataclass(frozen=True)
class InputSpec:
    type_name: str = ANY
    optional: bool = False


@dataclass(frozen=True)
class InputPolicy:
    kind: str = "default"
    groups: tuple[frozenset[str], ...] = ()

    @classmethod
    def default(cls):
        return cls("default")

    @classmethod
    def immediate(cls):
        return cls("immediate")

    @classmethod
    def grouped(cls, *groups):
        return cls("grouped", tuple(frozenset(g) for g in groups))

    @classmethod
    def parse(cls, text: str):
        text = text.strip().lower()
        if text in ("default", "immediate"):
            return cls(text)
        raise InvalidOptions(f"unknown input policy {text!r}")


@dataclass
class CalculatorContract:
    inputs: dict[str, InputSpec] = field(default_factory=dict)
    outputs: dict[str, Any] = field(default_factory=dict)
    input_side_packets: dict[str, str] = field(default_factory=dict)
    output_side_packets: dict[str, str] = field(default_factory=dict)
    input_policy: InputPolicy = field(default_factory=InputPolicy.default)
    timestamp_offset_zero: bool = False

    def __post_init__(self):
        self.inputs = {
            tag: spec if isinstance(spec, InputSpec) else InputSpec(spec)
            for tag, spec in self.inputs.items()
        }
        if self.input_policy.kind == "grouped":
            seen: list[str] = []
            for g in self.input_policy.groups:
                seen.extend(g)
            if sorted(seen) != sorted(self.inputs):
                raise InvalidOptions(
                    f"grouped policy {sorted(seen)} does not partition inputs {sorted(self.inputs)}"
                )


@dataclass(frozen=True)
class NodeShape:
    """What a contract function may inspect about the node being validated."""

    options: dict = field(default_factory=dict)
    input_tags: tuple[str, ...] = ()
    output_tags: tuple[str, ...] = ()
    input_side_tags: tuple[str, ...] = ()
    output_side_tags: tuple[str, ...] = ()


@dataclass
class InputSet:
    timestamp: int | None
    entries: dict[str, Packet | None]

    def __getitem__(self, tag):
        return self.entries.get(tag)

    def present(self):
        return [t for t, p in self.entries.items() if p is not None]

    def __repr__(self):
        inside = ", ".join(self.present())
        return f"InputSet({self.timestamp}, {{{inside}}})"


class Calculator:
    """Base class for calculators.

    Subclasses override ``get_contract`` (a classmethod, so graphs validate
    without building instances) and any of ``open``/``process``/``close``.
    """

    @classmethod
    def get_contract(cls, shape: NodeShape) -> CalculatorContract:
        raise NotImplementedError

    def open(self, ctx: CalculatorContext) -> None:
        pass

    def process(self, ctx: CalculatorContext) -> None:
        pass

    def close(self, ctx: CalculatorContext) -> None:
        pass


class CalculatorContext:
    """Per-node view handed to every lifecycle call.

    The backend is the scheduler's node runtime; a standalone backend is
    enough for unit tests of individual calculators.
    """

    def __init__(self, backend, options=None, side_packets=None, contract=None):
        self._backend = backend
        self.options = dict(options or {})
        self._side = dict(side_packets or {})
        self.contract = contract
        self.inputs: InputSet | None = None
        self.closing = False

    # inputs
    @property
    def input_timestamp(self) -> int | None:
        return self.inputs.timestamp if self.inputs is not None else None

    def input(self, tag: str) -> Packet | None:
        if self.closing or self.inputs is None:
            return None
        return self.inputs[tag]

    def value(self, tag: str, default=None):
        p = self.input(tag)
        return default if p is None else p.payload

    def input_bound(self, tag: str) -> int:
        return self._backend.input_bound(tag)

    def input_done(self, tag: str) -> bool:
        return self._backend.input_done(tag)

    def drop(self, tag: str) -> None:
        """Record that the current packet on `tag` was discarded on purpose."""
        p = self.input(tag)
        if p is not None:
            self._backend.record_drop(tag, p)

    # side packets
    def side_packet(self, tag: str):
        return self._side[tag]

    def has_side_packet(self, tag: str) -> bool:
        return tag in self._side

    def set_output_side_packet(self, tag: str, value) -> None:
        self._backend.set_output_side_packet(tag, value)

    # outputs
    @property
    def output_tags(self):
        return self._backend.output_tags()

    def emit(self, tag: str, value, ts: int | None = None) -> Packet:
        if ts is None:
            ts = value.timestamp if isinstance(value, Packet) else self.input_timestamp
            if ts is None:
                raise ValueError(f"emit on {tag!r} needs an explicit timestamp here")
        p = with_timestamp(value, ts) if isinstance(value, Packet) else make_packet(value, ts)
        self._backend.emit(tag, p)
        return p

    def set_bound(self, tag: str, bound: int) -> None:
        self._backend.set_bound(tag, bound)

    def output_bound(self, tag: str) -> int:
        return self._backend.output_bound(tag)

    def close_output(self, tag: str) -> None:
        self._backend.set_bound(tag, DONE)

    def close_all_outputs(self) -> None:
        for tag in self.output_tags:
            self._backend.set_bound(tag, DONE)


def run_open(instance: Calculator, ctx: CalculatorContext) -> None:
    ctx.inputs = None
    ctx.closing = False
    instance.open(ctx)


def run_process(instance: Calculator, ctx: CalculatorContext, inputs: InputSet) -> None:
    ctx.inputs = inputs
    try:
        instance.process(ctx)
    finally:
        ctx.inputs = None


def run_close(instance: Calculator, ctx: CalculatorContext) -> None:
    ctx.inputs = None
    ctx.closing = True
    instance.close(ctx)


class CalculatorRegistry:
    def __init__(self):
        self._factories: dict[str, Callable] = {}

    def register(self, name: str, factory=None):
        """Register a factory; usable as a decorator when factory is omitted."""
        if factory is None:
            return lambda f: self.register(name, f) or f
        if not name:
            raise ValueError("calculator name must be nonempty")
        if name in self._factories:
            raise DuplicateName(f"calculator {name!r} already registered")
        if not hasattr(factory, "get_contract"):
            raise TypeError(f"{factory!r} has no get_contract")
        self._factories[name] = factory

    def lookup(self, name: str):
        try:
            return self._factories[name]
        except KeyError:
            raise NotRegistered(f"no calculator named {name!r}") from None

    def __contains__(self, name):
        return name in self._factories

    def names(self):
        return sorted(self._factories)

    def unregister(self, name: str) -> None:
        self._factories.pop(name, None)


registry = CalculatorRegistry()
register = registry.register


def fill_contract(name: str, node_options=None, shape: NodeShape | None = None, reg=None):
    reg = reg or registry
    factory = reg.lookup(name)
    if shape is None:
        shape = NodeShape(options=dict(node_options or {}))
    elif node_options is not None:
        shape = NodeShape(dict(node_options), shape.input_tags, shape.output_tags,
                          shape.input_side_tags, shape.output_side_tags)
    contract = factory.get_contract(shape)
    policy = shape.options.get("input_policy")
    if policy is not None:
        contract.input_policy = InputPolicy.parse(str(policy))
    return contract


def option(shape_or_ctx, key, default=None, kind=None, minimum=None):
    """Read a node option with light validation; raises InvalidOptions."""
    opts = shape_or_ctx.options
    value = opts.get(key, default)
    if kind is not None and value is not None:
        try:
            if kind is int and (isinstance(value, bool) or float(value) != int(value)):
                raise ValueError
            value = kind(value)
        except (TypeError, ValueError):
            raise InvalidOptions(f"option {key!r}={value!r} is not {kind.__name__}") from None
    if minimum is not None and value is not None and value < minimum:
        raise InvalidOptions(f"option {key!r}={value!r} must be >= {minimum}")
    return value
