"""Packets, timestamps, bounds, input queues and fan-out output ports."""
from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable

from .errors import BoundRegression, NonMonotonicTimestamp, SentinelTimestamp, TypeMismatch

TS_MIN = -(2**62)
TS_MAX = 2**62
UNSET = TS_MIN - 1
DONE = TS_MAX + 1

_data_ids = itertools.count(1)


def is_sentinel(ts: int) -> bool:
    return not (TS_MIN <= ts <= TS_MAX)


def format_ts(ts: int) -> str:
    if ts == DONE:
        return "DONE"
    if ts == UNSET:
        return "UNSET"
    return str(ts)


def _check_ts(ts):
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise TypeError(f"timestamp must be an int, got {type(ts).__name__}")
    if is_sentinel(ts):
        raise SentinelTimestamp(f"packets cannot carry timestamp {format_ts(ts)}")


# payload types

@dataclass(frozen=True, slots=True)
class Detection:
    box: tuple[float, float, float, float]
    label: str
    score: float

    def to_json(self):
        return {"box": list(self.box), "label": self.label, "score": self.score}


class Detections(tuple):
    """Immutable list of Detection records."""

    __slots__ = ()

    def __new__(cls, items=()):
        out = []
        for d in items:
            if isinstance(d, dict):
                d = Detection(tuple(float(v) for v in d["box"]), str(d["label"]), float(d["score"]))
            elif not isinstance(d, Detection):
                raise TypeError(f"not a detection: {d!r}")
            if len(d.box) != 4:
                raise ValueError("detection box needs 4 values")
            out.append(d)
        return super().__new__(cls, out)

    def __repr__(self):
        return f"Detections({list(self)!r})"

    def to_json(self):
        return [d.to_json() for d in self]


@dataclass(frozen=True)
class PayloadType:
    name: str
    check: Callable[[Any], bool]
    to_json: Callable[[Any], Any] = lambda v: v
    from_json: Callable[[Any], Any] = lambda v: v


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_float_vector(v):
    return isinstance(v, tuple) and all(isinstance(x, float) for x in v)


PAYLOAD_TYPES: dict[str, PayloadType] = {}


def register_payload_type(ptype: PayloadType) -> None:
    if ptype.name in PAYLOAD_TYPES:
        raise ValueError(f"payload type {ptype.name!r} already registered")
    PAYLOAD_TYPES[ptype.name] = ptype


ANY = "any"
register_payload_type(PayloadType("int", _is_int, int, int))
register_payload_type(PayloadType("float", lambda v: isinstance(v, float), float, float))
register_payload_type(PayloadType("string", lambda v: isinstance(v, str), str, str))
register_payload_type(
    PayloadType("floats", _is_float_vector, list, lambda v: tuple(float(x) for x in v))
)
register_payload_type(
    PayloadType("detections", lambda v: isinstance(v, Detections), Detections.to_json, Detections)
)


def types_compatible(produced: str, consumed: str) -> bool:
    return produced == ANY or consumed == ANY or produced == consumed


def check_payload(type_name: str, payload) -> None:
    if type_name == ANY:
        return
    ptype = PAYLOAD_TYPES.get(type_name)
    if ptype is not None and not ptype.check(payload):
        raise TypeMismatch(
            f"payload {type(payload).__name__} does not match declared type {type_name!r}"
        )


def type_of(payload) -> str:
    for name, ptype in PAYLOAD_TYPES.items():
        if ptype.check(payload):
            return name
    return ANY


def payload_to_json(payload):
    if hasattr(payload, "to_json"):
        return payload.to_json()
    if isinstance(payload, tuple):
        return [payload_to_json(v) for v in payload]
    if isinstance(payload, dict):
        return {k: payload_to_json(v) for k, v in payload.items()}
    return payload


def payload_from_json(type_name: str, value):
    ptype = PAYLOAD_TYPES.get(type_name)
    if ptype is None or type_name == ANY:
        return _freeze(value)
    return ptype.from_json(value)


def payload_literal(payload) -> str:
    """Canonical one-line text form of a payload, stable across runs."""
    value = payload_to_json(payload)
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


class FrozenDict(dict):
    """dict that refuses mutation; json-serializable as a plain object."""

    def _immutable(self, *args, **kwargs):
        raise TypeError("packet payloads are immutable")

    __setitem__ = __delitem__ = clear = pop = popitem = setdefault = update = _immutable

    def __hash__(self):
        return hash(tuple(sorted(self.items())))


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, dict) and not isinstance(value, FrozenDict):
        return FrozenDict((k, _freeze(v)) for k, v in value.items())
    return value


# packets

@dataclass(frozen=True, slots=True)
class Packet:
    timestamp: int
    payload: Any
    data_id: int

    @property
    def type_name(self) -> str:
        return type_of(self.payload)

    def at(self, ts: int) -> Packet:
        return with_timestamp(self, ts)


def make_packet(payload, ts: int) -> Packet:
    _check_ts(ts)
    return Packet(ts, _freeze(payload), next(_data_ids))


def with_timestamp(p: Packet, ts: int) -> Packet:
    _check_ts(ts)
    return Packet(ts, p.payload, p.data_id)


def side_packet(payload) -> Packet:
    return Packet(UNSET, _freeze(payload), next(_data_ids))


# streams

class InputQueue:
    """Per-consumer FIFO with a timestamp bound."""

    def __init__(self, stream_id=0, consumer=None, tag=None, limit=0, back_edge=False):
        self.packets: deque[Packet] = deque()
        self.bound = TS_MIN + 1 if back_edge else TS_MIN
        self.stream_id = stream_id
        self.consumer = consumer
        self.tag = tag
        self.limit = limit
        self.effective_limit = limit
        self.back_edge = back_edge

    def __len__(self):
        return len(self.packets)

    def __repr__(self):
        ts = [p.timestamp for p in self.packets]
        return f"InputQueue({self.tag or self.stream_id}, {ts}, bound={format_ts(self.bound)})"

    @property
    def done(self) -> bool:
        return self.bound == DONE and not self.packets

    @property
    def saturated(self) -> bool:
        return self.effective_limit > 0 and len(self.packets) >= self.effective_limit

    def push(self, p: Packet) -> None:
        if p.timestamp < self.bound:
            raise NonMonotonicTimestamp(
                f"packet at {p.timestamp} below stream bound {format_ts(self.bound)}"
            )
        self.packets.append(p)
        self.bound = p.timestamp + 1

    def advance(self, bound: int) -> None:
        if bound < self.bound:
            raise BoundRegression(f"bound {format_ts(bound)} < {format_ts(self.bound)}")
        self.bound = bound

    def front(self) -> int | None:
        return self.packets[0].timestamp if self.packets else None

    def pop(self) -> Packet:
        return self.packets.popleft()


def queue_settled_front(q: InputQueue) -> int | None:
    t = q.front()
    if t is not None and t < q.bound:
        return t
    return None


class OutputPort:
    """Producer side of a stream; fans out each packet to every connected queue."""

    def __init__(self, name: str, type_name: str = ANY, stream_id: int = 0):
        self.name = name
        self.type_name = type_name
        self.stream_id = stream_id
        self.queues: list[InputQueue] = []
        self.last_ts = UNSET
        self.bound = TS_MIN

    def __repr__(self):
        return f"OutputPort({self.name!r}, bound={format_ts(self.bound)})"

    @property
    def closed(self) -> bool:
        return self.bound == DONE

    def connect(self, q: InputQueue) -> None:
        q.stream_id = self.stream_id
        self.queues.append(q)

    def emit(self, p: Packet) -> None:
        if p.timestamp <= self.last_ts or p.timestamp < self.bound:
            raise NonMonotonicTimestamp(
                f"stream {self.name!r}: timestamp {p.timestamp} not above "
                f"last {format_ts(self.last_ts)} / bound {format_ts(self.bound)}"
            )
        check_payload(self.type_name, p.payload)
        for q in self.queues:
            q.push(p)
        self.last_ts = p.timestamp
        self.bound = p.timestamp + 1

    def set_bound(self, b: int) -> bool:
        """Advance the bound; returns whether it changed."""
        if b < self.bound:
            raise BoundRegression(
                f"stream {self.name!r}: bound {format_ts(b)} < current {format_ts(self.bound)}"
            )
        if b == self.bound:
            return False
        self.bound = b
        for q in self.queues:
            q.advance(b)
        return True

    def close(self) -> bool:
        return self.set_bound(DONE)
