"""Reusable calculators: routing, flow control, synthetic vision stand-ins, sources and sinks."""
from __future__ import annotations

import math
import random
import threading
import time
from collections import deque
from dataclasses import dataclass

from .calculator import (
    Calculator,
    CalculatorContract,
    InputPolicy,
    InputSpec,
    SameAs,
    option,
    register,
)
from .core import (
    DONE,
    PAYLOAD_TYPES,
    Detection,
    Detections,
    FrozenDict,
    PayloadType,
    payload_literal,
    register_payload_type,
)
from .errors import CollidingInputs, InvalidOptions

DEFAULT_DRIFT = (0.004, 0.002)
BOX_SIZE = 0.1
DETECTION_SCORE = 0.9
IOU_THRESHOLD = 0.5


# synthetic frames

@dataclass(frozen=True)
class SyntheticFrame:
    """Stand-in for a camera frame: object positions drift linearly with the index."""

    index: int
    seed: int
    positions: tuple[tuple[float, float], ...]

    def to_json(self):
        return {"index": self.index, "seed": self.seed, "positions": [list(p) for p in self.positions]}

    @classmethod
    def from_json(cls, value):
        return cls(int(value["index"]), int(value["seed"]),
                   tuple((float(x), float(y)) for x, y in value["positions"]))


def make_frame(index: int, seed: int = 0, objects: int = 2, drift=DEFAULT_DRIFT) -> SyntheticFrame:
    rng = random.Random(seed)
    starts = [(rng.uniform(0.15, 0.35), rng.uniform(0.2, 0.8)) for _ in range(objects)]
    positions = tuple((x + drift[0] * index, y + drift[1] * index) for x, y in starts)
    return SyntheticFrame(index, seed, positions)


if "frame" not in PAYLOAD_TYPES:
    register_payload_type(PayloadType(
        "frame", lambda v: isinstance(v, SyntheticFrame), SyntheticFrame.to_json, SyntheticFrame.from_json))


def _sleep(ms):
    if ms and ms > 0:
        time.sleep(ms / 1000.0)


def _paired(shape):
    """Positional IN/OUT pairing for pass-through style nodes."""
    ins = list(shape.input_tags) or ["IN"]
    outs = list(shape.output_tags) or ["OUT"]
    if len(ins) != len(outs):
        raise InvalidOptions(f"need as many outputs as inputs, got {len(ins)} and {len(outs)}")
    return dict(zip(ins, outs))


# routing

@register("PassThroughCalculator")
class PassThrough(Calculator):
    @classmethod
    def get_contract(cls, shape):
        option(shape, "sleep_ms", 0, float, 0)
        pairs = _paired(shape)
        return CalculatorContract(
            inputs={i: InputSpec() for i in pairs},
            outputs={o: SameAs(i) for i, o in pairs.items()},
            timestamp_offset_zero=True,
        )

    def open(self, ctx):
        self.pairs = list(zip(ctx.contract.inputs, ctx.contract.outputs))
        self.sleep_ms = option(ctx, "sleep_ms", 0, float)

    def process(self, ctx):
        _sleep(self.sleep_ms)
        for i, o in self.pairs:
            p = ctx.input(i)
            if p is not None:
                ctx.emit(o, p)


@register("RoundRobinDemuxCalculator")
class RoundRobinDemux(Calculator):
    @classmethod
    def get_contract(cls, shape):
        n = option(shape, "outputs", len(shape.output_tags) or 1, int, 1)
        return CalculatorContract(
            inputs={"IN": InputSpec()},
            outputs={f"OUT{k}": SameAs("IN") for k in range(n)},
            timestamp_offset_zero=True,
        )

    def open(self, ctx):
        self.tags = list(ctx.contract.outputs)
        self.connected = set(ctx.output_tags)
        self.k = 0

    def process(self, ctx):
        tag = self.tags[self.k % len(self.tags)]
        self.k += 1
        if tag in self.connected:
            ctx.emit(tag, ctx.input("IN"))


@register("MuxCalculator")
class Mux(Calculator):
    @classmethod
    def get_contract(cls, shape):
        tags = list(shape.input_tags) or ["IN0"]
        return CalculatorContract(
            inputs={t: InputSpec() for t in tags},
            outputs={"OUT": SameAs(tags[0])},
            timestamp_offset_zero=True,
        )

    def process(self, ctx):
        present = ctx.inputs.present()
        if len(present) > 1:
            raise CollidingInputs(f"inputs {present} all carry timestamp {ctx.input_timestamp}")
        ctx.emit("OUT", ctx.input(present[0]))


@register("FrameSelectorCalculator")
class FrameSelector(Calculator):
    @classmethod
    def get_contract(cls, shape):
        option(shape, "min_period", 1, int, 1)
        return CalculatorContract(inputs={"IN": InputSpec()}, outputs={"OUT": SameAs("IN")},
                                  timestamp_offset_zero=True)

    def open(self, ctx):
        self.min_period = option(ctx, "min_period", 1, int, 1)
        self.last = None

    def process(self, ctx):
        t = ctx.input_timestamp
        if self.last is None or t >= self.last + self.min_period:
            self.last = t
            ctx.emit("OUT", ctx.input("IN"))
        else:
            ctx.drop("IN")


@register("FlowLimiterCalculator")
class FlowLimiter(Calculator):
    """Caps the number of admitted timestamps not yet acknowledged on FINISHED."""

    @classmethod
    def get_contract(cls, shape):
        option(shape, "max_in_flight", 1, int, 1)
        return CalculatorContract(
            inputs={"IN": InputSpec(), "FINISHED": InputSpec(optional=True)},
            outputs={"OUT": SameAs("IN")},
            input_policy=InputPolicy.immediate(),
            timestamp_offset_zero=True,
        )

    def open(self, ctx):
        self.max_in_flight = option(ctx, "max_in_flight", 1, int, 1)
        self.in_flight = 0
        self.admitted = 0
        self.dropped = 0

    def process(self, ctx):
        if ctx.input("FINISHED") is not None:
            self.in_flight = max(0, self.in_flight - 1)
        p = ctx.input("IN")
        if p is None:
            return
        if self.in_flight < self.max_in_flight:
            self.in_flight += 1
            self.admitted += 1
            ctx.emit("OUT", p)
        else:
            self.dropped += 1
            ctx.drop("IN")


# vision stand-ins

def _clip(v, lo=0.0, hi=1.0):
    return min(max(v, lo), hi)


def frame_detections(frame: SyntheticFrame, jitter: float = 0.0, seed: int = 0) -> Detections:
    """Ground-truth boxes of a frame, optionally perturbed by seed-derived noise."""
    rng = random.Random(hash((seed, frame.seed, frame.index))) if jitter else None
    out = []
    for k, (x, y) in enumerate(frame.positions):
        if rng is not None:
            x += rng.uniform(-jitter, jitter)
            y += rng.uniform(-jitter, jitter)
        bx = _clip(x - BOX_SIZE / 2, 0.0, 1.0 - BOX_SIZE)
        by = _clip(y - BOX_SIZE / 2, 0.0, 1.0 - BOX_SIZE)
        out.append(Detection((bx, by, BOX_SIZE, BOX_SIZE), f"obj{k}", DETECTION_SCORE))
    return Detections(out)


@register("MockDetectorCalculator")
class MockDetector(Calculator):
    @classmethod
    def get_contract(cls, shape):
        option(shape, "sleep_ms", 0, float, 0)
        return CalculatorContract(
            inputs={"FRAME": InputSpec("frame")},
            outputs={"DETECTIONS": "detections"},
            input_side_packets={"MODEL": "string"},
            timestamp_offset_zero=True,
        )

    def open(self, ctx):
        self.model = ctx.side_packet("MODEL")
        self.sleep_ms = option(ctx, "sleep_ms", 0, float, 0)
        self.jitter = option(ctx, "jitter", 0.0, float, 0)
        self.seed = option(ctx, "seed", 0, int)

    def process(self, ctx):
        _sleep(self.sleep_ms)
        ctx.emit("DETECTIONS", frame_detections(ctx.value("FRAME"), self.jitter, self.seed))


def shift(dets: Detections, dx: float, dy: float) -> Detections:
    return Detections(
        Detection((d.box[0] + dx, d.box[1] + dy, d.box[2], d.box[3]), d.label, d.score) for d in dets
    )


@register("MockTrackerCalculator")
class MockTracker(Calculator):
    """Advances the last merged detections by the known per-frame drift.

    With ``sync_state`` (the default) frame k+1 is only tracked after the
    merged state for frame k has arrived on STATE, which makes tracked output
    independent of thread timing.  Set it false for free-running behavior.
    """

    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(
            inputs={"FRAME": InputSpec("frame"), "STATE": InputSpec("detections", optional=True)},
            outputs={"TRACKED": "detections"},
            input_policy=InputPolicy.immediate(),
        )

    def open(self, ctx):
        self.dx = option(ctx, "drift_x", DEFAULT_DRIFT[0], float)
        self.dy = option(ctx, "drift_y", DEFAULT_DRIFT[1], float)
        self.sync = bool(option(ctx, "sync_state", True))
        self.targets = Detections()
        self.state_index = None
        self.state_ts = None
        self.index_at: dict[int, int] = {}
        self.pending: deque = deque()
        self.last_emitted = None

    def process(self, ctx):
        st = ctx.input("STATE")
        if st is not None:
            self.targets = st.payload
            self.state_ts = st.timestamp
            self.state_index = self.index_at.get(st.timestamp, self.state_index)
            for ts in [t for t in self.index_at if t <= st.timestamp]:
                del self.index_at[ts]
        fr = ctx.input("FRAME")
        if fr is not None:
            self.pending.append(fr)
        while self.pending and self._state_ready(ctx):
            self._track(ctx, self.pending.popleft())
        if not self.pending and ctx.input_done("FRAME") and ctx.output_bound("TRACKED") != DONE:
            ctx.close_output("TRACKED")

    def _state_ready(self, ctx):
        if not self.sync or self.last_emitted is None:
            return True
        if self.state_ts is not None and self.state_ts >= self.last_emitted:
            return True
        try:
            return ctx.input_done("STATE")
        except KeyError:  # STATE not connected
            return True

    def _track(self, ctx, p):
        frame = p.payload
        self.index_at[p.timestamp] = frame.index
        if self.state_index is None:
            out = Detections()
        else:
            steps = frame.index - self.state_index
            out = shift(self.targets, self.dx * steps, self.dy * steps)
        ctx.emit("TRACKED", out, p.timestamp)
        self.last_emitted = p.timestamp

    def close(self, ctx):
        while self.pending:
            self._track(ctx, self.pending.popleft())


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def merge_detections(*groups, threshold: float = IOU_THRESHOLD) -> Detections:
    """Union with same-label dedup; the lower-scoring box of an overlapping pair goes."""
    candidates = sorted((d for g in groups for d in g), key=lambda d: -d.score)
    kept: list[Detection] = []
    for d in candidates:
        if all(k.label != d.label or iou(k.box, d.box) <= threshold for k in kept):
            kept.append(d)
    return Detections(kept)


@register("DetectionMergerCalculator")
class DetectionMerger(Calculator):
    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(
            inputs={"NEW": InputSpec("detections", optional=True),
                    "TRACKED": InputSpec("detections", optional=True)},
            outputs={"MERGED": "detections"},
            timestamp_offset_zero=True,
        )

    def process(self, ctx):
        ctx.emit("MERGED", merge_detections(ctx.value("NEW", ()), ctx.value("TRACKED", ())))


def landmark_values(index: int) -> tuple[float, ...]:
    return (math.sin(0.15 * index), 0.5 * math.cos(0.05 * index), 0.01 * index * index)


def mask_values(index: int) -> tuple[float, ...]:
    return (math.exp(-0.02 * index), math.sin(0.3 * index) ** 2)


class _FrameFeature(Calculator):
    feature = staticmethod(landmark_values)

    @classmethod
    def get_contract(cls, shape):
        option(shape, "sleep_ms", 0, float, 0)
        return CalculatorContract(inputs={"FRAME": InputSpec("frame")}, outputs={"OUT": "floats"},
                                  timestamp_offset_zero=True)

    def open(self, ctx):
        self.sleep_ms = option(ctx, "sleep_ms", 0, float, 0)

    def process(self, ctx):
        _sleep(self.sleep_ms)
        ctx.emit("OUT", self.feature(ctx.value("FRAME").index))


@register("MockLandmarkCalculator")
class MockLandmark(_FrameFeature):
    feature = staticmethod(landmark_values)


@register("MockSegmenterCalculator")
class MockSegmenter(_FrameFeature):
    feature = staticmethod(mask_values)


def lerp(t, t0, v0, t1, v1):
    if t == t0 or t1 == t0:
        return v0
    if t == t1:
        return v1
    w = (t - t0) / (t1 - t0)
    if isinstance(v0, tuple):
        return tuple(_lerp1(a, b, w) for a, b in zip(v0, v1))
    return _lerp1(v0, v1, w)


def _lerp1(a, b, w):
    v = a + (b - a) * w
    return min(max(v, min(a, b)), max(a, b))


@register("InterpolatorCalculator")
class Interpolator(Calculator):
    """Resamples SPARSE onto every CLOCK timestamp; holds the nearest sample at the edges."""

    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(
            inputs={"SPARSE": InputSpec(), "CLOCK": InputSpec()},
            outputs={"DENSE": SameAs("SPARSE")},
            input_policy=InputPolicy.grouped({"SPARSE"}, {"CLOCK"}),
        )

    def open(self, ctx):
        self.samples: deque = deque()
        self.pending: deque = deque()

    def process(self, ctx):
        s = ctx.input("SPARSE")
        if s is not None:
            self.samples.append((s.timestamp, s.payload))
        c = ctx.input("CLOCK")
        if c is not None:
            self.pending.append(c.timestamp)
        self._flush(ctx, ctx.input_done("SPARSE"))

    def close(self, ctx):
        self._flush(ctx, True)

    def _flush(self, ctx, sparse_done):
        while self.pending:
            t = self.pending[0]
            v = self._value_at(t, sparse_done)
            if v is None:
                if sparse_done:
                    self.pending.popleft()  # no samples at all: nothing to interpolate
                    continue
                return
            ctx.emit("DENSE", v, t)
            self.pending.popleft()
            # samples before the last one at or below t can no longer bracket anything
            while len(self.samples) >= 2 and self.samples[1][0] <= t:
                self.samples.popleft()

    def _value_at(self, t, sparse_done):
        if not self.samples:
            return None
        lo = hi = None
        for st, sv in self.samples:
            if st <= t:
                lo = (st, sv)
            if st >= t:
                hi = (st, sv)
                break
        if lo is None:
            return hi[1]
        if hi is None:
            return lo[1] if sparse_done else None
        return lerp(t, lo[0], lo[1], hi[0], hi[1])


@register("AnnotationOverlayCalculator")
class AnnotationOverlay(Calculator):
    """Joins FRAME with every other input at the same timestamp."""

    @classmethod
    def get_contract(cls, shape):
        tags = [t for t in shape.input_tags if t != "FRAME"]
        return CalculatorContract(
            inputs={"FRAME": InputSpec("frame"), **{t: InputSpec() for t in tags}},
            outputs={"OUT": "any"},
            timestamp_offset_zero=True,
        )

    def process(self, ctx):
        frame = ctx.value("FRAME")
        if frame is None:
            return
        out = {"frame": frame.index}
        for tag in ctx.inputs.entries:
            if tag == "FRAME":
                continue
            p = ctx.input(tag)
            if p is None:
                raise ValueError(f"{tag} missing at timestamp {ctx.input_timestamp}")
            out[tag.lower()] = p.payload
        ctx.emit("OUT", FrozenDict(out))


# sources, sinks, test utilities

_PAYLOAD_KINDS = {"int", "float", "string", "floats", "frame"}


@register("ScriptedSourceCalculator")
class ScriptedSource(Calculator):
    """Emits ``count`` packets at 0, period, 2*period, ..., then closes."""

    @classmethod
    def get_contract(cls, shape):
        option(shape, "count", 0, int, 0)
        option(shape, "period", 1, int, 1)
        kind = option(shape, "payload", "int", str)
        if kind not in _PAYLOAD_KINDS:
            raise InvalidOptions(f"payload kind {kind!r} not one of {sorted(_PAYLOAD_KINDS)}")
        return CalculatorContract(outputs={"OUT": kind})

    def open(self, ctx):
        self.count = option(ctx, "count", 0, int, 0)
        self.period = option(ctx, "period", 1, int, 1)
        self.start = option(ctx, "start", 0, int)
        self.kind = option(ctx, "payload", "int", str)
        self.seed = option(ctx, "seed", 0, int)
        self.sleep_ms = option(ctx, "sleep_ms", 0, float, 0)
        self.objects = option(ctx, "objects", 2, int, 0)
        self.drift = (option(ctx, "drift_x", DEFAULT_DRIFT[0], float),
                      option(ctx, "drift_y", DEFAULT_DRIFT[1], float))
        self.rng = random.Random(self.seed)
        self.k = 0
        if self.count == 0:
            ctx.close_all_outputs()

    def _payload(self, k):
        if self.kind == "int":
            return k
        if self.kind == "float":
            return self.rng.random()
        if self.kind == "string":
            return f"item{k}"
        if self.kind == "floats":
            return tuple(self.rng.random() for _ in range(3))
        return make_frame(k, self.seed, self.objects, self.drift)

    def process(self, ctx):
        _sleep(self.sleep_ms)
        ctx.emit("OUT", self._payload(self.k), self.start + self.k * self.period)
        self.k += 1
        if self.k >= self.count:
            ctx.close_all_outputs()


_memory_sinks: dict[str, list[str]] = {}
_memory_lock = threading.Lock()


def sink_lines(handle: str) -> list[str]:
    """Lines recorded by RecordingSink nodes writing to the in-memory ``handle``."""
    with _memory_lock:
        return list(_memory_sinks.get(handle, ()))


def clear_sink(handle: str) -> None:
    with _memory_lock:
        _memory_sinks.pop(handle, None)


def record_line(ts: int, payload) -> str:
    return f"ts={ts} {payload_literal(payload)}"


@register("RecordingSinkCalculator")
class RecordingSink(Calculator):
    """Writes "ts=<t> <literal>" per packet to ``path``, flushed at Close.

    Without a path, lines go to the in-memory list named by ``handle``
    (see ``sink_lines``) or to a HANDLE side packet with ``append``/``write``.
    """

    @classmethod
    def get_contract(cls, shape):
        sides = {"HANDLE": "any"} if "HANDLE" in shape.input_side_tags else {}
        return CalculatorContract(inputs={"IN": InputSpec()}, input_side_packets=sides)

    def open(self, ctx):
        self.lines: list[str] = []
        self.path = option(ctx, "path", None, str)
        self.handle = option(ctx, "handle", None, str)
        self.target = ctx.side_packet("HANDLE") if ctx.has_side_packet("HANDLE") else None
        self.file = open(self.path, "w", encoding="utf-8") if self.path else None
        if self.handle is not None:
            with _memory_lock:
                _memory_sinks[self.handle] = []

    def process(self, ctx):
        p = ctx.input("IN")
        self.lines.append(record_line(p.timestamp, p.payload))

    def close(self, ctx):
        if self.file is not None:
            with self.file:
                self.file.writelines(line + "\n" for line in self.lines)
        if self.handle is not None:
            with _memory_lock:
                _memory_sinks[self.handle] = list(self.lines)
        if self.target is not None:
            for line in self.lines:
                if hasattr(self.target, "append"):
                    self.target.append(line)
                else:
                    self.target.write(line + "\n")


@register("PairwiseDelayCalculator")
class PairwiseDelay(Calculator):
    """Re-emits each packet only once the next one arrives; flushes the last at Close."""

    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(inputs={"IN": InputSpec()}, outputs={"OUT": SameAs("IN")})

    def open(self, ctx):
        self.held = None

    def process(self, ctx):
        if self.held is not None:
            ctx.emit("OUT", self.held)
        self.held = ctx.input("IN")

    def close(self, ctx):
        if self.held is not None:
            ctx.emit("OUT", self.held)


@register("FailingCalculator")
class Failing(Calculator):
    """Raises in the lifecycle phase named by ``fail_in`` once ``after`` packets were seen."""

    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(inputs={t: InputSpec() for t in shape.input_tags},
                                  outputs={t: "any" for t in shape.output_tags})

    def open(self, ctx):
        self.where = option(ctx, "fail_in", "process", str)
        self.after = option(ctx, "after", 0, int, 0)
        self.seen = 0
        if self.where == "open":
            raise RuntimeError("failing on purpose in open")

    def process(self, ctx):
        self.seen += 1
        if self.where == "process" and self.seen > self.after:
            raise RuntimeError(f"failing on purpose at timestamp {ctx.input_timestamp}")

    def close(self, ctx):
        if self.where == "close":
            raise RuntimeError("failing on purpose in close")

