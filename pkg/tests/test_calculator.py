import pytest
from hypothesis import given, strategies as st

import calcflow as cf
from calcflow.calculator import (
    Calculator,
    CalculatorContract,
    CalculatorRegistry,
    InputPolicy,
    InputSpec,
    NodeShape,
    SameAs,
    fill_contract,
    option,
)
from calcflow.errors import DuplicateName, InvalidOptions, NotRegistered

from conftest import run_text


class Noop(Calculator):
    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(inputs={"IN": "int"}, outputs={"OUT": "int"})


def test_registry_lookup_and_duplicates():
    reg = CalculatorRegistry()
    reg.register("Noop", Noop)
    assert reg.lookup("Noop") is Noop
    assert "Noop" in reg and reg.names() == ["Noop"]
    with pytest.raises(DuplicateName):
        reg.register("Noop", Noop)
    with pytest.raises(NotRegistered):
        reg.lookup("Missing")
    with pytest.raises(ValueError):
        reg.register("", Noop)
    with pytest.raises(TypeError):
        reg.register("Bad", object)


def test_register_as_decorator():
    reg = CalculatorRegistry()

    @reg.register("Deco")
    class Deco(Noop):
        pass

    assert reg.lookup("Deco") is Deco


def test_contract_normalizes_type_names():
    c = CalculatorContract(inputs={"IN": "int"})
    assert c.inputs["IN"] == InputSpec("int")


def test_grouped_policy_must_partition_inputs():
    with pytest.raises(InvalidOptions):
        CalculatorContract(inputs={"A": InputSpec(), "B": InputSpec()},
                           input_policy=InputPolicy.grouped({"A"}))


def test_passthrough_output_is_same_as_input():
    c = fill_contract("PassThroughCalculator", shape=NodeShape({}, ("IN",), ("OUT",)))
    assert c.outputs == {"OUT": SameAs("IN")}
    assert c.timestamp_offset_zero


def test_flow_limiter_is_immediate():
    c = fill_contract("FlowLimiterCalculator")
    assert c.input_policy.kind == "immediate"
    assert c.inputs["FINISHED"].optional


@given(st.integers(1, 8))
def test_demux_tag_count_follows_option(n):
    c = fill_contract("RoundRobinDemuxCalculator", {"outputs": n})
    assert list(c.outputs) == [f"OUT{k}" for k in range(n)]


def test_input_policy_override_from_options():
    c = fill_contract("PassThroughCalculator", {"input_policy": "immediate"})
    assert c.input_policy.kind == "immediate"
    with pytest.raises(InvalidOptions):
        fill_contract("PassThroughCalculator", {"input_policy": "sometimes"})


@pytest.mark.parametrize("value, kind, minimum, ok", [
    (3, int, 1, True),
    (0, int, 1, False),
    (2.5, int, None, False),
    (True, int, None, False),
    ("x", float, None, False),
    ("1.5", float, 0, True),
])
def test_option_validation(value, kind, minimum, ok):
    shape = NodeShape({"k": value})
    if ok:
        assert option(shape, "k", kind=kind, minimum=minimum) == kind(value)
    else:
        with pytest.raises(InvalidOptions):
            option(shape, "k", kind=kind, minimum=minimum)


def test_invalid_options_fail_validation():
    with pytest.raises(cf.GraphValidationError):
        cf.load_graph('node { calculator: "FlowLimiterCalculator" input_stream: "IN:x" '
                      'output_stream: "OUT:y" options { max_in_flight: 0 } }')


EVENTS = []


@cf.register("LifecycleProbe")
class LifecycleProbe(Calculator):
    @classmethod
    def get_contract(cls, shape):
        return CalculatorContract(inputs={"IN": InputSpec()})

    def open(self, ctx):
        EVENTS.append(("open", ctx.input("IN")))

    def process(self, ctx):
        EVENTS.append(("process", ctx.input_timestamp))

    def close(self, ctx):
        EVENTS.append(("close", ctx.input("IN"), ctx.input_timestamp))


def test_lifecycle_runs_open_process_close_in_order():
    EVENTS.clear()
    r = run_text('input_stream: "in" node { calculator: "LifecycleProbe" input_stream: "IN:in" }',
                 inputs={"in": [(1, 1), (2, 2), (5, 5)]})
    assert r.ok, r.message
    assert EVENTS == [("open", None), ("process", 1), ("process", 2), ("process", 5),
                      ("close", None, None)]


def test_emit_keeps_packet_timestamp_and_rejects_missing_time():
    from conftest import Harness
    h = Harness("PairwiseDelayCalculator")
    h.feed(3, IN="a")
    h.feed(7, IN="b")
    h.close()
    assert h.out() == [(3, "a"), (7, "b")]
    with pytest.raises(ValueError):
        h.ctx.emit("OUT", "c")
