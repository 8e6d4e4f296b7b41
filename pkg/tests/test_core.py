import pytest
from hypothesis import given, strategies as st

from calcflow.core import (
    DONE, TS_MAX, TS_MIN, UNSET, Detections, InputQueue, OutputPort, check_payload,
    make_packet, payload_literal, queue_settled_front, side_packet, with_timestamp,
)
from calcflow.errors import BoundRegression, NonMonotonicTimestamp, SentinelTimestamp, TypeMismatch


def port_with(n, type_name="any"):
    port = OutputPort("s", type_name, 1)
    qs = [InputQueue(consumer=i, limit=0) for i in range(n)]
    for q in qs:
        port.connect(q)
    return port, qs


def test_sentinels_sit_outside_the_legal_range():
    assert UNSET < TS_MIN < TS_MAX < DONE
    assert TS_MIN == -(2**62) and TS_MAX == 2**62


def test_make_packet_fresh_ids():
    p, q = make_packet(42, 0), make_packet(42, 0)
    assert p.timestamp == 0 and p.payload == 42
    assert p.data_id != q.data_id


@pytest.mark.parametrize("ts", [DONE, UNSET, TS_MAX + 5])
def test_make_packet_rejects_sentinels(ts):
    with pytest.raises(SentinelTimestamp):
        make_packet("x", ts)


def test_make_packet_rejects_non_int():
    with pytest.raises(TypeError):
        make_packet(1, 1.5)
    with pytest.raises(TypeError):
        make_packet(1, True)


def test_copies_share_payload_and_id():
    p = make_packet(7, 10)
    q = with_timestamp(p, 20)
    assert (p.data_id, p.timestamp, q.timestamp) == (q.data_id, 10, 20)
    assert q.payload is p.payload


def test_restamp_backwards_and_identity():
    p = make_packet("v", 5)
    assert with_timestamp(p, 5) is not p and with_timestamp(p, 5) == p
    assert with_timestamp(p, 3).timestamp == 3
    with pytest.raises(SentinelTimestamp):
        with_timestamp(p, DONE)


def test_payload_is_frozen():
    p = make_packet({"a": [1, 2]}, 0)
    assert p.payload["a"] == (1, 2)
    with pytest.raises(TypeError):
        p.payload["b"] = 3
    with pytest.raises(AttributeError):
        p.timestamp = 4


def test_side_packet_has_unset_timestamp():
    assert side_packet("m").timestamp == UNSET


def test_emit_advances_bound_and_fans_out():
    port, qs = port_with(2)
    port.emit(make_packet(1, 10))
    port.emit(make_packet(2, 20))
    assert port.bound == 21
    for q in qs:
        assert [p.timestamp for p in q.packets] == [10, 20] and q.bound == 21


def test_emit_equal_timestamp_rejected():
    port, _ = port_with(1)
    port.emit(make_packet(1, 10))
    with pytest.raises(NonMonotonicTimestamp):
        port.emit(make_packet(1, 10))


def test_emit_without_consumers():
    port, _ = port_with(0)
    port.emit(make_packet(1, 10))
    assert port.bound == 11


def test_emit_type_checked():
    port, _ = port_with(1, "int")
    with pytest.raises(TypeMismatch):
        port.emit(make_packet("nope", 1))
    check_payload("detections", Detections([{"box": [0, 0, 0.1, 0.1], "label": "a", "score": 0.5}]))


def test_set_bound_rules():
    port, (q,) = port_with(1)
    port.emit(make_packet(1, 10))
    assert port.set_bound(30) and q.bound == 30
    assert port.set_bound(30) is False
    with pytest.raises(BoundRegression):
        port.set_bound(5)
    assert port.close() and q.bound == DONE and port.closed


def test_emit_below_raised_bound_rejected():
    port, _ = port_with(1)
    port.set_bound(50)
    with pytest.raises(NonMonotonicTimestamp):
        port.emit(make_packet(1, 49))


def test_settled_front():
    q = InputQueue()
    q.push(make_packet(0, 10))
    assert queue_settled_front(q) == 10
    q2 = InputQueue()
    q2.packets.append(make_packet(0, 30))  # state set directly: push would lift the bound to 31
    q2.bound = 21
    assert queue_settled_front(q2) is None
    q3 = InputQueue()
    q3.advance(DONE)
    assert queue_settled_front(q3) is None and q3.done


def test_literal_is_canonical():
    d = Detections([{"box": [0.1, 0.2, 0.3, 0.4], "label": "cat", "score": 0.9}])
    assert payload_literal(d) == '[{"box":[0.1,0.2,0.3,0.4],"label":"cat","score":0.9}]'
    assert payload_literal({"b": 1, "a": 2}) == '{"a":2,"b":1}'


@given(st.lists(st.integers(-1000, 1000), max_size=40), st.integers(1, 4))
def test_only_strictly_increasing_emits_succeed(seq, fanout):
    port, qs = port_with(fanout)
    accepted = []
    for ts in seq:
        try:
            port.emit(make_packet(ts, ts))
            accepted.append(ts)
        except NonMonotonicTimestamp:
            pass
        assert all(q.bound >= port.bound for q in qs)
    expected, last = [], None
    for ts in seq:
        if last is None or ts > last:
            expected.append(ts)
            last = ts
    assert accepted == expected
    snapshots = [[(p.timestamp, p.data_id) for p in q.packets] for q in qs]
    assert all(s == snapshots[0] for s in snapshots)
    if accepted:
        assert port.bound == accepted[-1] + 1
