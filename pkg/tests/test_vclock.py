import pytest
from hypothesis import given, strategies as st

from iotchain.vclock import (NotDeliverable, Timestamp, Underflow, UnknownSender, VectorClock,
                             can_validate, concurrent, deliverable, happened_before, is_duplicate,
                             on_receive, on_send, on_validation)
from oracles import ref_deliverable, ref_receive, ref_send

M = [1, 2, 3]  # m1, m2, m3


def v3(values, count_receives=True):
    return VectorClock.from_list(3, M, values, count_receives)


def test_first_send():
    c = VectorClock.create(1, [2, 3])
    assert on_send(c).values() == [1, 0, 0]


def test_send_after_receives():
    c = v3([0, 1, 1])
    ts = on_send(c)
    assert ts.values() == ref_send([0, 1, 1], 2) == [0, 1, 2]
    assert ts.sender == 3


@pytest.mark.parametrize("sender,ts,expected", [
    (1, [1, 2, 0], False),
    (2, [0, 2, 0], True),
    (1, [2, 1, 0], False),
])
def test_deliverable_examples(sender, ts, expected):
    stamp = Timestamp.of(sender, M, ts)
    assert deliverable(v3([0, 1, 1]), stamp) is expected
    assert ref_deliverable([0, 1, 1], ts, sender - 1) is expected


def test_receive_examples():
    c = on_receive(v3([0, 1, 1]), Timestamp.of(2, M, [0, 2, 0]))
    assert c.values() == ref_receive([0, 1, 1], [0, 2, 0], 2) == [0, 2, 2]
    c = on_receive(v3([0, 0, 0]), Timestamp.of(1, M, [1, 0, 0]))
    assert c.values() == [1, 0, 1]
    with pytest.raises(NotDeliverable):
        on_receive(v3([0, 1, 1]), Timestamp.of(1, M, [1, 2, 0]))
    with pytest.raises(UnknownSender):
        deliverable(v3([0, 0, 0]), Timestamp.of(9, [9], [1]))


def test_buffered_message_delivers_after_its_cause():
    c = v3([0, 1, 1])
    ts1, ts2 = Timestamp.of(1, M, [1, 2, 0]), Timestamp.of(2, M, [0, 2, 0])
    assert not deliverable(c, ts1)
    on_receive(c, ts2)
    assert deliverable(c, ts1)
    on_receive(c, ts1)
    assert c.values() == [1, 2, 3]


def test_send_only_rule():
    c = v3([0, 1, 1], count_receives=False)
    on_receive(c, Timestamp.of(2, M, [0, 2, 0]))
    assert c.values() == [0, 2, 1]


def test_validation():
    assert on_validation(v3([2, 1, 1]), {1: 2, 2: 1, 3: 1}).values() == [0, 0, 0]
    assert on_validation(v3([2, 1, 1]), {1: 1}).values() == [1, 1, 1]
    with pytest.raises(Underflow):
        on_validation(v3([2, 1, 1]), {2: 2})
    with pytest.raises(UnknownSender):
        on_validation(v3([2, 1, 1]), {7: 1})
    assert can_validate(v3([2, 1, 1]), {1: 2}) and not can_validate(v3([2, 1, 1]), {3: 2})


def test_validation_keeps_old_timestamps_comparable():
    # m3 has delivered one event from m1, then that event is validated
    c = v3([1, 0, 0])
    on_validation(c, {1: 1})
    assert is_duplicate(c, Timestamp.of(1, M, [1, 0, 0]))
    # the sender rebased too: its next stamp carries the base
    sender = VectorClock.from_list(1, M, [1, 0, 0])
    on_validation(sender, {1: 1})
    ts = on_send(sender)
    assert ts.values() == [1, 0, 0] and deliverable(c, ts)


# -- properties ---------------------------------------------------------------

ops = st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), max_size=30)


@given(ops)
def test_random_exchange_matches_reference(script):
    """Each op is (sender, receiver): send then, if deliverable, receive."""
    clocks = [VectorClock.create(m, M) for m in M]
    ref = [[0, 0, 0] for _ in M]
    for s, r in script:
        ts = on_send(clocks[s])
        ref[s] = ref_send(ref[s], s)
        assert ts.values() == ref[s]
        if r == s:
            continue
        ok = deliverable(clocks[r], ts)
        assert ok == ref_deliverable(ref[r], ref[s], s)
        if ok:
            on_receive(clocks[r], ts)
            ref[r] = ref_receive(ref[r], ref[s], r)
        assert clocks[r].values() == ref[r]


@given(ops)
def test_entries_never_negative_and_monotone(script):
    clocks = [VectorClock.create(m, M, count_receives=False) for m in M]
    for s, r in script:
        before = [c.absolute(k) for c in clocks for k in M]
        ts = on_send(clocks[s])
        if r != s and deliverable(clocks[r], ts):
            on_receive(clocks[r], ts)
        after = [c.absolute(k) for c in clocks for k in M]
        assert all(b <= a for b, a in zip(before, after))
        assert all(v >= 0 for c in clocks for v in c.values())


@given(st.lists(st.integers(0, 2), min_size=2, max_size=12))
def test_happened_before_is_a_strict_order(senders):
    # send-only counting; the textbook rule leaves gaps a peer can never fill
    clocks = [VectorClock.create(m, M, count_receives=False) for m in M]
    stamps = []
    for s in senders:
        ts = on_send(clocks[s])
        stamps.append(ts)
        for r in range(3):  # broadcast with immediate delivery
            if r != s and deliverable(clocks[r], ts):
                on_receive(clocks[r], ts)
    for i, a in enumerate(stamps):
        assert not happened_before(a, a)
        for b in stamps[i + 1:]:
            assert happened_before(a, b)  # immediate broadcast is totally ordered
            assert not happened_before(b, a) and not concurrent(a, b)


def test_concurrent_sends():
    a = on_send(VectorClock.create(1, M))
    b = on_send(VectorClock.create(2, M))
    assert concurrent(a, b)
