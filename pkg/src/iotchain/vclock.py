"""Reduced vector clocks over a miner's associated peers.

A clock only carries entries for its owner and the miners that share an
action-chain with it. Entries are counts relative to the last validated
block: validation subtracts the validated events from each entry. The
cumulative amount subtracted per key is kept in ``base`` and travels with
every timestamp, so a receiver can compare timestamps stamped before and
after a validation without ever seeing an inconsistent pair.

Two receive rules are supported. With ``count_receives=True`` the owner
entry also ticks on every receive (the textbook update rule); with
``count_receives=False`` the owner entry counts only its own sends, which is
the rule the deliverability predicate needs in order to stay live when a
miner sends after receiving. Protocol miners use the latter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence


class ClockError(Exception):
    pass


class UnknownSender(ClockError):
    pass


class NotDeliverable(ClockError):
    pass


class Underflow(ClockError):
    pass


@dataclass(frozen=True)
class Timestamp:
    sender: int
    snapshot: tuple  # ((key, entry), ...) in canonical key order
    base: tuple = ()

    @classmethod
    def of(cls, sender: int, keys: Sequence[int], entries: Sequence[int]) -> "Timestamp":
        """Build a timestamp from positional entries, e.g. ``[1, 2, 0]``."""
        return cls(sender, tuple(zip(keys, entries)))

    def entries(self) -> dict[int, int]:
        return dict(self.snapshot)

    def absolute(self) -> dict[int, int]:
        """Entries plus base; cached, callers must not mutate the result."""
        cached = self.__dict__.get("_absolute")
        if cached is None:
            base = dict(self.base)
            cached = {k: v + base.get(k, 0) for k, v in self.snapshot}
            object.__setattr__(self, "_absolute", cached)
        return cached

    def values(self) -> list[int]:
        return [v for _, v in self.snapshot]

    def serialize(self) -> tuple[int, list[int]]:
        return self.sender, self.values()


@dataclass
class VectorClock:
    owner: int
    entries: dict = field(default_factory=dict)
    base: dict = field(default_factory=dict)
    count_receives: bool = True

    @classmethod
    def create(cls, owner: int, peers: Iterable[int], count_receives: bool = True) -> "VectorClock":
        keys = sorted(set(peers) | {owner})
        return cls(owner, {k: 0 for k in keys}, {k: 0 for k in keys}, count_receives)

    @classmethod
    def from_list(cls, owner: int, keys: Sequence[int], values: Sequence[int],
                  count_receives: bool = True) -> "VectorClock":
        if owner not in keys:
            raise ValueError("owner must be one of the keys")
        return cls(owner, dict(zip(keys, values)), {k: 0 for k in keys}, count_receives)

    @property
    def keys(self) -> list[int]:
        return list(self.entries)

    def values(self) -> list[int]:
        return list(self.entries.values())

    def absolute(self, key: int) -> int:
        return self.entries[key] + self.base.get(key, 0)

    def __contains__(self, key):
        return key in self.entries


def on_send(clock: VectorClock) -> Timestamp:
    clock.entries[clock.owner] += 1
    return Timestamp(clock.owner, tuple(clock.entries.items()), tuple(clock.base.items()))


def _compare(clock: VectorClock, ts: Timestamp) -> Optional[int]:
    """Gap between the sender's entry in ``ts`` and what the clock expects
    next: 0 means next-in-sequence, negative means already delivered."""
    if ts.sender not in clock:
        raise UnknownSender(f"node {ts.sender} is not associated with {clock.owner}")
    absolute = ts.absolute()
    return absolute[ts.sender] - (clock.absolute(ts.sender) + 1)


def is_duplicate(clock: VectorClock, ts: Timestamp) -> bool:
    return _compare(clock, ts) < 0


def deliverable(clock: VectorClock, ts: Timestamp) -> bool:
    if _compare(clock, ts) != 0:
        return False
    absolute = ts.absolute()
    return all(absolute[k] <= clock.absolute(k)
               for k in absolute if k != ts.sender and k in clock)


def on_receive(clock: VectorClock, ts: Timestamp) -> VectorClock:
    if not deliverable(clock, ts):
        raise NotDeliverable(f"timestamp {ts.values()} from {ts.sender} is not deliverable")
    absolute = ts.absolute()
    for k, v in absolute.items():
        if k != clock.owner and k in clock:
            clock.entries[k] = max(clock.absolute(k), v) - clock.base.get(k, 0)
    if clock.count_receives:
        clock.entries[clock.owner] += 1
    return clock


def on_validation(clock: VectorClock, validated: Mapping[int, int]) -> VectorClock:
    for k, n in validated.items():
        if k not in clock:
            raise UnknownSender(f"validated events of {k} are outside {clock.owner}'s clock")
        if n > clock.entries[k]:
            raise Underflow(f"entry {k}={clock.entries[k]} cannot drop by {n}")
    for k, n in validated.items():
        clock.entries[k] -= n
        clock.base[k] = clock.base.get(k, 0) + n
    return clock


def can_validate(clock: VectorClock, validated: Mapping[int, int]) -> bool:
    return all(k in clock and n <= clock.entries[k] for k, n in validated.items())


def happened_before(a: Timestamp, b: Timestamp) -> bool:
    """``a -> b`` for two event timestamps: b's sender had seen a's send."""
    if a == b:
        return False
    ab, bb = a.absolute(), b.absolute()
    if a.sender not in bb:
        return False
    if a.sender == b.sender:
        return ab[a.sender] < bb[b.sender]
    return ab[a.sender] <= bb[a.sender]


def concurrent(a: Timestamp, b: Timestamp) -> bool:
    return not happened_before(a, b) and not happened_before(b, a)
