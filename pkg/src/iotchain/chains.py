"""Action-chain topology: which event triggers which."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .codec import check_handler


class ChainError(ValueError):
    pass


@dataclass(frozen=True)
class ActionChainSpec:
    """A trigger-action chain rooted at a single start event.

    ``edges`` holds ``(trigger, action)`` handler pairs. ``members`` lists the
    devices taking part, which may include devices that only relay (they
    invoke other handlers without executing an event of their own).
    """

    chain_id: int
    start: int
    edges: tuple = ()
    members: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        object.__setattr__(self, "members", tuple(self.members))
        check_handler(self.start)
        for a, b in self.edges:
            check_handler(a)
            check_handler(b)
        targets = {b for _, b in self.edges}
        if self.start in targets:
            raise ChainError(f"chain {self.chain_id}: start event {self.start} has a trigger")
        # every event reachable from start, no cycles
        order = self.topological_order()
        if set(order) != self.events:
            raise ChainError(f"chain {self.chain_id} has unreachable events or a cycle")

    @classmethod
    def path(cls, chain_id: int, handlers: Sequence[int], members: Sequence[int] = ()):
        edges = tuple(zip(handlers, handlers[1:]))
        return cls(chain_id, handlers[0], edges, tuple(members))

    @property
    def events(self) -> set[int]:
        return {self.start} | {b for _, b in self.edges} | {a for a, _ in self.edges}

    @property
    def ends(self) -> list[int]:
        sources = {a for a, _ in self.edges}
        return sorted(e for e in self.events if e not in sources)

    def successors(self, handler: int) -> list[int]:
        return [b for a, b in self.edges if a == handler]

    def predecessors(self, handler: int) -> list[int]:
        return [a for a, b in self.edges if b == handler]

    def topological_order(self) -> list[int]:
        out, frontier, seen = [], [self.start], {self.start}
        indeg: dict[int, int] = {}
        for _, b in self.edges:
            indeg[b] = indeg.get(b, 0) + 1
        while frontier:
            h = frontier.pop(0)
            out.append(h)
            for b in self.successors(h):
                indeg[b] -= 1
                if indeg[b] == 0 and b not in seen:
                    seen.add(b)
                    frontier.append(b)
        return out


@dataclass(frozen=True)
class DependencyMap:
    triggers: Mapping[int, frozenset] = field(default_factory=dict)
    starts: frozenset = frozenset()

    @classmethod
    def from_chains(cls, chains: Iterable[ActionChainSpec]) -> "DependencyMap":
        triggers: dict[int, set] = {}
        starts = set()
        for c in chains:
            starts.add(c.start)
            for h in c.events:
                triggers.setdefault(h, set())
            for a, b in c.edges:
                triggers[b].add(a)
        return cls({h: frozenset(t) for h, t in triggers.items()}, frozenset(starts))

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, int]], starts: Iterable[int] = ()):
        triggers: dict[int, set] = {}
        for a, b in edges:
            triggers.setdefault(a, set())
            triggers.setdefault(b, set()).add(a)
        return cls({h: frozenset(t) for h, t in triggers.items()}, frozenset(starts))

    def triggers_of(self, handler: int) -> frozenset:
        return self.triggers.get(handler, frozenset())

    def needs_trigger(self, handler: int) -> bool:
        return bool(self.triggers_of(handler)) and handler not in self.starts
