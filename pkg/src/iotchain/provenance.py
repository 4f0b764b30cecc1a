"""Provenance DAGs recovered from the committed ledger by backtracking.

Each committed event occurrence becomes an Entity (the event) generated by
an Activity (the handler invocation), both keyed by handler and block id so
that repeated firings stay distinct. Agents are the nodes owning the
handlers. Triggers link an action's Activity to the trigger's Entity with
``used`` and the two Entities with ``wasDerivedFrom``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .chains import ActionChainSpec, DependencyMap
from .codec import BlockId, TransactionBlock
from .ledger import Ledger

__all__ = ["ActionChainSpec", "ProvenanceDag", "ProvenanceError", "EventNotFound", "EmptyLedger",
           "BadDag", "build_dag", "export", "load", "ENTITY", "ACTIVITY", "AGENT", "EDGE_KINDS"]

ENTITY, ACTIVITY, AGENT = "Entity", "Activity", "Agent"
EDGE_KINDS = {
    "wasGeneratedBy": (ENTITY, ACTIVITY),
    "used": (ACTIVITY, ENTITY),
    "wasAssociatedWith": (ACTIVITY, AGENT),
    "wasAttributedTo": (ENTITY, AGENT),
    "wasDerivedFrom": (ENTITY, ENTITY),
}


class ProvenanceError(Exception):
    pass


class EventNotFound(ProvenanceError, KeyError):
    pass


class EmptyLedger(ProvenanceError):
    pass


class BadDag(ProvenanceError, ValueError):
    pass


@dataclass
class ProvenanceDag:
    nodes: dict = field(default_factory=dict)     # id -> (kind, label)
    edges: set = field(default_factory=set)       # (from, to, label)
    walks: list = field(default_factory=list)     # per end event: block ids in reading order

    @property
    def reads(self) -> list:
        return [b for w in self.walks for b in w]

    def add_node(self, node_id: str, kind: str, label: str):
        if kind not in (ENTITY, ACTIVITY, AGENT):
            raise BadDag(f"unknown node kind {kind!r}")
        prev = self.nodes.get(node_id)
        if prev is not None and prev[0] != kind:
            raise BadDag(f"node {node_id} is both {prev[0]} and {kind}")
        self.nodes[node_id] = (kind, label)

    def add_edge(self, src: str, dst: str, label: str):
        if label not in EDGE_KINDS:
            raise BadDag(f"unknown relation {label!r}")
        want = EDGE_KINDS[label]
        got = (self.nodes[src][0], self.nodes[dst][0])
        if got != want:
            raise BadDag(f"{label} needs {want[0]}->{want[1]}, got {got[0]}->{got[1]}")
        self.edges.add((src, dst, label))

    def kind(self, node_id: str) -> str:
        return self.nodes[node_id][0]

    def of_kind(self, kind: str) -> list[str]:
        return sorted(n for n, (k, _) in self.nodes.items() if k == kind)

    def roots(self) -> list[str]:
        """Entities not derived from any other entity."""
        derived = {s for s, _, l in self.edges if l == "wasDerivedFrom"}
        return [n for n in self.of_kind(ENTITY) if n not in derived]

    def derived_from(self, entity: str) -> list[str]:
        return sorted(d for s, d, l in self.edges if s == entity and l == "wasDerivedFrom")

    def is_acyclic(self) -> bool:
        out: dict[str, list] = {}
        for s, d, _ in self.edges:
            out.setdefault(s, []).append(d)
        state: dict[str, int] = {}
        for start in self.nodes:
            if start in state:
                continue
            stack = [(start, iter(out.get(start, ())))]
            state[start] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node] = 2
                    stack.pop()
                elif state.get(nxt) == 1:
                    return False
                elif nxt not in state:
                    state[nxt] = 1
                    stack.append((nxt, iter(out.get(nxt, ()))))
        return True

    def __eq__(self, other):
        return isinstance(other, ProvenanceDag) and self.nodes == other.nodes \
            and self.edges == other.edges


def entity_id(handler: int, bid: BlockId) -> str:
    return f"entity:{handler:02x}@{bid}"


def activity_id(handler: int, bid: BlockId) -> str:
    return f"activity:{handler:02x}@{bid}"


def agent_id(node) -> str:
    return f"agent:{node}"


def handler_of(entity: str) -> int:
    return int(entity.split(":", 1)[1].split("@", 1)[0], 16)


class _Walker:
    def __init__(self, ledger: Ledger, deps: DependencyMap, bound: Optional[int]):
        self.ledger = ledger
        self.deps = deps
        self.bound = bound

    def visible(self, block: TransactionBlock) -> bool:
        return self.bound is None or self.ledger.seq[block.id] <= self.bound

    def latest(self, handlers: Iterable[int], before_seq: Optional[int] = None,
               skip_chain: Optional[int] = None):
        """Most recently committed occurrence of any of ``handlers`` across
        the chains of blocks the gateway indexes them under."""
        best = None
        handlers = set(handlers)
        chains = set()
        for h in handlers:
            chains |= self.ledger.handler_chains.get(h, set())
        for c in sorted(chains):
            if c == skip_chain:
                continue
            for block in reversed(self.ledger.chains[c]):
                seq = self.ledger.seq[block.id]
                if not self.visible(block) or (before_seq is not None and seq >= before_seq):
                    continue
                hits = [i for i, h in enumerate(block.transactions) if h in handlers]
                if hits:
                    if best is None or seq > best[0]:
                        best = (seq, block, hits[-1])
                    break
        return None if best is None else (best[1], best[2])


def build_dag(ledger: Ledger, end_events: Iterable[int], deps: DependencyMap,
              agents: Optional[Mapping[int, object]] = None,
              before: Optional[BlockId] = None) -> ProvenanceDag:
    """Backtrack from the latest committed occurrence of each end event.

    Inside a chain of blocks the walk reads transactions in reverse and steps
    to lower positions; a trigger that was committed in another chain of
    blocks is looked up through the gateway's handler index. A branch stops
    at an event needing no trigger, or where it meets a branch already walked.
    ``before`` bounds the search to blocks committed no later than that block.
    ``agents`` maps handlers to owning nodes.
    """
    ends = list(end_events)
    if not ends:
        raise ValueError("at least one end event is required")
    if ledger.committed_count() == 0:
        raise EmptyLedger("the ledger holds only genesis blocks")
    bound = None
    if before is not None:
        if before not in ledger:
            raise EventNotFound(f"bound block {before} is not in the ledger")
        bound = ledger.seq[before]
    walker = _Walker(ledger, deps, bound)
    dag = ProvenanceDag()

    def add_event(h: int, block: TransactionBlock) -> str:
        ent, act = entity_id(h, block.id), activity_id(h, block.id)
        if ent in dag.nodes:
            return ent
        owner = agents.get(h, f"h{h:02x}") if agents is not None else f"h{h:02x}"
        ag = agent_id(owner)
        dag.add_node(ent, ENTITY, f"event 0x{h:02x} in block {block.id}")
        dag.add_node(act, ACTIVITY, f"handler 0x{h:02x} invoked, block {block.id}")
        dag.add_node(ag, AGENT, f"node {owner}")
        dag.add_edge(ent, act, "wasGeneratedBy")
        dag.add_edge(act, ag, "wasAssociatedWith")
        dag.add_edge(ent, ag, "wasAttributedTo")
        return ent

    for end in ends:
        found = walker.latest([end])
        if found is None:
            raise EventNotFound(f"event 0x{end:02x} was never committed")
        block, idx = found
        h = end
        reads = [block.id]
        dag.walks.append(reads)
        ent = add_event(h, block)
        while deps.needs_trigger(h):
            triggers = deps.triggers_of(h)
            hit = _search_chain(ledger, walker, reads, block, idx, triggers)
            if hit is None:
                # the trigger may sit in another chain of blocks
                hit = walker.latest(triggers, before_seq=ledger.seq[block.id])
                if hit is not None:
                    reads.append(hit[0].id)
            if hit is None:
                break
            block, idx = hit
            t = block.transactions[idx]
            merged = entity_id(t, block.id) in dag.nodes
            tent = add_event(t, block)
            dag.add_edge(activity_id(h, _bid(ent)), tent, "used")
            dag.add_edge(ent, tent, "wasDerivedFrom")
            if merged:
                break
            h, ent = t, tent
    return dag


def _bid(entity: str) -> BlockId:
    return BlockId.parse(entity.rsplit("@", 1)[1])


def _search_chain(ledger: Ledger, walker: _Walker, reads: list,
                  block: TransactionBlock, idx: int, triggers) -> Optional[tuple]:
    for i in range(idx - 1, -1, -1):
        if block.transactions[i] in triggers:
            return block, i
    chain = ledger.chains[block.id.chain_index]
    for pos in range(block.id.position - 1, 0, -1):
        earlier = chain[pos]
        if not walker.visible(earlier):
            continue
        reads.append(earlier.id)
        for i in range(len(earlier.transactions) - 1, -1, -1):
            if earlier.transactions[i] in triggers:
                return earlier, i
    return None


# -- export ------------------------------------------------------------------

def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


_SHAPES = {ENTITY: "ellipse", ACTIVITY: "box", AGENT: "house"}


def export(dag: ProvenanceDag, fmt: str = "dot") -> bytes:
    nodes = sorted(dag.nodes.items())
    edges = sorted(dag.edges)
    if fmt == "dot":
        lines = ["digraph provenance {", "  rankdir=BT;"]
        for nid, (kind, label) in nodes:
            lines.append(f"  {_quote(nid)} [shape={_SHAPES[kind]}, label={_quote(label)}];")
        for s, d, l in edges:
            lines.append(f"  {_quote(s)} -> {_quote(d)} [label={_quote(l)}];")
        lines.append("}")
        return ("\n".join(lines) + "\n").encode()
    if fmt in ("structured", "json"):
        doc = {
            "nodes": [{"id": n, "kind": k, "label": l} for n, (k, l) in nodes],
            "edges": [{"from": s, "to": d, "label": l} for s, d, l in edges],
        }
        return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode()
    raise ValueError(f"unknown export format {fmt!r}")


def load(data: bytes) -> ProvenanceDag:
    """Inverse of ``export(dag, "structured")``; re-validates edge typing."""
    doc = json.loads(data)
    dag = ProvenanceDag()
    for n in doc["nodes"]:
        dag.add_node(n["id"], n["kind"], n["label"])
    for e in doc["edges"]:
        if e["from"] not in dag.nodes or e["to"] not in dag.nodes:
            raise BadDag(f"edge {e['from']} -> {e['to']} references an unknown node")
        dag.add_edge(e["from"], e["to"], e["label"])
    return dag
