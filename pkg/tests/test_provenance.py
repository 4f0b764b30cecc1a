import pytest
from hypothesis import given, settings, strategies as st

from iotchain.chains import ActionChainSpec, DependencyMap
from iotchain.codec import BlockId
from iotchain.ledger import Ledger, append_block
from iotchain.provenance import (ACTIVITY, AGENT, EDGE_KINDS, ENTITY, BadDag, EmptyLedger,
                                 EventNotFound, ProvenanceDag, build_dag, entity_id, export,
                                 handler_of, load)
from iotchain.simnet import (ALARM_ON, SMOKE_DETECT, SPRINKLER_ON, WINDOW_OPEN, GeneratorConfig,
                             generate_scenario, run, smoke_scenario)


def ledger_of(*chains):
    """chains: {chain_index: [[handlers], ...]}"""
    ledger = Ledger()
    for spec in chains:
        for c, blocks in spec.items():
            tip = ledger.ensure_chain(c) if c not in ledger.chains else ledger.tip(c)
            for txs in blocks:
                tip = tip.child(txs)
                append_block(ledger, tip)
    return ledger


def test_single_event_chain_is_its_own_root():
    deps = DependencyMap.from_chains([ActionChainSpec(5, 0x60)])
    ledger = ledger_of({5: [[0x60]]})
    dag = build_dag(ledger, [0x60], deps, {0x60: 7})
    assert len(dag.of_kind(ENTITY)) == len(dag.of_kind(ACTIVITY)) == len(dag.of_kind(AGENT)) == 1
    assert dag.roots() == [entity_id(0x60, BlockId(5, 1))]
    assert len(dag.edges) == 3 and dag.of_kind(AGENT) == ["agent:7"]


def test_missing_end_and_empty_ledger():
    deps = DependencyMap.from_chains([ActionChainSpec(5, 0x60)])
    with pytest.raises(EventNotFound):
        build_dag(ledger_of({5: [[0x60]]}), [0x61], deps)
    empty = Ledger()
    empty.ensure_chain(5)
    with pytest.raises(EmptyLedger):
        build_dag(empty, [0x60], deps)
    with pytest.raises(ValueError):
        build_dag(ledger_of({5: [[0x60]]}), [], deps)


CHAIN = ActionChainSpec(1, 0x10, ((0x10, 0x11), (0x11, 0x12), (0x10, 0x13)), (1, 2, 3, 4))
DEPS = DependencyMap.from_chains([CHAIN])
OWNERS = {0x10: 1, 0x11: 2, 0x12: 3, 0x13: 4}


def test_walk_crosses_blocks_and_merges():
    ledger = ledger_of({1: [[0x10, 0x13], [0x77], [0x11], [0x12]]})
    dag = build_dag(ledger, [0x12, 0x13], DEPS, OWNERS)
    assert [handler_of(r) for r in dag.roots()] == [0x10]
    assert dag.walks == [[BlockId(1, 4), BlockId(1, 3), BlockId(1, 2), BlockId(1, 1)],
                         [BlockId(1, 1)]]
    assert len(dag.of_kind(ENTITY)) == 4 and len(dag.edges) == 4 * 3 + 3 * 2


def test_latest_occurrence_and_bound():
    ledger = ledger_of({1: [[0x10], [0x11], [0x10], [0x11]]})
    latest = build_dag(ledger, [0x11], DEPS, OWNERS)
    assert latest.roots() == [entity_id(0x10, BlockId(1, 3))]
    past = build_dag(ledger, [0x11], DEPS, OWNERS, before=BlockId(1, 2))
    assert past.roots() == [entity_id(0x10, BlockId(1, 1))]
    with pytest.raises(EventNotFound):
        build_dag(ledger, [0x11], DEPS, OWNERS, before=BlockId(1, 9))


def test_trigger_in_another_chain_of_blocks():
    ledger = ledger_of({2: [[0x10]]}, {1: [[0x11]]})
    dag = build_dag(ledger, [0x11], DEPS, OWNERS)
    assert dag.roots() == [entity_id(0x10, BlockId(2, 1))]
    assert dag.walks == [[BlockId(1, 1), BlockId(2, 1)]]


def test_unreachable_trigger_stops_the_branch():
    dag = build_dag(ledger_of({1: [[0x11]]}), [0x11], DEPS, OWNERS)
    assert dag.roots() == [entity_id(0x11, BlockId(1, 1))]


def test_edge_typing_is_enforced():
    dag = ProvenanceDag()
    dag.add_node("e", ENTITY, "e")
    dag.add_node("a", ACTIVITY, "a")
    with pytest.raises(BadDag):
        dag.add_edge("a", "e", "wasGeneratedBy")
    with pytest.raises(BadDag):
        dag.add_edge("e", "a", "influenced")
    with pytest.raises(BadDag):
        dag.add_node("e", AGENT, "again")


def test_single_node_export():
    dag = ProvenanceDag()
    dag.add_node("entity:01@0:1", ENTITY, "lonely")
    dot = export(dag, "dot").decode().splitlines()
    assert sum("shape=" in line for line in dot) == 1
    assert not any("->" in line for line in dot)
    assert load(export(dag, "structured")) == dag
    with pytest.raises(ValueError):
        export(dag, "xml")


@st.composite
def dags(draw):
    dag = ProvenanceDag()
    n = draw(st.integers(1, 8))
    ents = [f"entity:{i:02x}@0:{i}" for i in range(1, n + 1)]
    for e in ents:
        h = handler_of(e)
        dag.add_node(e, ENTITY, f"event {h}")
        dag.add_node(f"activity:{h:02x}@0:{h}", ACTIVITY, f"run {h}")
        dag.add_node(f"agent:{h % 3}", AGENT, f"node {h % 3}")
        dag.add_edge(e, f"activity:{h:02x}@0:{h}", "wasGeneratedBy")
        dag.add_edge(f"activity:{h:02x}@0:{h}", f"agent:{h % 3}", "wasAssociatedWith")
        dag.add_edge(e, f"agent:{h % 3}", "wasAttributedTo")
    for i in range(1, n):
        j = draw(st.integers(0, i - 1))   # derive only from older entities: acyclic
        if draw(st.booleans()):
            dag.add_edge(ents[i], ents[j], "wasDerivedFrom")
            dag.add_edge(f"activity:{i + 1:02x}@0:{i + 1}", ents[j], "used")
    return dag


@settings(max_examples=60)
@given(dags())
def test_export_round_trip(dag):
    for fmt in ("structured", "dot"):
        assert export(dag, fmt) == export(dag, fmt)
    again = load(export(dag, "structured"))
    assert again == dag and export(again, "structured") == export(dag, "structured")
    assert again.is_acyclic()


def test_cycle_detection():
    dag = ProvenanceDag()
    for x in "ab":
        dag.add_node(x, ENTITY, x)
    dag.add_edge("a", "b", "wasDerivedFrom")
    assert dag.is_acyclic()
    dag.add_edge("b", "a", "wasDerivedFrom")
    assert not dag.is_acyclic()


def _expected_counts(chain, ends):
    """Nodes and edges the smoke walk must produce, counted from the chain
    configuration alone: every event on a path from an end back to the start
    contributes an Entity, an Activity and an Agent with three relations, and
    every trigger link adds used plus wasDerivedFrom."""
    events, links = set(), set()
    for e in ends:
        h = e
        events.add(h)
        while chain.predecessors(h):
            (t,) = chain.predecessors(h)
            links.add((t, h))
            events.add(t)
            h = t
    return 3 * len(events), 3 * len(events) + 2 * len(links)


def test_smoke_dag():
    sc = smoke_scenario(0)
    result = run(sc, 30)
    smoke = sc.chains[-1]
    assert sorted(smoke.ends) == [WINDOW_OPEN, ALARM_ON, SPRINKLER_ON]
    dag = build_dag(result.ledger, smoke.ends, sc.deps, sc.owners)
    assert [handler_of(r) for r in dag.roots()] == [SMOKE_DETECT]
    assert (len(dag.nodes), len(dag.edges)) == _expected_counts(smoke, smoke.ends) == (12, 18)
    for s, d, label in dag.edges:
        assert (dag.kind(s), dag.kind(d)) == EDGE_KINDS[label]
    assert dag.is_acyclic()
    # the monitor only relays, so it is not an agent
    monitor = smoke.members[1]
    assert f"agent:{monitor}" not in dag.nodes


@pytest.mark.parametrize("seed", range(3))
def test_root_cause_on_generated_runs(seed):
    sc = generate_scenario(GeneratorConfig(), seed)
    result = run(sc, 30)
    for chain in sc.chains:
        for end in chain.ends:
            dag = build_dag(result.ledger, [end], sc.deps, sc.owners)
            assert [handler_of(r) for r in dag.roots()] == [chain.start]
            for walk in dag.walks:
                assert len(set(walk)) == len(walk)
                per_chain = {}
                for b in walk:
                    per_chain.setdefault(b.chain_index, []).append(b.position)
                for positions in per_chain.values():
                    assert positions == sorted(positions, reverse=True)
