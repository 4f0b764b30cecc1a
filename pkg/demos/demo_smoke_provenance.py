"""
Tracing a smoke alarm back to its cause
=======================================

A smoke detector opens a window, sounds an alarm and starts a sprinkler,
while ten unrelated chains keep the network busy. Backtracking through the
committed blocks recovers one provenance graph whose only root is the
detection event.
"""

from iotchain.provenance import build_dag, export
from iotchain.simnet import ALARM_ON, SPRINKLER_ON, WINDOW_OPEN, run, smoke_scenario

sc = smoke_scenario(seed=0)
result = run(sc, 30)
print("blocks committed:", result.ledger.committed_count())

dag = build_dag(result.ledger, [WINDOW_OPEN, ALARM_ON, SPRINKLER_ON], sc.deps, sc.owners)
print("nodes:", len(dag.nodes), "edges:", len(dag.edges))
print("root cause:", dag.roots())

# Graphviz source; pipe into ``dot -Tsvg`` to draw it.
print(export(dag, "dot").decode())
