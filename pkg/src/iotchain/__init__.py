"""Lightweight blockchain for trigger-action IoT event chains: causal event
ordering with reduced vector clocks, primitive-root work puzzles, a gateway
ledger with bounded miner storage, provenance recovery and a deterministic
network simulator."""

__version__ = "0.1.0"
