"""Deterministic discrete-event simulation of a gateway-mediated star network.

Node 0 is the gateway; devices are numbered from 1. Simulated time is in
milliseconds. Every random draw comes from a stream seeded by the scenario
seed, and simultaneous events run in enqueue order, so a scenario and a
duration fully determine the trace, the ledger bytes and the metrics.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
import json
import os
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Optional

from .chains import ActionChainSpec, DependencyMap
from .codec import (CodecError, CommitStatus, Message, MessageKind, decode_commit,
                    decode_event_request, decode_reply, encode_event_request, encode_fetch)
from .gateway import (BROADCAST, GATEWAY, CoinRegistry, Gateway, GatewayConfig, GatewayError, MinerRoster,
                      OutboundQueue, Proposal, Timer)
from .ledger import Ledger, LedgerError, dump_ledger
from .miner import (FetchNeeded, MinerError, MinerState, Vote, make_miner, on_commit,
                    on_ledger_reply, on_proposal, on_transaction, retry_commits,
                    try_create_block)
from .pow import PowError, assign_roots, primes_between_ordinals
from .vclock import ClockError, on_send

PROTOCOLS = ("ble", "802.15.4g", "lora")
FAULT_KINDS = ("silent_node", "vote_flipper", "block_tamperer")
SMOKE_DETECT, WINDOW_OPEN, ALARM_ON, SPRINKLER_ON = 0x50, 0x51, 0x52, 0x53
ISOLATED_CHAIN = 255
# generated events never take the smoke handlers, so a smoke chain always fits
HANDLER_POOL = tuple(h for h in range(1, 256) if not SMOKE_DETECT <= h <= SPRINKLER_ON)

DEFAULT_TIMING = {
    "proposal_window": 10.0,
    "vote_timeout": 250.0,
    "coin_timeout": 2000.0,
    "block_delay": 25.0,
    "sample_interval": 1000.0,
}


class SimError(Exception):
    pass


class Unsatisfiable(SimError):
    pass


class TooManyFaults(SimError):
    pass


# -- scenario ----------------------------------------------------------------

@dataclass(frozen=True)
class DeviceSpec:
    id: int
    protocol: str = "ble"
    handlers: tuple = ()


@dataclass(frozen=True)
class Scenario:
    devices: tuple
    chains: tuple
    seed: int = 0
    reactivation: tuple = (10.0, 20.0)          # seconds between activations of a chain
    first_activation: tuple = (0.0, 2.0)        # seconds
    schedule: Mapping = field(default_factory=dict)  # chain id -> activation times (s), no repeats
    prime_range: tuple = (800, 1200)
    isolated: tuple = ()                        # handlers outside every chain
    reservations: tuple = ()                    # miners reserved for isolated events
    isolated_interval: tuple = (5.0, 10.0)
    delays: Mapping = field(default_factory=lambda: {p: (5.0, 10.0) for p in PROTOCOLS})
    fifo: bool = True
    faults: tuple = ()                          # ((kind, node), ...)
    coefficients: tuple = (1.0, 1.0, 0.01)
    cut: int = 20
    capacity: int = 20
    timing: Mapping = field(default_factory=lambda: dict(DEFAULT_TIMING))
    quorum: str = "51/100"
    max_factor: Optional[int] = 1

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)

    # derived views
    @property
    def owners(self) -> dict:
        return {h: d.id for d in self.devices for h in d.handlers}

    @property
    def handlers(self) -> list:
        return sorted(self.owners)

    @property
    def deps(self) -> DependencyMap:
        return DependencyMap.from_chains(self.chains)

    @property
    def roster(self) -> MinerRoster:
        return MinerRoster.from_chains(self.chains, self.reservations)

    @property
    def miners(self) -> list:
        out = {m for c in self.chains for m in c.members} | set(self.reservations)
        return sorted(out)

    def chain(self, chain_id: int) -> ActionChainSpec:
        for c in self.chains:
            if c.chain_id == chain_id:
                return c
        raise KeyError(chain_id)

    def faulty(self, kind: Optional[str] = None) -> set:
        return {n for k, n in self.faults if kind is None or k == kind}

    # serialization
    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "devices": [{"id": d.id, "protocol": d.protocol, "handlers": list(d.handlers)}
                        for d in self.devices],
            "chains": [{"id": c.chain_id, "start": c.start, "edges": [list(e) for e in c.edges],
                        "members": list(c.members)} for c in self.chains],
            "reactivation": list(self.reactivation),
            "first_activation": list(self.first_activation),
            "schedule": {str(k): list(v) for k, v in sorted(self.schedule.items())},
            "prime_range": list(self.prime_range),
            "isolated": list(self.isolated),
            "reservations": list(self.reservations),
            "isolated_interval": list(self.isolated_interval),
            "delays": {k: list(v) for k, v in sorted(self.delays.items())},
            "fifo": self.fifo,
            "faults": [list(f) for f in self.faults],
            "coefficients": list(self.coefficients),
            "cut": self.cut,
            "capacity": self.capacity,
            "timing": dict(sorted(self.timing.items())),
            "quorum": self.quorum,
            "max_factor": self.max_factor,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        devices = tuple(DeviceSpec(int(x["id"]), x.get("protocol", "ble"), tuple(x.get("handlers", ())))
                        for x in d["devices"])
        chains = tuple(ActionChainSpec(int(c["id"]), int(c["start"]),
                                       tuple(tuple(e) for e in c.get("edges", ())),
                                       tuple(c.get("members", ())))
                       for c in d["chains"])
        kw = {}
        for key in ("reactivation", "first_activation", "prime_range", "isolated",
                    "reservations", "isolated_interval", "coefficients"):
            if key in d:
                kw[key] = tuple(d[key])
        for key in ("seed", "fifo", "cut", "capacity", "quorum", "max_factor"):
            if key in d:
                kw[key] = d[key]
        if "schedule" in d:
            kw["schedule"] = {int(k): tuple(v) for k, v in d["schedule"].items()}
        if "delays" in d:
            kw["delays"] = {k: tuple(v) for k, v in d["delays"].items()}
        if "faults" in d:
            kw["faults"] = tuple((k, int(n)) for k, n in d["faults"])
        if "timing" in d:
            kw["timing"] = {**DEFAULT_TIMING, **d["timing"]}
        return cls(devices, chains, **kw)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class GeneratorConfig:
    devices: int = 30
    chains: int = 10
    min_length: int = 10
    max_length: int = 20
    max_chains_per_device: int = 5
    isolated: int = 0
    strategy: str = "balanced"      # or "random": uniform among devices with room

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        known = {k: (v if k == "strategy" else int(v)) for k, v in d.items()
                 if k in cls.__dataclass_fields__}
        return cls(**known)


def generate_scenario(config: GeneratorConfig = GeneratorConfig(), seed: int = 0,
                      **overrides) -> Scenario:
    """Random path-shaped chains over a device pool.

    Every chain membership is its own event with a fresh handler, so a device
    in three chains owns three events and the trigger graph of one chain
    never leaks into another. Under the balanced strategy devices with the
    fewest memberships are preferred when filling a chain, so generation only
    fails when the bounds are genuinely infeasible.
    """
    if isinstance(config, Mapping):
        config = GeneratorConfig.from_dict(config)
    if config.strategy not in ("balanced", "random"):
        raise ValueError(f"unknown strategy {config.strategy!r}")
    if config.min_length < 1 or config.max_length < config.min_length:
        raise Unsatisfiable(f"bad chain length bounds {config.min_length}..{config.max_length}")
    n = config.devices
    if n + config.isolated > 254:
        raise Unsatisfiable("more than 254 devices do not fit in 8-bit node ids")
    rng = random.Random(seed)
    # every membership is an event, so handlers bound the slots too
    slots = min(n * config.max_chains_per_device, len(HANDLER_POOL) - config.isolated)
    if config.min_length > n:
        raise Unsatisfiable(f"a chain of length {config.min_length} needs more than {n} devices")
    if config.chains * config.min_length > slots:
        raise Unsatisfiable(f"{config.chains} chains of length >= {config.min_length} exceed "
                            f"{slots} membership slots or free handlers")
    hi = min(config.max_length, n)
    lengths = [rng.randint(config.min_length, hi) for _ in range(config.chains)]
    # trim random chains toward the minimum until every membership fits
    while sum(lengths) > slots:
        i = rng.choice([j for j, L in enumerate(lengths) if L > config.min_length])
        lengths[i] -= 1
    fresh = iter(HANDLER_POOL)
    owned: dict[int, list] = {d: [] for d in range(1, n + 1)}
    load = Counter({d: 0 for d in range(1, n + 1)})
    chains = []
    for cid, L in enumerate(lengths):
        free = [d for d in range(1, n + 1) if load[d] < config.max_chains_per_device]
        if len(free) < L:
            raise Unsatisfiable(f"chain {cid} needs {L} devices, only {len(free)} have room")
        if config.strategy == "random":
            path = rng.sample(free, L)
        else:
            keyed = sorted(free, key=lambda d: (load[d], rng.random()))
            path = keyed[:L]
            rng.shuffle(path)
        events = []
        for d in path:
            load[d] += 1
            h = next(fresh)
            owned[d].append(h)
            events.append(h)
        chains.append(ActionChainSpec.path(cid, events, path))
    devices = [DeviceSpec(d, PROTOCOLS[rng.randrange(len(PROTOCOLS))], tuple(owned[d]))
               for d in range(1, n + 1)]
    isolated = []
    for i in range(config.isolated):
        d, h = n + 1 + i, next(fresh)
        devices.append(DeviceSpec(d, PROTOCOLS[rng.randrange(len(PROTOCOLS))], (h,)))
        isolated.append(h)
    reservations = ()
    if isolated:
        reservations = (rng.randint(1, n),)
    return Scenario(tuple(devices), tuple(chains), seed=seed, isolated=tuple(isolated),
                    reservations=reservations, **overrides)


def smoke_scenario(seed: int = 0, background: Optional[GeneratorConfig] = None,
                   detect_at: float = 0.5, **overrides) -> Scenario:
    """Smoke detector, monitor, window, alarm and sprinkler as one chain,
    alongside generated background chains. The detector fires once, at
    ``detect_at`` seconds; the monitor only relays and owns no event."""
    bg = background or GeneratorConfig(devices=30, chains=10, min_length=5, max_length=5)
    base = generate_scenario(bg, seed)
    first = max(d.id for d in base.devices) + 1
    detector, monitor, window, alarm, sprinkler = range(first, first + 5)
    rng = random.Random(f"{seed}:smoke")
    smoke_devices = (
        DeviceSpec(detector, rng.choice(PROTOCOLS), (SMOKE_DETECT,)),
        DeviceSpec(monitor, rng.choice(PROTOCOLS), ()),
        DeviceSpec(window, rng.choice(PROTOCOLS), (WINDOW_OPEN,)),
        DeviceSpec(alarm, rng.choice(PROTOCOLS), (ALARM_ON,)),
        DeviceSpec(sprinkler, rng.choice(PROTOCOLS), (SPRINKLER_ON,)),
    )
    cid = max(c.chain_id for c in base.chains) + 1 if base.chains else 0
    chain = ActionChainSpec(cid, SMOKE_DETECT,
                            ((SMOKE_DETECT, WINDOW_OPEN), (SMOKE_DETECT, ALARM_ON),
                             (SMOKE_DETECT, SPRINKLER_ON)),
                            (detector, monitor, window, alarm, sprinkler))
    for h in chain.events:
        if h in base.owners:
            raise Unsatisfiable(f"background already uses handler 0x{h:02x}")
    return base.with_(devices=base.devices + smoke_devices, chains=base.chains + (chain,),
                      schedule={cid: (detect_at,)}, **overrides)


def inject_fault(scenario: Scenario, fault: str, target: int, allow_majority: bool = False) -> Scenario:
    """Mark ``target`` faulty. Refuses when faulty miners would reach half of
    any event's associated miners, unless ``allow_majority``."""
    if fault not in FAULT_KINDS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULT_KINDS}")
    if target not in scenario.miners:
        raise ValueError(f"node {target} is not a miner")
    faults = scenario.faults + ((fault, target),)
    if not allow_majority:
        faulty = {n for _, n in faults}
        roster = scenario.roster
        for h in scenario.handlers:
            assoc = roster.associated(h)
            bad = len(faulty & assoc)
            if bad and 2 * bad >= len(assoc):
                raise TooManyFaults(
                    f"{bad} of {len(assoc)} miners of event 0x{h:02x} would be faulty")
    return scenario.with_(faults=faults)


def load_config(path) -> Scenario:
    """A config file holds either a full scenario or generator bounds under
    ``"generate"`` plus any scenario overrides."""
    with open(path) as fh:
        data = json.load(fh)
    if "devices" in data:
        return Scenario.from_dict(data)
    gen = GeneratorConfig.from_dict(data.get("generate", {}))
    base = generate_scenario(gen, int(data.get("seed", 0)))
    rest = {k: v for k, v in data.items() if k not in ("generate", "seed")}
    if not rest:
        return base
    merged = base.to_dict()
    merged.update(rest)
    return Scenario.from_dict(merged)


# -- delays, metrics, trace ---------------------------------------------------

@dataclass
class DelayModel:
    """``base + uniform(0, jitter)`` milliseconds per protocol tag."""

    params: Mapping
    seed: object = 0
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = random.Random(f"{self.seed}:delay")

    def draw(self, tag: str) -> float:
        base, jitter = self.params.get(tag, (5.0, 10.0))
        return base + self._rng.uniform(0.0, jitter)


COUNTERS = ("sends", "receives", "modmults", "bytes_stored", "events_committed")


@dataclass
class MetricsFrame:
    nodes: tuple
    miners: tuple
    chains: int
    coefficients: tuple = (1.0, 1.0, 0.01)
    counters: dict = field(default_factory=dict)    # node -> Counter
    samples: list = field(default_factory=list)     # (time, node, *COUNTERS)
    latencies: list = field(default_factory=list)   # (block id str, ms)
    peak_bytes: dict = field(default_factory=dict)  # node -> max bytes ever stored
    saturated_at: dict = field(default_factory=dict)  # node -> first time at capacity
    gateway: Counter = field(default_factory=Counter)

    def __post_init__(self):
        for n in self.nodes:
            self.counters.setdefault(n, Counter())

    def count(self, node: int, key: str, n: int = 1):
        self.counters[node][key] += n

    def messages(self, node: int) -> int:
        """Event-ordering messages: the node's event requests plus relays of
        other associated miners' requests. The gateway's echo of the node's
        own request is an acknowledgement and is not counted."""
        c = self.counters[node]
        return c["ordering_sends"] + c["ordering_receives"]

    def protocol_messages(self, node: int) -> int:
        """Every message sent plus every received one that concerns the
        node's chains, consensus traffic included."""
        c = self.counters[node]
        return c["sends"] + c["relevant_receives"]

    @property
    def committed_events(self) -> int:
        return sum(self.counters[n]["events_committed"] for n in self.nodes)

    def events_per_chain(self) -> float:
        return self.committed_events / self.chains if self.chains else 0.0

    def mer(self, node: int) -> float:
        """Messages handled by ``node`` per committed event of a chain."""
        epc = self.events_per_chain()
        return self.messages(node) / epc if epc else 0.0

    def protocol_mer(self, node: int) -> float:
        epc = self.events_per_chain()
        return self.protocol_messages(node) / epc if epc else 0.0

    # one division over integer totals, so equal loads compare equal exactly
    def mean_mer(self) -> float:
        total = sum(self.messages(m) for m in self.miners)
        denom = self.committed_events * len(self.miners)
        return total * self.chains / denom if denom else 0.0

    def mean_protocol_mer(self) -> float:
        total = sum(self.protocol_messages(m) for m in self.miners)
        denom = self.committed_events * len(self.miners)
        return total * self.chains / denom if denom else 0.0

    def energy(self, node: int) -> float:
        a, b, g = self.coefficients
        c = self.counters[node]
        return a * c["sends"] + b * c["receives"] + g * c["modmults"]

    def mean_latency(self) -> float:
        return sum(l for _, l in self.latencies) / len(self.latencies) if self.latencies else 0.0

    def mean_bytes(self) -> float:
        return sum(self.counters[m]["bytes_stored"] for m in self.miners) / len(self.miners)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("time", "node") + COUNTERS)
        for row in self.samples:
            w.writerow((f"{row[0]:.3f}",) + tuple(row[1:]))
        return buf.getvalue()


def digest(payload: bytes) -> str:
    return hashlib.blake2s(payload, digest_size=4).hexdigest()


@dataclass
class RunResult:
    scenario: Scenario
    duration: float
    metrics: MetricsFrame
    ledger: Ledger
    trace: list
    gateway: Gateway
    states: dict

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)

    def ledger_bytes(self) -> bytes:
        return dump_ledger(self.ledger)

    def digests(self) -> dict:
        return {
            "ledger": hashlib.sha256(self.ledger_bytes()).hexdigest(),
            "trace": hashlib.sha256(self.trace_text().encode()).hexdigest(),
            "metrics": hashlib.sha256(self.metrics.to_csv().encode()).hexdigest(),
        }


def write_outputs(result: RunResult, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "ledger": os.path.join(out_dir, "ledger.bin"),
        "trace": os.path.join(out_dir, "trace.txt"),
        "scenario": os.path.join(out_dir, "scenario.json"),
    }
    with open(paths["metrics"], "w") as fh:
        fh.write(result.metrics.to_csv())
    with open(paths["ledger"], "wb") as fh:
        fh.write(result.ledger_bytes())
    with open(paths["trace"], "w") as fh:
        fh.write(result.trace_text())
    with open(paths["scenario"], "w") as fh:
        fh.write(result.scenario.to_json())
    return paths


# -- puzzle set-up ------------------------------------------------------------

def puzzle_setup(scenario: Scenario):
    """Assign one prime per event and a distinct root of it to every miner
    that can ever be asked to verify that event. Returns
    ``(primes, assignments)`` with ``assignments[h][miner] = root``."""
    rng = random.Random(f"{scenario.seed}:puzzles")
    handlers = scenario.handlers
    pool = primes_between_ordinals(*scenario.prime_range)
    if len(pool) < len(handlers):
        raise Unsatisfiable(f"{len(handlers)} events but only {len(pool)} primes in range")
    primes = dict(zip(handlers, rng.sample(pool, len(handlers))))
    roster = scenario.roster
    scopes: dict[int, set] = {}
    for c in scenario.chains:
        for m in c.members:
            scopes.setdefault(m, set()).update(c.events)
    for m in scenario.reservations:
        scopes.setdefault(m, set()).update(scenario.isolated)
    verifiers: dict[int, set] = {h: set() for h in handlers}
    for proposer, scope in scopes.items():
        eligible = set()
        for h in scope:
            eligible |= roster.associated(h)
        for h in scope:
            verifiers[h] |= eligible
    assignments = {}
    for h in handlers:
        miners = sorted(verifiers[h]) or sorted(roster.associated(h))
        assignments[h] = assign_roots(primes[h], miners, rng) if miners else {}
    return primes, assignments


# -- the simulator ------------------------------------------------------------

PROTOCOL_ERRORS = (ClockError, MinerError, LedgerError, CodecError, GatewayError, PowError)


@dataclass
class _Node:
    state: MinerState
    protocol: str
    handlers: tuple
    actions: dict                   # (trigger handler, chain) -> [own handlers]
    own_pending: set = field(default_factory=set)
    queued_fires: list = field(default_factory=list)
    deferred: dict = field(default_factory=dict)    # BlockId -> Proposal awaiting a vote
    fetch_sent: set = field(default_factory=set)
    tampered: set = field(default_factory=set)
    armed: bool = False


class Simulation:
    def __init__(self, scenario: Scenario):
        self.scenario = sc = scenario
        self.timing = {**DEFAULT_TIMING, **sc.timing}
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._uid = 0
        self.trace: list[str] = []
        self.delays = DelayModel(sc.delays, sc.seed)
        self.rng = random.Random(f"{sc.seed}:sim")
        self.duration_ms = 0.0

        owners = sc.owners
        self.owners = owners
        handlers = sc.handlers
        deps = sc.deps
        primes, assignments = puzzle_setup(sc)
        self.primes, self.assignments = primes, assignments
        gw_cfg = GatewayConfig(self.timing["proposal_window"], self.timing["vote_timeout"],
                               self.timing["coin_timeout"], Fraction(sc.quorum), sc.max_factor)
        self.gateway = Gateway(CoinRegistry.from_handlers(handlers), sc.roster, assignments, primes,
                               random.Random(f"{sc.seed}:gateway"), gw_cfg,
                               isolated=frozenset(sc.isolated))
        self.device_ids = sorted(d.id for d in sc.devices)
        self.metrics = MetricsFrame(tuple([GATEWAY] + self.device_ids), tuple(sc.miners),
                                    len(sc.chains), tuple(sc.coefficients))

        self.nodes: dict[int, _Node] = {}
        chains_of: dict[int, list] = {}
        for c in sc.chains:
            for m in c.members:
                chains_of.setdefault(m, []).append(c)
        reserved = set(sc.reservations)
        for d in sc.devices:
            mine = chains_of.get(d.id, [])
            peers = {m for c in mine for m in c.members}
            scope = {h for c in mine for h in c.events}
            roots = {h: (primes[h], assignments[h][d.id]) for h in handlers
                     if d.id in assignments.get(h, {})}
            state = make_miner(d.id, peers, deps, scope, roots, [c.chain_id for c in mine],
                               sc.capacity, sc.cut, sc.isolated, d.id in reserved)
            actions: dict = {}
            own = set(d.handlers)
            for c in mine:
                for a, b in c.edges:
                    if b in own:
                        actions.setdefault((a, c.chain_id), []).append(b)
            self.nodes[d.id] = _Node(state, d.protocol, tuple(d.handlers), actions)
        self.protocol = {d.id: d.protocol for d in sc.devices}
        self.downlink = OutboundQueue(self.device_ids, lambda r: self.delays.draw(self.protocol[r]),
                                      sc.fifo)
        self.uplinks = {d: OutboundQueue([GATEWAY], lambda r, d=d: self.delays.draw(self.protocol[d]),
                                         sc.fifo) for d in self.device_ids}
        self.faults = {}
        for kind, n in sc.faults:
            self.faults.setdefault(n, set()).add(kind)

    # plumbing
    def _push(self, t: float, kind: str, *args):
        heapq.heappush(self._heap, (t, self._seq, kind, args))
        self._seq += 1

    def _log(self, actor: int, action: str, kind: str = "-", uid: int = 0, dig: str = "-",
             detail: str = ""):
        self.trace.append(f"{self.now:.3f}\t{actor}\t{action}\t{kind}\t{uid}\t{dig}\t{detail}")

    def _send(self, src: int, to, msg: Message, detail: str = "") -> Message:
        self._uid += 1
        msg = replace(msg, uid=self._uid)
        self.metrics.count(src, "sends")
        self._log(src, "send", msg.kind.value, msg.uid, digest(msg.payload), detail)
        if src != GATEWAY:
            t = self.uplinks[src].schedule(self.now, GATEWAY)
            self._push(t, "arrive", GATEWAY, msg)
            return msg
        receivers = self.device_ids if to == BROADCAST else \
            sorted(to) if isinstance(to, (set, frozenset)) else [to]
        for r in receivers:
            self._push(self.downlink.schedule(self.now, r), "arrive", r, msg)
        return msg

    # gateway side
    def _gateway_effects(self, effects, cause: Optional[Message] = None):
        for kind, detail in self.gateway.drain_log():
            self._log(GATEWAY, kind, detail=detail)
        for e in effects:
            if isinstance(e, Timer):
                self._push(self.now + e.delay, "gw_timer", e.key)
                continue
            detail = ""
            if e.msg.kind is MessageKind.EVENT_REQUEST and cause is not None:
                h, c, thr = decode_event_request(e.msg.payload)
                detail = f"relay_of={cause.uid} h={h} c={c} src={e.msg.sender} thr={thr}"
            elif e.msg.kind is MessageKind.BLOCK_COMMIT:
                block, status, seq = decode_commit(e.msg.payload)
                txs = ",".join(str(h) for h in block.transactions)
                detail = f"status={status.name} block={block.id} txs={txs} seq={seq}"
                if status is CommitStatus.COMMITTED:
                    self._log(GATEWAY, "commit", detail=detail)
                    for h in block.transactions:
                        self.metrics.count(self.owners[h], "events_committed")
            elif e.msg.kind is MessageKind.BLOCK_PROPOSAL:
                detail = f"to={','.join(map(str, sorted(e.to)))}"
            self._send(GATEWAY, e.to, e.msg, detail)

    # device side
    def _fire(self, node: int, handler: int, chain: int):
        n = self.nodes[node]
        if handler in n.own_pending:
            n.queued_fires.append((handler, chain))
            self._log(node, "queue", detail=f"h={handler} c={chain}")
            return
        ts = on_send(n.state.clock)
        n.own_pending.add(handler)
        self.metrics.count(node, "ordering_sends")
        msg = Message(node, MessageKind.EVENT_REQUEST, encode_event_request(handler, chain), ts)
        self._send(node, GATEWAY, msg, f"h={handler} c={chain} ts={','.join(map(str, ts.values()))}")

    def _activate(self, chain_id: int, periodic: bool):
        chain = self.scenario.chain(chain_id)
        head = self.owners[chain.start]
        n = self.nodes[head]
        self._log(head, "activate", detail=f"c={chain_id} h={chain.start}")
        if chain.start in n.own_pending:
            # coin still spent locally: the request goes out as a replay
            msg = Message(head, MessageKind.EVENT_REQUEST, encode_event_request(chain.start, chain_id))
            self._send(head, GATEWAY, msg, f"h={chain.start} c={chain_id} replay")
            self.metrics.gateway["reactivations_while_pending"] += 1
        else:
            self._fire(head, chain.start, chain_id)
        if periodic:
            lo, hi = self.scenario.reactivation
            nxt = self.now + 1000.0 * self.rng.uniform(lo, hi)
            if nxt <= self.duration_ms:
                self._push(nxt, "activate", chain_id, True)

    def _fire_isolated(self, handler: int):
        node = self.owners[handler]
        self._fire(node, handler, ISOLATED_CHAIN)
        lo, hi = self.scenario.isolated_interval
        nxt = self.now + 1000.0 * self.rng.uniform(lo, hi)
        if nxt <= self.duration_ms:
            self._push(nxt, "isolated", handler)

    def _arm(self, node: int):
        n = self.nodes[node]
        if not n.armed and n.state.can_propose():
            n.armed = True
            self._push(self.now + self.timing["block_delay"], "propose", node)

    def _propose(self, node: int):
        n = self.nodes[node]
        n.armed = False
        prop = try_create_block(n.state, self.now)
        if prop is None:
            return
        self._record_store(node)
        msg = Message(node, MessageKind.BLOCK_PROPOSAL, prop.payload())
        txs = ",".join(str(h) for h in prop.block.transactions)
        self._send(node, GATEWAY, msg, f"block={prop.block.id} txs={txs}")

    def _record_store(self, node: int):
        st = self.nodes[node].state
        size = st.partial.bytes_stored
        m = self.metrics
        self.metrics.counters[node]["modmults"] = st.stats["modmults"]
        m.counters[node]["bytes_stored"] = size
        if size > m.peak_bytes.get(node, 0):
            m.peak_bytes[node] = size
        if len(st.partial) >= st.partial.capacity and node not in m.saturated_at:
            m.saturated_at[node] = self.now

    def _tamper(self, node: int):
        if "block_tamperer" not in self.faults.get(node, ()):
            return
        n = self.nodes[node]
        for bid, entry in n.state.partial.store.items():
            if bid not in n.tampered:
                n.tampered.add(bid)
                raw = bytearray(entry.data)
                raw[2] ^= 0x01            # block hash byte
                entry.overwrite(bytes(raw))
                self.metrics.gateway["tampered_blocks"] += 1

    def _consider_votes(self, node: int):
        n = self.nodes[node]
        for bid in sorted(n.deferred, key=lambda b: (b.chain_index, b.position)):
            prop = n.deferred.get(bid)
            if prop is not None:
                self._evaluate(node, prop)

    def _evaluate(self, node: int, prop: Proposal):
        n = self.nodes[node]
        kinds = self.faults.get(node, set())
        if "silent_node" in kinds:
            n.state.suspended.add(prop.block.id)
            n.deferred.pop(prop.block.id, None)
            return
        result = on_proposal(n.state, prop, self.now)
        self._record_store(node)
        if result is None:
            n.deferred[prop.block.id] = prop
            return
        if isinstance(result, FetchNeeded):
            n.deferred[prop.block.id] = prop
            ids = [i for i in result.ids if i not in n.fetch_sent]
            if ids:
                n.fetch_sent.update(ids)
                msg = Message(node, MessageKind.LEDGER_FETCH, encode_fetch(ids))
                self._send(node, GATEWAY, msg, "ids=" + ",".join(map(str, ids)))
            return
        n.deferred.pop(prop.block.id, None)
        approve = result.approve
        if "vote_flipper" in kinds:
            approve = not approve
        vote = Vote(result.block_id, approve, result.reason)
        msg = Message(node, MessageKind.VOTE, vote.payload())
        self._send(node, GATEWAY, msg,
                   f"block={vote.block_id} approve={int(approve)} reason={result.reason.name}")

    def _after_delivery(self, node: int, removed_any: bool = False):
        n = self.nodes[node]
        if n.state.queued_commits:
            removed = retry_commits(n.state, self.now)
            if removed:
                self._record_store(node)
                self._tamper(node)
        if n.deferred:
            self._consider_votes(node)
        self._arm(node)

    def _device_arrive(self, node: int, msg: Message):
        n = self.nodes[node]
        st = n.state
        if msg.kind is MessageKind.EVENT_REQUEST:
            out = on_transaction(st, msg)
            if out.status in ("buffered", "duplicate"):
                self._log(node, out.status, msg.kind.value, msg.uid)
            for ev in out.delivered:
                action = "own" if ev.sender == node else "deliver"
                self._log(node, action, "EventRequest", ev.uid,
                          detail=f"h={ev.handler} c={ev.chain} src={ev.sender}")
                for a in n.actions.get((ev.handler, ev.chain), ()):
                    self._fire(node, a, ev.chain)
            self._after_delivery(node)
        elif msg.kind is MessageKind.BLOCK_PROPOSAL:
            self._evaluate(node, Proposal.from_message(msg))
        elif msg.kind is MessageKind.BLOCK_COMMIT:
            block, status, seq = decode_commit(msg.payload)
            on_commit(st, block, status, seq, self.now)
            if status in (CommitStatus.COMMITTED, CommitStatus.REJECTED):
                n.deferred.pop(block.id, None)
                if not st.suspended:
                    n.fetch_sent.clear()
            if status in (CommitStatus.COMMITTED, CommitStatus.EXPIRED):
                freed = [h for h in block.transactions if h in n.own_pending]
                for h in freed:
                    n.own_pending.discard(h)
                if freed and n.queued_fires:
                    waiting, n.queued_fires = n.queued_fires, []
                    for h, c in waiting:
                        self._fire(node, h, c)
            self._record_store(node)
            self._tamper(node)
            self._after_delivery(node)
        elif msg.kind is MessageKind.LEDGER_REPLY:
            block, seq = decode_reply(msg.payload)
            on_ledger_reply(st, block, seq, self.now)
            self._record_store(node)
            self._tamper(node)
            if n.deferred:
                self._consider_votes(node)
        else:
            self._log(node, "error", msg.kind.value, msg.uid, detail="unexpected message")

    def _relevant(self, node: int, msg: Message) -> bool:
        st = self.nodes[node].state
        if msg.kind is MessageKind.EVENT_REQUEST:
            # associated senders tick this node's clock even for foreign events
            return msg.sender in st.clock or st.relevant(msg.payload[0])
        if msg.kind is MessageKind.BLOCK_COMMIT:
            block = decode_commit(msg.payload)[0]
            return any(st.relevant(h) for h in block.transactions)
        return True     # proposals and replies are addressed to this node

    def _sample(self):
        m = self.metrics
        for node in m.nodes:
            if node != GATEWAY:
                self._record_store(node)
            c = m.counters[node]
            m.samples.append((self.now, node) + tuple(c[k] for k in COUNTERS))

    # main loop
    def run(self, duration: float) -> RunResult:
        """Simulate ``duration`` seconds."""
        sc = self.scenario
        self.duration_ms = end = 1000.0 * duration
        scheduled = set(sc.schedule)
        for c in sc.chains:
            if c.chain_id in scheduled:
                for t in sc.schedule[c.chain_id]:
                    if 1000.0 * t <= end:
                        self._push(1000.0 * t, "activate", c.chain_id, False)
            else:
                lo, hi = sc.first_activation
                self._push(1000.0 * self.rng.uniform(lo, hi), "activate", c.chain_id, True)
        for h in sc.isolated:
            lo, hi = sc.isolated_interval
            self._push(1000.0 * self.rng.uniform(0, lo), "isolated", h)
        step = self.timing["sample_interval"]
        t = step
        while t <= end:
            self._push(t, "sample")
            t += step
        while self._heap:
            t, _, kind, args = heapq.heappop(self._heap)
            if t > end:
                break
            self.now = t
            try:
                self._dispatch(kind, args)
            except PROTOCOL_ERRORS as exc:
                self.metrics.gateway["protocol_errors"] += 1
                self._log(GATEWAY if kind == "gw_timer" else args[0] if args else GATEWAY,
                          "error", detail=f"{type(exc).__name__}: {exc}")
        self.now = end
        if not self.metrics.samples or self.metrics.samples[-1][0] != end:
            self._sample()
        self.metrics.gateway.update(self.gateway.stats)
        self.metrics.latencies = [(str(b), lat) for b, lat in self.gateway.latencies]
        return RunResult(sc, duration, self.metrics, self.gateway.ledger, self.trace,
                         self.gateway, {k: v.state for k, v in self.nodes.items()})

    def _dispatch(self, kind: str, args: tuple):
        if kind == "arrive":
            node, msg = args
            self.metrics.count(node, "receives")
            self._log(node, "recv", msg.kind.value, msg.uid, digest(msg.payload))
            if node == GATEWAY or self._relevant(node, msg):
                self.metrics.count(node, "relevant_receives")
                if node != GATEWAY and msg.kind is MessageKind.EVENT_REQUEST and msg.sender != node:
                    self.metrics.count(node, "ordering_receives")
            if node == GATEWAY:
                self._gateway_effects(self.gateway.receive(msg, self.now), msg)
            else:
                self._device_arrive(node, msg)
        elif kind == "gw_timer":
            (key,) = args
            self._gateway_effects(self.gateway.timer(key, self.now))
        elif kind == "propose":
            self._propose(args[0])
        elif kind == "activate":
            self._activate(*args)
        elif kind == "isolated":
            self._fire_isolated(args[0])
        elif kind == "sample":
            self._sample()
        else:
            raise ValueError(f"unknown simulator event {kind}")


def run(scenario: Scenario, duration: float) -> RunResult:
    """Simulate ``duration`` seconds of ``scenario``."""
    return Simulation(scenario).run(duration)
