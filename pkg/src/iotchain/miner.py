"""Per-node miner: causal delivery of relayed events, block assembly,
puzzle solving and voting.

Everything here is a function of the ``MinerState`` and the message at
hand; the simulator decides when to call what and carries the results.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .chains import DependencyMap
from .codec import (MAX_K_SLOTS, BlockId, CodecError, CommitStatus, Message,
                    MessageKind, TransactionBlock, VoteReason, decode_event_request,
                    encode_vote)
from .gateway import Proposal
from .ledger import LRU, EvictionReport, PartialLedger, admit_block
from .pow import PuzzleChallenge, check_solution, solve_puzzle
from .vclock import (Timestamp, VectorClock, concurrent, deliverable,
                     happened_before, is_duplicate, on_receive, on_validation)


class MinerError(Exception):
    pass


class MissingChallenge(MinerError):
    pass


@dataclass(frozen=True)
class PendingEvent:
    handler: int
    chain: int
    sender: int
    timestamp: Optional[Timestamp]
    uid: int = 0


@dataclass(frozen=True)
class TransactionOutcome:
    status: str                     # delivered, buffered, duplicate, ignored
    delivered: tuple = ()           # every event delivered by this call, in order


@dataclass(frozen=True)
class Vote:
    block_id: BlockId
    approve: bool
    reason: VoteReason = VoteReason.OK

    def payload(self) -> bytes:
        return encode_vote(self.block_id, self.approve, self.reason)


@dataclass(frozen=True)
class FetchNeeded:
    ids: tuple


@dataclass
class MinerState:
    id: int
    clock: VectorClock
    deps: DependencyMap
    scope: frozenset                            # handlers of this miner's chains
    partial: PartialLedger
    chains: frozenset = frozenset()
    roots: dict = field(default_factory=dict)   # handler -> (prime, root)
    challenges: dict = field(default_factory=dict)  # handler -> current PuzzleChallenge
    pending: list = field(default_factory=list)
    buffer: list = field(default_factory=list)  # (Message, handler, chain) awaiting delivery
    isolated: frozenset = frozenset()
    reserved: bool = False
    tips: dict = field(default_factory=dict)    # chain index -> latest committed block
    commit_index: dict = field(default_factory=dict)  # handler -> BlockId of latest commit
    queued_commits: list = field(default_factory=list)  # (block, seq) waiting for deliveries
    fetched: dict = field(default_factory=dict)  # BlockId -> block, for the round in progress
    suspended: set = field(default_factory=set)  # open rounds this miner is voting on
    outstanding: Optional[BlockId] = None
    stats: Counter = field(default_factory=Counter)

    @property
    def modmults(self) -> int:
        return self.stats["modmults"]

    def relevant(self, handler: int) -> bool:
        return handler in self.scope or (self.reserved and handler in self.isolated)

    def pending_for(self, handler: int) -> Optional[PendingEvent]:
        for ev in self.pending:
            if ev.handler == handler:
                return ev
        return None

    def can_propose(self) -> bool:
        return bool(self.pending) and not self.suspended and self.outstanding is None


def make_miner(node: int, peers: Iterable[int], deps: DependencyMap, scope: Iterable[int],
               roots: Mapping[int, tuple], chains: Iterable[int] = (), capacity: int = 20,
               cut: int = LRU, isolated: Iterable[int] = (), reserved: bool = False) -> MinerState:
    scope = frozenset(scope)
    return MinerState(
        id=node, clock=VectorClock.create(node, peers, count_receives=False), deps=deps,
        scope=scope, partial=PartialLedger(capacity, cut, scope), chains=frozenset(chains),
        roots=dict(roots), isolated=frozenset(isolated), reserved=reserved)


# -- delivery ----------------------------------------------------------------

def _record_issue(state: MinerState, handler: int, threshold: Optional[int]):
    if threshold is not None and handler in state.roots:
        p, r = state.roots[handler]
        state.challenges[handler] = PuzzleChallenge(p, r, threshold, handler)


def _admit_pending(state: MinerState, ev: PendingEvent):
    if state.relevant(ev.handler) and state.pending_for(ev.handler) is None:
        state.pending.append(ev)


def _drain_buffer(state: MinerState) -> list:
    """Deliver buffered messages that became deliverable, re-scanning in
    arrival order after every delivery."""
    out = []
    progress = True
    while progress:
        progress = False
        for i, (msg, handler, chain) in enumerate(state.buffer):
            if is_duplicate(state.clock, msg.timestamp):
                del state.buffer[i]
                state.stats["duplicates"] += 1
                progress = True
                break
            if deliverable(state.clock, msg.timestamp):
                del state.buffer[i]
                on_receive(state.clock, msg.timestamp)
                ev = PendingEvent(handler, chain, msg.sender, msg.timestamp, msg.uid)
                _admit_pending(state, ev)
                out.append(ev)
                progress = True
                break
    return out


def on_transaction(state: MinerState, msg: Message) -> TransactionOutcome:
    """Handle a relayed event request."""
    if msg.kind is not MessageKind.EVENT_REQUEST:
        raise ValueError(f"on_transaction got {msg.kind.value}")
    handler, chain, threshold = decode_event_request(msg.payload)
    _record_issue(state, handler, threshold)
    ts = msg.timestamp
    if handler in state.isolated:
        if not state.reserved:
            return TransactionOutcome("ignored")
        ev = PendingEvent(handler, chain, msg.sender, None, msg.uid)
        _admit_pending(state, ev)
        return TransactionOutcome("delivered", (ev,))
    if msg.sender == state.id:
        # own request came back: the gateway accepted it
        ev = PendingEvent(handler, chain, msg.sender, ts, msg.uid)
        _admit_pending(state, ev)
        return TransactionOutcome("delivered", (ev,))
    if ts is None or ts.sender not in state.clock:
        return TransactionOutcome("ignored")
    if is_duplicate(state.clock, ts):
        state.stats["duplicates"] += 1
        return TransactionOutcome("duplicate")
    if not deliverable(state.clock, ts):
        state.buffer.append((msg, handler, chain))
        state.stats["buffered"] += 1
        return TransactionOutcome("buffered")
    on_receive(state.clock, ts)
    ev = PendingEvent(handler, chain, msg.sender, ts, msg.uid)
    _admit_pending(state, ev)
    return TransactionOutcome("delivered", (ev,) + tuple(_drain_buffer(state)))


# -- block creation ----------------------------------------------------------

def _before(a: PendingEvent, b: PendingEvent) -> bool:
    return a.timestamp is not None and b.timestamp is not None \
        and happened_before(a.timestamp, b.timestamp)


def causal_sort(events: Sequence[PendingEvent]) -> list[PendingEvent]:
    """Stable linear extension: repeatedly take the earliest event with no
    unplaced predecessor."""
    remaining = list(events)
    out = []
    while remaining:
        for i, ev in enumerate(remaining):
            if not any(_before(o, ev) for o in remaining if o is not ev):
                break
        else:
            i = 0
        out.append(remaining.pop(i))
    return out


def _traceable(state: MinerState, handler: int, earlier: set) -> bool:
    if not state.deps.needs_trigger(handler):
        return True
    triggers = state.deps.triggers_of(handler)
    return bool(triggers & earlier) or any(t in state.commit_index for t in triggers)


def select_events(state: MinerState) -> list[PendingEvent]:
    """Events for the next block: the oldest event's chain plus events of
    other chains concurrent with everything chosen so far, at most one per
    K slot."""
    held = {h for b, _ in state.queued_commits for h in b.transactions}
    ordered = causal_sort([ev for ev in state.pending if ev.handler not in held])
    for lead_index, lead in enumerate(ordered):
        if _traceable(state, lead.handler, set()):
            break
    else:
        return []
    isolated_lead = lead.handler in state.isolated
    chosen: list[PendingEvent] = []
    skipped: list[PendingEvent] = list(ordered[:lead_index])
    for ev in ordered[lead_index:]:
        if len(chosen) == MAX_K_SLOTS:
            break
        ok = (ev.handler in state.isolated) == isolated_lead
        ok = ok and not any(_before(s, ev) for s in skipped)
        if ok and ev.chain != lead.chain:
            ok = all(c.timestamp is None or ev.timestamp is None
                     or concurrent(c.timestamp, ev.timestamp) for c in chosen)
        ok = ok and (isolated_lead or _traceable(state, ev.handler, {c.handler for c in chosen}))
        (chosen if ok else skipped).append(ev)
    return chosen


def try_create_block(state: MinerState, tick: float = 0) -> Optional[Proposal]:
    if not state.can_propose():
        return None
    events = select_events(state)
    if not events:
        return None
    c = events[0].chain
    tip = state.tips.get(c) or TransactionBlock.genesis(c)
    if tip.id.position == 255:
        state.stats["chain_full"] += 1
        return None
    block = tip.child([ev.handler for ev in events])
    ks = []
    for ev in events:
        challenge = state.challenges.get(ev.handler)
        if challenge is None:
            raise MissingChallenge(f"miner {state.id} holds no puzzle for event 0x{ev.handler:02x}")
        solution = solve_puzzle(challenge)
        state.stats["modmults"] += solution.modmults
        ks.append(solution.k)
    state.outstanding = block.id
    state.stats["proposals"] += 1
    return Proposal(block, tuple(ks), state.id)


# -- voting ------------------------------------------------------------------

def _find_trigger(state: MinerState, triggers: frozenset, tick: float) -> bool:
    for block in state.fetched.values():
        if triggers & set(block.transactions):
            return True
    for t in sorted(triggers):
        for bid in state.partial.find(t):
            try:
                state.partial.get(bid, tick)
                return True
            except CodecError:
                state.partial.drop(bid)
                state.stats["tamper_detected"] += 1
    return False


def on_proposal(state: MinerState, proposal: Proposal, tick: float = 0):
    """Returns a ``Vote``, a ``FetchNeeded`` listing trigger blocks to pull
    from the gateway, or None while block events are still undelivered."""
    block, ks = proposal.block, proposal.ks
    state.suspended.add(block.id)
    txs = block.transactions
    if len(ks) != len(txs):
        return Vote(block.id, False, VoteReason.BAD_PUZZLE)
    for h in txs:
        if h not in state.roots:
            return Vote(block.id, False, VoteReason.NO_ROOT)
    events = {}
    for h in txs:
        if h not in state.challenges:
            return None
        if state.relevant(h):
            ev = state.pending_for(h)
            if ev is None:
                return None
            events[h] = ev
    for h, k in zip(txs, ks):
        c = state.challenges[h]
        ok, mults = check_solution(c.prime, c.root, c.threshold, k)
        state.stats["modmults"] += mults
        if not ok:
            return Vote(block.id, False, VoteReason.BAD_PUZZLE)
    scoped = [events[h] for h in txs if h in events]
    for i, a in enumerate(scoped):
        for b in scoped[i + 1:]:
            if _before(b, a):
                return Vote(block.id, False, VoteReason.BAD_ORDER)
    for i, h in enumerate(txs):
        if h not in events or h in state.isolated or not state.deps.needs_trigger(h):
            continue
        triggers = state.deps.triggers_of(h)
        if triggers & set(txs[:i]) or _find_trigger(state, triggers, tick):
            continue
        known = sorted({state.commit_index[t] for t in triggers if t in state.commit_index},
                       key=lambda b: (b.chain_index, b.position))
        known = [b for b in known if b not in state.fetched]
        if known:
            state.stats["fetches"] += 1
            return FetchNeeded((known[-1],))
        return Vote(block.id, False, VoteReason.MISSING_TRIGGER)
    return Vote(block.id, True)


def on_ledger_reply(state: MinerState, block: TransactionBlock, seq: int, tick: float) -> EvictionReport:
    state.fetched[block.id] = block
    return admit_block(state.partial, block, state.deps, tick, order=seq)


# -- commits -----------------------------------------------------------------

def _events_delivered(state: MinerState, block: TransactionBlock) -> bool:
    return all(state.pending_for(h) is not None
               for h in block.transactions if state.relevant(h))


def _apply_commit(state: MinerState, block: TransactionBlock, seq: int, tick: float) -> list:
    txs = set(block.transactions)
    removed = [ev for ev in state.pending if ev.handler in txs]
    state.pending = [ev for ev in state.pending if ev.handler not in txs]
    counts = Counter(ev.sender for ev in removed
                     if ev.timestamp is not None and ev.sender in state.clock)
    on_validation(state.clock, counts)
    if any(h in state.scope for h in block.transactions):
        admit_block(state.partial, block, state.deps, tick, order=seq)
    return removed


def _end_round(state: MinerState, block_id: BlockId):
    state.suspended.discard(block_id)
    if state.outstanding == block_id:
        state.outstanding = None
    if not state.suspended:
        state.fetched.clear()


def on_commit(state: MinerState, block: TransactionBlock, status: CommitStatus = CommitStatus.COMMITTED,
              seq: int = 0, tick: float = 0) -> list:
    """Apply a gateway verdict. Returns the pending events it removed.

    A commit whose events this miner has not delivered yet is queued and
    applied by ``retry_commits`` once they arrive.
    """
    if status is CommitStatus.DISCARDED:
        if state.outstanding == block.id:
            state.outstanding = None
        return []
    if status is CommitStatus.REJECTED:
        _end_round(state, block.id)
        return []
    if status is CommitStatus.EXPIRED:
        dropped = [ev for ev in state.pending if ev.handler in block.transactions]
        state.pending = [ev for ev in state.pending if ev not in dropped]
        return dropped
    tip = state.tips.get(block.id.chain_index)
    if tip is None or tip.id.position < block.id.position:
        state.tips[block.id.chain_index] = block
    for h in block.transactions:
        state.commit_index[h] = block.id
    _end_round(state, block.id)
    if state.queued_commits or not _events_delivered(state, block):
        state.queued_commits.append((block, seq))
        return retry_commits(state, tick)
    return _apply_commit(state, block, seq, tick)


def retry_commits(state: MinerState, tick: float = 0) -> list:
    """Apply queued commits, oldest first, as far as deliveries allow."""
    removed = []
    while state.queued_commits:
        block, seq = state.queued_commits[0]
        if not _events_delivered(state, block):
            break
        state.queued_commits.pop(0)
        removed.extend(_apply_commit(state, block, seq, tick))
    return removed
