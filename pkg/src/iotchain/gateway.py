"""The trusted hub: coin bits, FIFO relay, miner identification, puzzle
issuance and the quorum vote that admits blocks to the full ledger.

``Gateway`` is a plain state machine. It never touches the clock or the
network directly; every handler returns a list of ``Send`` and ``Timer``
effects for the caller to schedule.
"""

from __future__ import annotations

import enum
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .codec import (BlockId, CodecError, CommitStatus, Message, MessageKind, TransactionBlock,
                    decode_event_request, decode_fetch, decode_proposal, decode_vote,
                    encode_commit, encode_event_request, encode_proposal, encode_reply)
from .ledger import Ledger, append_block
from .pow import PuzzleChallenge, check_solution, draw_threshold

GATEWAY = 0
BROADCAST = "all"
QUORUM = Fraction(51, 100)


class GatewayError(Exception):
    pass


class UnknownEvent(GatewayError, KeyError):
    pass


class NoEligibleMiners(GatewayError):
    pass


# -- coins -------------------------------------------------------------------

@dataclass
class CoinRegistry:
    bits: dict = field(default_factory=dict)        # handler -> 0 spendable / 1 spent
    transitions: Counter = field(default_factory=Counter)

    @classmethod
    def from_handlers(cls, handlers: Iterable[int]) -> "CoinRegistry":
        return cls({h: 0 for h in sorted(set(handlers))})

    def _bit(self, handler: int) -> int:
        if handler not in self.bits:
            raise UnknownEvent(f"event 0x{handler:02x} is not registered")
        return self.bits[handler]

    def spend(self, handler: int) -> bool:
        if self._bit(handler):
            return False
        self.bits[handler] = 1
        self.transitions[(0, 1)] += 1
        return True

    def release(self, handler: int):
        if self._bit(handler):
            self.bits[handler] = 0
            self.transitions[(1, 0)] += 1

    def is_spent(self, handler: int) -> bool:
        return bool(self._bit(handler))

    def __len__(self):
        return len(self.bits)


def handle_event_request(reg: CoinRegistry, event: int) -> bool:
    """Accept a request iff its coin is unspent; a set bit means replay."""
    return reg.spend(event)


# -- relay -------------------------------------------------------------------

@dataclass
class OutboundQueue:
    """Per-receiver outbound links from one sender. Under ``fifo`` a message
    never overtakes an earlier one on the same link; equal times are left to
    the event loop's enqueue-sequence tie break."""

    receivers: Sequence[int]
    delay: Callable[[int], float]
    fifo: bool = True
    last: dict = field(default_factory=dict)

    def schedule(self, now: float, receiver: int) -> float:
        t = now + self.delay(receiver)
        if self.fifo:
            t = max(t, self.last.get(receiver, t))
            self.last[receiver] = t
        return t


def broadcast_fifo(queue: OutboundQueue, msg: Message, now: float = 0.0):
    """Delivery schedule ``[(time, receiver, msg), ...]`` for every node."""
    return [(queue.schedule(now, r), r, msg) for r in queue.receivers]


# -- miners and rounds ---------------------------------------------------------

@dataclass(frozen=True)
class MinerRoster:
    associations: Mapping[int, frozenset] = field(default_factory=dict)
    reservations: frozenset = frozenset()

    @classmethod
    def from_chains(cls, chains, reservations: Iterable[int] = ()) -> "MinerRoster":
        assoc: dict[int, set] = {}
        for c in chains:
            for h in c.events:
                assoc.setdefault(h, set()).update(c.members)
        return cls({h: frozenset(m) for h, m in assoc.items()}, frozenset(reservations))

    def associated(self, handler: int) -> frozenset:
        return self.associations.get(handler, frozenset()) or self.reservations


def identify_miners(roster: MinerRoster, block: TransactionBlock) -> frozenset:
    miners: set[int] = set()
    for h in block.transactions:
        miners |= roster.associated(h)
    miners.discard(GATEWAY)
    return frozenset(miners)


def quorum(n: int, fraction: Fraction = QUORUM) -> int:
    """Smallest approval count that commits a round of ``n`` eligible miners."""
    return math.ceil(Fraction(fraction) * n)


@dataclass(frozen=True)
class Proposal:
    block: TransactionBlock
    ks: tuple
    proposer: int

    def payload(self) -> bytes:
        return encode_proposal(self.block, self.ks)

    @classmethod
    def from_message(cls, msg: Message) -> "Proposal":
        block, ks = decode_proposal(msg.payload)
        return cls(block, tuple(ks), msg.sender)


class RoundStatus(enum.Enum):
    OPEN = "open"
    COMMITTED = "committed"
    REJECTED = "rejected"


@dataclass
class ConsensusRound:
    proposal: Proposal
    eligible: frozenset
    votes: dict = field(default_factory=dict)
    status: RoundStatus = RoundStatus.OPEN
    gateway_verifies: bool = False
    fraction: Fraction = QUORUM
    opened_at: float = 0.0

    @property
    def needed(self) -> int:
        return quorum(len(self.eligible), self.fraction)

    @property
    def approvals(self) -> int:
        return sum(1 for v in self.votes.values() if v)

    def record_vote(self, node: int, approve: bool) -> bool:
        """Returns False for votes from outside the eligible set or repeats."""
        if node not in self.eligible or node in self.votes:
            return False
        self.votes[node] = bool(approve)
        return True

    def settled(self) -> bool:
        """True once the remaining votes cannot change the outcome."""
        missing = len(self.eligible) - len(self.votes)
        return self.approvals >= self.needed or self.approvals + missing < self.needed


def select_proposal(proposals: Sequence[Proposal], rng: random.Random) -> Proposal:
    """Most events wins; ties are broken by a seeded draw."""
    if not proposals:
        raise ValueError("no proposals to choose from")
    best = max(len(p.block) for p in proposals)
    tied = sorted((p for p in proposals if len(p.block) == best),
                  key=lambda p: (p.proposer, p.block.id, p.ks))
    return tied[0] if len(tied) == 1 else rng.choice(tied)


def gateway_check(round: ConsensusRound, challenges: Mapping[int, PuzzleChallenge]) -> bool:
    """The gateway's own puzzle check for a lone reserved miner."""
    block, ks = round.proposal.block, round.proposal.ks
    if len(ks) != len(block.transactions):
        return False
    for h, k in zip(block.transactions, ks):
        c = challenges.get(h)
        if c is None or not check_solution(c.prime, c.root, c.threshold, k)[0]:
            return False
    return True


def run_consensus(round: ConsensusRound, reg: CoinRegistry, ledger: Ledger,
                  challenges: Optional[Mapping[int, PuzzleChallenge]] = None) -> RoundStatus:
    """Decide a round from the votes recorded so far; silence counts as reject."""
    if not round.eligible:
        raise NoEligibleMiners(f"no miner can validate block {round.proposal.block.id}")
    if round.gateway_verifies:
        verdict = gateway_check(round, challenges or {})
        for m in round.eligible:
            round.votes.setdefault(m, verdict)
    if round.approvals >= round.needed:
        append_block(ledger, round.proposal.block)
        for h in round.proposal.block.transactions:
            reg.release(h)
        round.status = RoundStatus.COMMITTED
    else:
        round.status = RoundStatus.REJECTED
    return round.status


# -- the state machine -------------------------------------------------------

@dataclass(frozen=True)
class Send:
    to: object          # node id, BROADCAST, or a frozenset of node ids
    msg: Message


@dataclass(frozen=True)
class Timer:
    delay: float
    key: tuple


@dataclass
class GatewayConfig:
    proposal_window: float = 10.0
    vote_timeout: float = 250.0
    coin_timeout: float = 2000.0
    quorum: Fraction = QUORUM
    max_factor: Optional[int] = 1


@dataclass
class Gateway:
    registry: CoinRegistry
    roster: MinerRoster
    assignments: Mapping[int, Mapping[int, int]]    # handler -> miner -> root
    primes: Mapping[int, int]                       # handler -> prime
    rng: random.Random
    config: GatewayConfig = field(default_factory=GatewayConfig)
    ledger: Ledger = field(default_factory=Ledger)
    isolated: frozenset = frozenset()
    thresholds: dict = field(default_factory=dict)  # handler -> current threshold
    issuance: dict = field(default_factory=dict)    # handler -> issue count
    issued_at: dict = field(default_factory=dict)   # handler -> relay time
    rounds: dict = field(default_factory=dict)      # chain index -> ConsensusRound
    windows: dict = field(default_factory=dict)     # chain index -> [Proposal]
    stats: Counter = field(default_factory=Counter)
    latencies: list = field(default_factory=list)   # (block id, ms from first relay to commit)
    log: list = field(default_factory=list)         # (kind, detail) notes for the trace
    audit: list = field(default_factory=list)       # (block, ks, {handler: threshold}) per commit

    def _note(self, kind: str, detail: str):
        self.log.append((kind, detail))

    def drain_log(self) -> list:
        out, self.log = self.log, []
        return out

    # event requests
    def on_event_request(self, msg: Message, now: float) -> list:
        handler, chain, _ = decode_event_request(msg.payload)
        if msg.timestamp is None:
            # a device only sends unstamped requests for a coin it knows is spent
            self.stats["replays_rejected"] += 1
            self._note("replay", f"h={handler} c={chain} src={msg.sender}")
            return []
        try:
            accepted = handle_event_request(self.registry, handler)
        except UnknownEvent as exc:
            self.stats["unknown_events"] += 1
            self._note("error", str(exc))
            return []
        if not accepted:
            self.stats["requests_rejected"] += 1
            self._note("reject", f"h={handler} c={chain} src={msg.sender}")
            return []
        p = self.primes[handler]
        roots = self.assignments[handler].values()
        threshold = draw_threshold(p, roots, self.rng, self.config.max_factor)
        self.thresholds[handler] = threshold
        self.issuance[handler] = self.issuance.get(handler, 0) + 1
        self.issued_at[handler] = now
        self.stats["requests_accepted"] += 1
        relay = Message(msg.sender, MessageKind.EVENT_REQUEST,
                        encode_event_request(handler, chain, threshold), msg.timestamp)
        return [Send(BROADCAST, relay)]

    # proposals
    def _busy_handlers(self) -> set:
        busy = set()
        for r in self.rounds.values():
            busy.update(r.proposal.block.transactions)
        return busy

    def _peek_tip(self, chain_index: int) -> TransactionBlock:
        chain = self.ledger.chains.get(chain_index)
        return chain[-1] if chain else TransactionBlock.genesis(chain_index)

    def _fresh(self, p: Proposal, busy: set) -> bool:
        block = p.block
        tip = self._peek_tip(block.id.chain_index)
        if block.id.position != tip.id.position + 1 or block.parent_hash != tip.block_hash:
            return False
        if not block.transactions or len(p.ks) != len(block.transactions):
            return False
        for h in block.transactions:
            if h not in self.registry.bits or not self.registry.bits[h] or h in busy:
                return False
        return True

    def _discard(self, p: Proposal) -> Send:
        self.stats["proposals_discarded"] += 1
        msg = Message(GATEWAY, MessageKind.BLOCK_COMMIT,
                      encode_commit(p.block, CommitStatus.DISCARDED))
        return Send(p.proposer, msg)

    def on_proposal(self, msg: Message, now: float) -> list:
        try:
            p = Proposal.from_message(msg)
        except CodecError as exc:
            self.stats["malformed"] += 1
            self._note("error", f"malformed proposal from {msg.sender}: {exc}")
            return []
        self.stats["proposals"] += 1
        c = p.block.id.chain_index
        if c in self.rounds or not self._fresh(p, self._busy_handlers()):
            return [self._discard(p)]
        window = self.windows.setdefault(c, [])
        window.append(p)
        if len(window) == 1:
            return [Timer(self.config.proposal_window, ("window", c))]
        return []

    def close_window(self, c: int, now: float) -> list:
        window = self.windows.pop(c, [])
        if not window:
            return []
        busy = self._busy_handlers()
        fresh = [p for p in window if c not in self.rounds and self._fresh(p, busy)]
        out = []
        winner = select_proposal(fresh, self.rng) if fresh else None
        for p in window:
            if p is not winner:
                out.append(self._discard(p))
        if winner is None:
            return out
        eligible = identify_miners(self.roster, winner.block)
        if not eligible:
            self._note("error", f"no eligible miners for {winner.block.id}")
            return out + [self._discard(winner)]
        lone = (len(eligible) == 1 and eligible == self.roster.reservations
                and all(h in self.isolated for h in winner.block.transactions))
        rnd = ConsensusRound(winner, eligible, gateway_verifies=lone,
                             fraction=self.config.quorum, opened_at=now)
        self.rounds[c] = rnd
        self.stats["rounds"] += 1
        if lone:
            return out + self._finalize(c, now)
        relay = Message(winner.proposer, MessageKind.BLOCK_PROPOSAL, winner.payload())
        return out + [Send(eligible, relay), Timer(self.config.vote_timeout, ("vote", c, winner.block.id))]

    # votes
    def on_vote(self, msg: Message, now: float) -> list:
        block_id, approve, reason = decode_vote(msg.payload)
        rnd = self.rounds.get(block_id.chain_index)
        if rnd is None or rnd.proposal.block.id != block_id:
            self.stats["late_votes"] += 1
            return []
        if not rnd.record_vote(msg.sender, approve):
            return []
        if not approve:
            self.stats[f"reject_{reason.name.lower()}"] += 1
        return self._finalize(block_id.chain_index, now) if rnd.settled() else []

    def vote_timeout(self, c: int, block_id: BlockId, now: float) -> list:
        rnd = self.rounds.get(c)
        if rnd is None or rnd.proposal.block.id != block_id:
            return []
        self.stats["vote_timeouts"] += 1
        return self._finalize(c, now)

    def _lone_challenges(self, rnd: ConsensusRound) -> dict:
        (miner,) = rnd.eligible
        out = {}
        for h in rnd.proposal.block.transactions:
            root = self.assignments.get(h, {}).get(miner)
            if root is not None and h in self.thresholds:
                out[h] = PuzzleChallenge(self.primes[h], root, self.thresholds[h], h)
        return out

    def _finalize(self, c: int, now: float) -> list:
        rnd = self.rounds.pop(c)
        block = rnd.proposal.block
        challenges = self._lone_challenges(rnd) if rnd.gateway_verifies else None
        status = run_consensus(rnd, self.registry, self.ledger, challenges)
        if status is RoundStatus.COMMITTED:
            self.stats["commits"] += 1
            first = min(self.issued_at.get(h, now) for h in block.transactions)
            self.latencies.append((block.id, now - first))
            self.audit.append((block, rnd.proposal.ks,
                               {h: self.thresholds.get(h) for h in block.transactions}))
            seq = self.ledger.seq[block.id] & 0xFFFF
            msg = Message(GATEWAY, MessageKind.BLOCK_COMMIT,
                          encode_commit(block, CommitStatus.COMMITTED, seq))
            return [Send(BROADCAST, msg)]
        self.stats["rounds_rejected"] += 1
        msg = Message(GATEWAY, MessageKind.BLOCK_COMMIT, encode_commit(block, CommitStatus.REJECTED))
        stamp = tuple((h, self.issuance.get(h, 0)) for h in block.transactions)
        return [Send(BROADCAST, msg), Timer(self.config.coin_timeout, ("coin", block, stamp))]

    def coin_timeout(self, block: TransactionBlock, stamp: tuple, now: float) -> list:
        """Release coins still held by the events of a rejected round."""
        busy = self._busy_handlers() | {h for w in self.windows.values()
                                        for p in w for h in p.block.transactions}
        expired = [h for h, n in stamp
                   if self.registry.bits.get(h) and self.issuance.get(h) == n and h not in busy]
        if not expired:
            return []
        for h in expired:
            self.registry.release(h)
        self.stats["coins_expired"] += len(expired)
        notice = TransactionBlock(block.id, block.parent_hash, tuple(expired))
        msg = Message(GATEWAY, MessageKind.BLOCK_COMMIT, encode_commit(notice, CommitStatus.EXPIRED))
        return [Send(BROADCAST, msg)]

    # ledger fetch
    def on_fetch(self, msg: Message, now: float) -> list:
        out = []
        for block_id in decode_fetch(msg.payload):
            if block_id not in self.ledger:
                self._note("error", f"fetch of unknown block {block_id} by {msg.sender}")
                continue
            block = self.ledger.get(block_id)
            reply = Message(GATEWAY, MessageKind.LEDGER_REPLY,
                            encode_reply(block, self.ledger.seq[block_id] & 0xFFFF))
            out.append(Send(msg.sender, reply))
        self.stats["fetches"] += 1
        return out

    def receive(self, msg: Message, now: float) -> list:
        handlers = {
            MessageKind.EVENT_REQUEST: self.on_event_request,
            MessageKind.BLOCK_PROPOSAL: self.on_proposal,
            MessageKind.VOTE: self.on_vote,
            MessageKind.LEDGER_FETCH: self.on_fetch,
        }
        handler = handlers.get(msg.kind)
        if handler is None:
            self._note("error", f"unexpected {msg.kind.value} from {msg.sender}")
            return []
        return handler(msg, now)

    def timer(self, key: tuple, now: float) -> list:
        kind = key[0]
        if kind == "window":
            return self.close_window(key[1], now)
        if kind == "vote":
            return self.vote_timeout(key[1], key[2], now)
        if kind == "coin":
            return self.coin_timeout(key[1], key[2], now)
        raise ValueError(f"unknown gateway timer {key!r}")
