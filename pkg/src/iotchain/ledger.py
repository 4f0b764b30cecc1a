"""Full gateway ledger, the miners' bounded partial ledger, and the
flat-file ledger format.

A partial ledger keeps at most ``capacity`` blocks. With a cut limit ``C > 1``
it retains only blocks whose related events form a partial consistent cut of
at most ``C`` events; ``C == 1`` is plain LRU replacement up to capacity.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

from .chains import DependencyMap
from .codec import (BLOCK_SIZE, HEADER_SIZE, BlockId, CodecError, TransactionBlock, decode_block,
                    encode_block)

LRU = 1
RECORD_SIZE = BLOCK_SIZE + 1


class LedgerError(Exception):
    pass


class ParentMismatch(LedgerError):
    pass


class PositionGap(LedgerError):
    pass


class NotFound(LedgerError, KeyError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"blocks not in ledger: {', '.join(map(str, self.missing))}")


def is_partial_consistent_cut(blocks: Iterable[TransactionBlock], deps: DependencyMap,
                              scope: Optional[set] = None) -> bool:
    """Every related event must be a chain start, need no trigger, or have one
    of its triggers earlier in the sequence. Events outside ``scope`` are not
    checked but still count as present."""
    seen: set[int] = set()
    for block in blocks:
        for h in block.transactions:
            if (scope is None or h in scope) and deps.needs_trigger(h):
                if not deps.triggers_of(h) & seen:
                    return False
            seen.add(h)
    return True


# -- gateway ledger ----------------------------------------------------------

@dataclass
class Ledger:
    chains: dict = field(default_factory=dict)      # chain_index -> [TransactionBlock]
    seq: dict = field(default_factory=dict)         # BlockId -> commit sequence
    handler_chains: dict = field(default_factory=dict)  # handler -> {chain_index}
    next_seq: int = 0

    def ensure_chain(self, chain_index: int) -> TransactionBlock:
        if chain_index not in self.chains:
            genesis = TransactionBlock.genesis(chain_index)
            self.chains[chain_index] = [genesis]
            self._record(genesis)
        return self.chains[chain_index][0]

    def _record(self, block: TransactionBlock):
        self.seq[block.id] = self.next_seq
        self.next_seq += 1
        for h in block.transactions:
            self.handler_chains.setdefault(h, set()).add(block.id.chain_index)

    def tip(self, chain_index: int) -> TransactionBlock:
        return self.ensure_chain(chain_index) if chain_index not in self.chains \
            else self.chains[chain_index][-1]

    def get(self, block_id: BlockId) -> TransactionBlock:
        chain = self.chains.get(block_id.chain_index, [])
        if block_id.position >= len(chain):
            raise NotFound([block_id])
        return chain[block_id.position]

    def __contains__(self, block_id):
        chain = self.chains.get(block_id.chain_index, [])
        return block_id.position < len(chain)

    def blocks(self) -> list[TransactionBlock]:
        """All blocks in commit order."""
        out = [b for chain in self.chains.values() for b in chain]
        return sorted(out, key=lambda b: self.seq[b.id])

    def __len__(self):
        return sum(len(c) for c in self.chains.values())

    def committed_count(self) -> int:
        return sum(len(c) - 1 for c in self.chains.values())


def append_block(ledger: Ledger, block: TransactionBlock) -> Ledger:
    c = block.id.chain_index
    if block.id.position == 0 and c not in ledger.chains:
        if block != TransactionBlock.genesis(c):
            raise ParentMismatch(f"block {block.id} is not the genesis block of chain {c}")
        ledger.ensure_chain(c)
        return ledger
    tip = ledger.tip(c)
    if block.id.position != tip.id.position + 1:
        raise PositionGap(f"block {block.id} does not follow tip {tip.id}")
    if block.parent_hash != tip.block_hash:
        raise ParentMismatch(
            f"block {block.id} parent 0x{block.parent_hash:02x} != tip hash 0x{tip.block_hash:02x}")
    ledger.chains[c].append(block)
    ledger._record(block)
    return ledger


def fetch_blocks(ledger: Ledger, ids: Sequence[BlockId]) -> list[TransactionBlock]:
    missing = [i for i in ids if i not in ledger]
    if missing:
        raise NotFound(missing)
    return [ledger.get(i) for i in ids]


# -- flat file ---------------------------------------------------------------

def dump_ledger(ledger: Ledger) -> bytes:
    return b"".join(bytes((b.id.chain_index,)) + encode_block(b) for b in ledger.blocks())


def save_ledger(ledger: Ledger, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_ledger(ledger))


def iter_records(data: bytes) -> Iterator[tuple[int, bytes]]:
    if len(data) % RECORD_SIZE:
        raise CodecError(f"ledger file length {len(data)} is not a multiple of {RECORD_SIZE}")
    for off in range(0, len(data), RECORD_SIZE):
        yield data[off], data[off + 1:off + RECORD_SIZE]


def load_ledger(data: bytes) -> Ledger:
    ledger = Ledger()
    for i, (tag, raw) in enumerate(iter_records(data)):
        block = decode_block(raw)
        if tag != block.id.chain_index:
            raise LedgerError(f"record {i}: tag {tag} != chain index {block.id.chain_index}")
        append_block(ledger, block)
    return ledger


@dataclass
class AuditReport:
    ok: bool
    records: int
    failed_record: Optional[int] = None
    failed_block: Optional[str] = None
    error: str = ""


def verify_ledger(source) -> AuditReport:
    """Decode every record and re-check hashes and parent links.
    ``source`` is a path or the raw file bytes."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = bytes(source)
    ledger = Ledger()
    count = 0
    try:
        records = list(iter_records(data))
    except CodecError as exc:
        return AuditReport(False, 0, 0, None, str(exc))
    for i, (tag, raw) in enumerate(records):
        label = f"{raw[0]}:{raw[1]}"
        try:
            block = decode_block(raw)
            if tag != block.id.chain_index:
                raise LedgerError(f"tag {tag} != chain index {block.id.chain_index}")
            append_block(ledger, block)
        except (CodecError, LedgerError) as exc:
            return AuditReport(False, count, i, label, f"{type(exc).__name__}: {exc}")
        count += 1
    return AuditReport(True, count)


# -- partial ledger ----------------------------------------------------------

@dataclass
class StoredBlock:
    data: bytes
    order: int
    last_use: int
    _block: Optional[TransactionBlock] = field(default=None, repr=False)

    def block(self) -> TransactionBlock:
        if self._block is None:
            self._block = decode_block(self.data)
        return self._block

    def overwrite(self, data: bytes):
        self.data = bytes(data)
        self._block = None


@dataclass
class EvictionReport:
    admitted: BlockId
    evicted: list = field(default_factory=list)
    fallback: bool = False

    @property
    def retained(self) -> bool:
        return self.admitted not in self.evicted


@dataclass
class PartialLedger:
    capacity: int = 20
    cut: int = LRU
    scope: Optional[frozenset] = None
    store: dict = field(default_factory=dict)   # BlockId -> StoredBlock

    def __post_init__(self):
        if self.capacity < 1 or self.cut < 1:
            raise ValueError("capacity and cut limit must be positive")
        if self.scope is not None:
            self.scope = frozenset(self.scope)

    def __contains__(self, block_id):
        return block_id in self.store

    def __len__(self):
        return len(self.store)

    @property
    def bytes_stored(self) -> int:
        return len(self.store) * BLOCK_SIZE

    def get(self, block_id: BlockId, tick: Optional[int] = None) -> TransactionBlock:
        """Decode a stored block; raises ``HashMismatch`` if it was tampered."""
        entry = self.store[block_id]
        if tick is not None:
            entry.last_use = tick
        return entry.block()

    def touch(self, block_id: BlockId, tick: int):
        self.store[block_id].last_use = tick

    def drop(self, block_id: BlockId):
        self.store.pop(block_id, None)

    def _readable(self, ids) -> list[tuple[BlockId, TransactionBlock]]:
        out = []
        for i in ids:
            try:
                out.append((i, self.store[i].block()))
            except CodecError:
                continue
        return out

    def ordered(self, ids: Optional[Iterable[BlockId]] = None) -> list[TransactionBlock]:
        ids = self.store if ids is None else ids
        keyed = sorted(ids, key=lambda i: (self.store[i].order, i))
        return [b for _, b in self._readable(keyed)]

    def related(self, block: TransactionBlock) -> list[int]:
        if self.scope is None:
            return list(block.transactions)
        return [h for h in block.transactions if h in self.scope]

    def cut_events(self, ids: Optional[Iterable[BlockId]] = None) -> int:
        ids = self.store if ids is None else ids
        return sum(len(self.related(b)) for _, b in self._readable(ids))

    def consistent(self, deps: DependencyMap, ids: Optional[Iterable[BlockId]] = None) -> bool:
        """Each chain-of-blocks is checked on its own."""
        by_chain: dict[int, list[TransactionBlock]] = {}
        for b in self.ordered(ids):
            by_chain.setdefault(b.id.chain_index, []).append(b)
        return all(is_partial_consistent_cut(bs, deps, self.scope) for bs in by_chain.values())

    def find(self, handler: int) -> list[BlockId]:
        """Stored blocks whose raw slots hold ``handler``, most recent first.
        Matching is on the stored bytes so that a later ``get`` exposes any
        tampering instead of the block being silently skipped."""
        hits = [(e.order, bid) for bid, e in self.store.items()
                if handler in e.data[HEADER_SIZE:]]
        return [bid for _, bid in sorted(hits, reverse=True)]


def admit_block(pl: PartialLedger, block: TransactionBlock, deps: DependencyMap,
                tick: int, order: Optional[int] = None) -> EvictionReport:
    """Store a validated block, evicting as needed.

    Under a cut policy the victim is the least recently used block whose
    removal keeps the remaining set consistent; if no such block exists the
    least recently used block goes regardless, and eviction continues until
    the retained set is a consistent cut within the limits.
    """
    report = EvictionReport(block.id)
    if block.id in pl.store:
        pl.touch(block.id, tick)
        return report
    pl.store[block.id] = StoredBlock(encode_block(block), tick if order is None else order, tick)

    def lru(candidates):
        return min(candidates, key=lambda i: (pl.store[i].last_use, pl.store[i].order, i))

    if pl.cut == LRU:
        while len(pl.store) > pl.capacity:
            victim = lru(pl.store)
            pl.drop(victim)
            report.evicted.append(victim)
        return report

    def within_limits(ids):
        events = sum(len(pl.related(readable[i])) for i in ids if i in readable)
        return len(ids) <= pl.capacity and events <= pl.cut

    # decode once; unreadable blocks count for nothing, as in ``consistent``
    readable = dict(pl._readable(pl.store))
    keyed = sorted(readable, key=lambda i: (pl.store[i].order, i))

    def chain_ok(ids, chain):
        blocks = [readable[i] for i in keyed if i in ids and i.chain_index == chain]
        return is_partial_consistent_cut(blocks, deps, pl.scope)

    ids = set(pl.store)
    while True:
        ok = {i.chain_index: True for i in ids}
        for c in ok:
            ok[c] = chain_ok(ids, c)
        if within_limits(ids) and all(ok.values()):
            break
        # removing a block only changes its own chain's verdict
        candidates = [i for i in ids
                      if all(v for c, v in ok.items() if c != i.chain_index)
                      and chain_ok(ids - {i}, i.chain_index)]
        if candidates:
            victim = lru(candidates)
        else:
            victim = lru(ids)
            report.fallback = True
        ids.discard(victim)
        pl.drop(victim)
        report.evicted.append(victim)
    return report
