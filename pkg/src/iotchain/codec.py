"""Bit-exact wire formats: the 20-byte transaction block, message payloads,
and the 8-bit XOR hash used for block integrity.

Block layout (20 bytes)::

    [chain_index, position, block_hash, parent_hash, tx_hash, tx1 .. tx15]

Unused transaction slots are 0x00, so event handler 0 is reserved.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Optional, Sequence

BLOCK_SIZE = 20
MAX_TRANSACTIONS = 15
MAX_PAYLOAD = 30
MAX_K_SLOTS = 5
K_BYTES = 2
HEADER_SIZE = BLOCK_SIZE - MAX_TRANSACTIONS


class CodecError(ValueError):
    pass


class TooManyTransactions(CodecError):
    pass


class ReservedHandler(CodecError):
    pass


class BadLength(CodecError):
    pass


class HashMismatch(CodecError):
    """Stored hash does not match the recomputed XOR fold."""


class PayloadTooLarge(CodecError):
    pass


class BlockIdOverflow(CodecError):
    pass


def xor_hash(data: Iterable[int]) -> int:
    return reduce(lambda acc, b: acc ^ b, data, 0) & 0xFF


def check_handler(value: int) -> int:
    if not 1 <= value <= 255:
        raise ReservedHandler(f"event handler must be in 1..255, got {value}")
    return value


@dataclass(frozen=True, order=True)
class BlockId:
    chain_index: int
    position: int

    def __post_init__(self):
        for name in ("chain_index", "position"):
            v = getattr(self, name)
            if not 0 <= v <= 255:
                raise BlockIdOverflow(f"{name}={v} does not fit in 8 bits")

    def to_bytes(self) -> bytes:
        return bytes((self.chain_index, self.position))

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlockId":
        if len(data) != 2:
            raise BadLength(f"block id needs 2 bytes, got {len(data)}")
        return cls(data[0], data[1])

    def __str__(self):
        return f"{self.chain_index}:{self.position}"

    @classmethod
    def parse(cls, text: str) -> "BlockId":
        chain, _, pos = text.partition(":")
        return cls(int(chain, 0), int(pos, 0))


def _tx_bytes(transactions: Sequence[int]) -> bytes:
    return bytes(transactions) + bytes(MAX_TRANSACTIONS - len(transactions))


@dataclass(frozen=True)
class TransactionBlock:
    """A block of up to 15 one-byte event transactions.

    ``block_hash`` and ``tx_hash`` are derived from the other fields, so two
    blocks with the same id, parent and transactions compare equal.
    """

    id: BlockId
    parent_hash: int
    transactions: tuple = ()
    block_hash: int = field(init=False)
    tx_hash: int = field(init=False)

    def __post_init__(self):
        txs = tuple(self.transactions)
        if len(txs) > MAX_TRANSACTIONS:
            raise TooManyTransactions(
                f"{len(txs)} transactions exceed the {MAX_TRANSACTIONS}-slot limit")
        for h in txs:
            check_handler(h)
        if not 0 <= self.parent_hash <= 255:
            raise CodecError(f"parent_hash {self.parent_hash} is not 8-bit")
        object.__setattr__(self, "transactions", txs)
        tx_hash = xor_hash(_tx_bytes(txs))
        object.__setattr__(self, "tx_hash", tx_hash)
        object.__setattr__(
            self, "block_hash",
            xor_hash((self.id.chain_index, self.id.position, self.parent_hash, tx_hash))
            ^ xor_hash(_tx_bytes(txs)))

    @classmethod
    def genesis(cls, chain_index: int) -> "TransactionBlock":
        return cls(BlockId(chain_index, 0), parent_hash=0)

    def child(self, transactions: Sequence[int]) -> "TransactionBlock":
        if self.id.position == 255:
            raise BlockIdOverflow(f"chain {self.id.chain_index} is full")
        return TransactionBlock(
            BlockId(self.id.chain_index, self.id.position + 1),
            parent_hash=self.block_hash, transactions=tuple(transactions))

    def __len__(self):
        return len(self.transactions)


def encode_block(block: TransactionBlock) -> bytes:
    txs = _tx_bytes(block.transactions)
    tx_hash = xor_hash(txs)
    body = bytes((block.id.chain_index, block.id.position, block.parent_hash, tx_hash)) + txs
    out = bytes((block.id.chain_index, block.id.position, xor_hash(body),
                 block.parent_hash, tx_hash)) + txs
    assert len(out) == BLOCK_SIZE
    return out


def decode_block(data: bytes) -> TransactionBlock:
    if len(data) != BLOCK_SIZE:
        raise BadLength(f"block needs {BLOCK_SIZE} bytes, got {len(data)}")
    chain, pos, block_hash, parent, tx_hash = data[:HEADER_SIZE]
    slots = data[HEADER_SIZE:]
    if xor_hash(slots) != tx_hash:
        raise HashMismatch(f"tx_hash 0x{tx_hash:02x} != 0x{xor_hash(slots):02x}")
    expected = xor_hash(data[:2] + data[3:])
    if expected != block_hash:
        raise HashMismatch(f"block_hash 0x{block_hash:02x} != 0x{expected:02x}")
    # padding must be a suffix
    txs = bytes(slots).rstrip(b"\x00")
    if 0 in txs:
        raise ReservedHandler("zero slot inside transaction list")
    return TransactionBlock(BlockId(chain, pos), parent_hash=parent, transactions=tuple(txs))


class MessageKind(enum.Enum):
    EVENT_REQUEST = "EventRequest"
    BLOCK_PROPOSAL = "BlockProposal"
    VOTE = "Vote"
    BLOCK_COMMIT = "BlockCommit"
    LEDGER_FETCH = "LedgerFetch"
    LEDGER_REPLY = "LedgerReply"


@dataclass(frozen=True)
class Message:
    """Simulator envelope. Only ``payload`` is size-constrained; the
    timestamp travels in the control header."""

    sender: int
    kind: MessageKind
    payload: bytes = b""
    timestamp: Optional[object] = None
    uid: int = 0

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(
                f"{self.kind.value} payload is {len(self.payload)} bytes (max {MAX_PAYLOAD})")


# -- payload helpers ---------------------------------------------------------

def encode_event_request(handler: int, chain: int, threshold: Optional[int] = None) -> bytes:
    """Device request is ``[handler, chain]``; the gateway's relayed copy
    appends the puzzle threshold as a 4-byte big-endian integer."""
    check_handler(handler)
    out = bytes((handler, chain))
    if threshold is not None:
        out += struct.pack(">I", threshold)
    return out


def decode_event_request(payload: bytes) -> tuple[int, int, Optional[int]]:
    if len(payload) not in (2, 6):
        raise BadLength(f"event request payload has {len(payload)} bytes")
    threshold = struct.unpack(">I", payload[2:])[0] if len(payload) == 6 else None
    return payload[0], payload[1], threshold


def encode_proposal(block: TransactionBlock, ks: Sequence[int]) -> bytes:
    if len(ks) > MAX_K_SLOTS:
        raise TooManyTransactions(f"{len(ks)} K values exceed {MAX_K_SLOTS} slots")
    for k in ks:
        if not 0 <= k < 1 << 16:
            raise CodecError(f"K={k} does not fit in {K_BYTES} bytes")
    return encode_block(block) + b"".join(struct.pack(">H", k) for k in ks)


def decode_proposal(payload: bytes) -> tuple[TransactionBlock, list[int]]:
    rest = payload[BLOCK_SIZE:]
    if len(payload) < BLOCK_SIZE or len(rest) % K_BYTES:
        raise BadLength(f"proposal payload has {len(payload)} bytes")
    block = decode_block(payload[:BLOCK_SIZE])
    ks = [struct.unpack(">H", rest[i:i + 2])[0] for i in range(0, len(rest), 2)]
    return block, ks


class CommitStatus(enum.IntEnum):
    REJECTED = 0
    COMMITTED = 1
    DISCARDED = 2
    EXPIRED = 3     # coin released after a rejected round timed out


def encode_commit(block: TransactionBlock, status: CommitStatus, seq: int = 0) -> bytes:
    return encode_block(block) + bytes((int(status),)) + struct.pack(">H", seq)


def decode_commit(payload: bytes) -> tuple[TransactionBlock, CommitStatus, int]:
    if len(payload) != BLOCK_SIZE + 3:
        raise BadLength(f"commit payload has {len(payload)} bytes")
    block = decode_block(payload[:BLOCK_SIZE])
    status = CommitStatus(payload[BLOCK_SIZE])
    (seq,) = struct.unpack(">H", payload[BLOCK_SIZE + 1:])
    return block, status, seq


class VoteReason(enum.IntEnum):
    OK = 0
    BAD_PUZZLE = 1
    BAD_ORDER = 2
    MISSING_TRIGGER = 3
    NO_ROOT = 4


def encode_vote(block_id: BlockId, approve: bool, reason: VoteReason = VoteReason.OK) -> bytes:
    return block_id.to_bytes() + bytes((int(approve), int(reason)))


def decode_vote(payload: bytes) -> tuple[BlockId, bool, VoteReason]:
    if len(payload) != 4:
        raise BadLength(f"vote payload has {len(payload)} bytes")
    return BlockId.from_bytes(payload[:2]), bool(payload[2]), VoteReason(payload[3])


def encode_fetch(ids: Sequence[BlockId]) -> bytes:
    return b"".join(i.to_bytes() for i in ids)


def decode_fetch(payload: bytes) -> list[BlockId]:
    if len(payload) % 2:
        raise BadLength("fetch payload must hold whole 2-byte ids")
    return [BlockId.from_bytes(payload[i:i + 2]) for i in range(0, len(payload), 2)]


def encode_reply(block: TransactionBlock, seq: int) -> bytes:
    return encode_block(block) + struct.pack(">H", seq)


def decode_reply(payload: bytes) -> tuple[TransactionBlock, int]:
    if len(payload) != BLOCK_SIZE + 2:
        raise BadLength(f"reply payload has {len(payload)} bytes")
    return decode_block(payload[:BLOCK_SIZE]), struct.unpack(">H", payload[BLOCK_SIZE:])[0]
