"""Packet header and opcodes.

Header layout, big-endian, 40 bytes::

    magic(2) version(1) opcode(1) pid(4) request_id(8) retry_of(8)
    va(8) total_len(4) frag_seq(2) frag_count(2)

Responses reuse the header with ``opcode | 0x80`` followed by one status
byte, then the payload. ``va`` of a fragment is the address its own
payload starts at, so fragments can be applied independently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum

from .errors import Status

MAGIC = 0xC110
VERSION = 1
HEADER = struct.Struct(">HBBIQQQIHH")
HEADER_SIZE = HEADER.size
RESPONSE_BIT = 0x80
DEFAULT_MTU = 1500


class Op(IntEnum):
    READ = 0x01
    WRITE = 0x02
    FAA = 0x03
    CAS = 0x04
    TAS = 0x05
    LOCK = 0x06
    UNLOCK = 0x07
    FENCE = 0x08
    PING = 0x09
    ALLOC = 0x10
    FREE = 0x11
    ASSIGN = 0x20
    HOLD = 0x21
    RESUME = 0x22
    MIGRATE = 0x23
    MIGRATE_DATA = 0x24
    REPORT = 0x25


EXT_BASE = 0x40
ATOMIC_OPS = frozenset({Op.FAA, Op.CAS, Op.TAS})
DATA_OPS = frozenset({Op.READ, Op.WRITE}) | ATOMIC_OPS
SYNC_OPS = frozenset({Op.LOCK, Op.UNLOCK, Op.FENCE})
META_OPS = frozenset({Op.ALLOC, Op.FREE})


def ext(n: int) -> int:
    if not 0 <= n < 0x40:
        raise ValueError(f"extension number {n} out of range")
    return EXT_BASE + n


def is_ext(opcode: int) -> bool:
    return EXT_BASE <= opcode < RESPONSE_BIT


class WireError(ValueError):
    pass


@dataclass
class Packet:
    src: int
    dst: int
    opcode: int
    pid: int = 0
    request_id: int = 0
    retry_of: int = 0
    va: int = 0
    total_len: int = 0
    frag_seq: int = 0
    frag_count: int = 1
    payload: bytes = b""
    status: Status | None = None
    corrupted: bool = False
    sent_at: int = 0
    delivered_at: int = 0
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def is_response(self) -> bool:
        return self.status is not None

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + (1 if self.status is not None else 0) + len(self.payload)

    @property
    def root_id(self) -> int:
        """Id of the original request this one (re)transmits."""
        return self.retry_of or self.request_id

    def encode(self) -> bytes:
        head = HEADER.pack(MAGIC, VERSION, self.opcode, self.pid, self.request_id,
                           self.retry_of, self.va, self.total_len, self.frag_seq,
                           self.frag_count)
        if self.status is not None:
            head += bytes([int(self.status)])
        return head + self.payload

    @classmethod
    def decode(cls, data: bytes, src: int = 0, dst: int = 0,
               is_response: bool | None = None) -> "Packet":
        if len(data) < HEADER_SIZE:
            raise WireError(f"short packet: {len(data)} bytes")
        magic, version, opcode, pid, rid, retry_of, va, total_len, seq, count = HEADER.unpack_from(data)
        if magic != MAGIC or version != VERSION:
            raise WireError(f"bad magic/version {magic:#x}/{version}")
        if is_response is None:
            is_response = bool(opcode & RESPONSE_BIT)
        status = None
        body = data[HEADER_SIZE:]
        if is_response:
            if not body:
                raise WireError("response without status byte")
            status, body = Status(body[0]), body[1:]
        return cls(src, dst, opcode, pid, rid, retry_of, va, total_len, seq, count,
                   bytes(body), status)

    def reply(self, status: Status = Status.OK, payload: bytes = b"", *,
              va: int | None = None, total_len: int | None = None,
              frag_seq: int = 0, frag_count: int = 1) -> "Packet":
        """Response to this request, addressed back to its sender."""
        return Packet(self.dst, self.src, (self.opcode | RESPONSE_BIT) & 0xFF, self.pid,
                      self.request_id, self.retry_of,
                      self.va if va is None else va,
                      len(payload) if total_len is None else total_len,
                      frag_seq, frag_count, payload, status)

    def copy(self) -> "Packet":
        return replace(self, meta=dict(self.meta))


def max_fragment_payload(mtu: int = DEFAULT_MTU) -> int:
    """Data bytes that fit one packet next to the header and status byte."""
    return mtu - HEADER_SIZE - 1


def u64(value: int) -> bytes:
    return (value & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big")


def read_u64(data: bytes, offset: int = 0) -> int:
    return int.from_bytes(data[offset:offset + 8], "big")
