"""Pointer chasing executed at the memory node as one extension request.

Nodes carry a little-endian u64 key at ``key_offset`` and the VA of the
next node (0 ends the list) at ``next_offset``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from ..clib import AsyncHandle, ClientSession
from ..errors import ClioError, Status
from ..memnode import MemoryNode
from ..wire import Packet, ext
from .offload import Offload

CHASE = ext(1)
REQUEST = struct.Struct(">QQIIII")


@dataclass(frozen=True)
class ChaseSpec:
    match: int
    key_offset: int = 0
    next_offset: int = 8
    node_size: int = 16
    max_hops: int = 64

    def __post_init__(self) -> None:
        for off in (self.key_offset, self.next_offset):
            if off < 0 or off + 8 > self.node_size:
                raise ValueError("field offsets must lie inside the node")


class ChaseService:
    def __init__(self, mn: MemoryNode) -> None:
        self.mn = mn
        self.hops = 0
        mn.register_extension(CHASE, self)

    def idempotent(self, p: Packet) -> bool:
        return True

    def handle(self, mn: MemoryNode, p: Packet) -> tuple[Status, bytes, int]:
        head, match, koff, noff, size, max_hops = REQUEST.unpack_from(p.payload)
        mem = Offload(mn, p.pid)
        node, hops = head, 0
        try:
            while node and hops < max_hops:
                body = mem.read(node, size)
                hops += 1
                if int.from_bytes(body[koff:koff + 8], "little") == match:
                    self.hops += hops
                    return Status.OK, node.to_bytes(8, "big") + body, mem.cost_ns
                node = int.from_bytes(body[noff:noff + 8], "little")
        except ClioError as exc:
            return exc.status, b"", mem.cost_ns
        self.hops += hops
        return Status.OK, b"", mem.cost_ns


def chase_async(session: ClientSession, head: int, spec: ChaseSpec, thread: int = 0) -> AsyncHandle:
    payload = REQUEST.pack(head, spec.match, spec.key_offset, spec.next_offset,
                           spec.node_size, spec.max_hops)
    return session.ext_async(CHASE, payload, va=head, thread=thread)


def decode(payload: bytes) -> tuple[int, bytes] | None:
    if not payload:
        return None
    return int.from_bytes(payload[:8], "big"), payload[8:]


def chase(session: ClientSession, head: int, spec: ChaseSpec) -> tuple[int, bytes] | None:
    """(node VA, node bytes) of the first node whose key matches, else None."""
    return decode(session.wait(chase_async(session, head, spec)))


def node_bytes(key: int, next_va: int, spec: ChaseSpec, fill: bytes = b"") -> bytes:
    body = bytearray(spec.node_size)
    body[spec.key_offset:spec.key_offset + 8] = key.to_bytes(8, "little")
    body[spec.next_offset:spec.next_offset + 8] = next_va.to_bytes(8, "little")
    free = [i for i in range(spec.node_size)
            if not (spec.key_offset <= i < spec.key_offset + 8
                    or spec.next_offset <= i < spec.next_offset + 8)]
    for i, b in zip(free, fill):
        body[i] = b
    return bytes(body)


def build_list(session: ClientSession, base: int, keys: list[int], spec: ChaseSpec,
               stride: int | None = None) -> list[int]:
    """Write a linked list of ``keys`` starting at ``base``; returns node VAs."""
    stride = stride or spec.node_size
    vas = [base + i * stride for i in range(len(keys))]
    for i, key in enumerate(keys):
        nxt = vas[i + 1] if i + 1 < len(vas) else 0
        session.rwrite_async(vas[i], node_bytes(key, nxt, spec))
    session.rrelease()
    return vas
