"""Chained-bucket hash key-value store running at the memory node.

Layout in the service's own address space::

    bucket table   B inline slots of SLOT_BYTES, slot i at base + i * SLOT_BYTES
    slot           next(8) then ENTRIES x [fingerprint(1) present(1) va(8)]
    record         klen(2) vlen(4) key value

New entries go into the first free entry of the bucket's last slot; a new
slot is allocated and linked when that one is full. Each request runs to
completion at the owning MN, which is the store's serialization point.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..clib import AsyncHandle, ClientSession
from ..errors import Status
from ..lookup3 import hashlittle
from ..memnode import MemoryNode
from ..wire import Packet, ext
from .offload import Arena, Offload

ENTRIES = 7
ENTRY = struct.Struct("<BBQ")
SLOT_BYTES = 8 + ENTRIES * ENTRY.size + 2  # padded to 80
RECORD_HEAD = struct.Struct("<HI")
FP_SEED = 0x5EED
KV_PID = 0x4B560000

KV_SET, KV_GET, KV_DELETE = ext(2), ext(3), ext(4)


def key_hash(key: bytes) -> int:
    return hashlittle(key)


def fingerprint(key: bytes) -> int:
    # separate seed: with a power-of-two bucket count the low bits of
    # key_hash are the bucket index and would make every tag in a bucket equal
    return hashlittle(key, FP_SEED) & 0xFF


@dataclass
class KvStats:
    sets: int = 0
    gets: int = 0
    deletes: int = 0
    slots_allocated: int = 0
    fingerprint_skips: int = 0
    key_compares: int = 0


class KvService:
    def __init__(self, mn: MemoryNode, buckets: int = 1024, pid: int = KV_PID) -> None:
        if buckets < 1:
            raise ValueError("need at least one bucket")
        self.mn = mn
        self.buckets = buckets
        self.pid = pid
        self.arena = Arena(mn, pid)
        table = mn.metadata.alloc_va(pid, buckets * SLOT_BYTES)
        self.base = table.va
        self.stats = KvStats()
        self.log: list[tuple[int, str, bytes, bytes | None]] = []
        for op in (KV_SET, KV_GET, KV_DELETE):
            mn.register_extension(op, self)

    def idempotent(self, p: Packet) -> bool:
        return p.opcode == KV_GET

    def handle(self, mn: MemoryNode, p: Packet) -> tuple[Status, bytes, int]:
        mem = Offload(mn, self.pid)
        if p.opcode == KV_SET:
            (klen,) = struct.unpack_from(">H", p.payload)
            key, value = p.payload[2:2 + klen], p.payload[2 + klen:]
            self.set(mem, key, value)
            self.log.append((p.root_id, "set", key, value))
            return Status.OK, b"", mem.cost_ns
        key = p.payload
        if p.opcode == KV_GET:
            value = self.get(mem, key)
            self.log.append((p.root_id, "get", key, value))
            if value is None:
                return Status.NOT_FOUND, b"", mem.cost_ns
            return Status.OK, value, mem.cost_ns
        found = self.delete(mem, key)
        self.log.append((p.root_id, "delete", key, b"" if found else None))
        return (Status.OK if found else Status.NOT_FOUND), b"", mem.cost_ns

    # -- store logic over offloaded memory

    def _slots(self, mem: Offload, key: bytes):
        slot = self.base + (key_hash(key) % self.buckets) * SLOT_BYTES
        while slot:
            yield slot
            slot = mem.read_u64(slot)

    def _entries(self, mem: Offload, slot: int) -> list[tuple[int, int, int]]:
        raw = mem.read(slot + 8, ENTRIES * ENTRY.size)
        return [ENTRY.unpack_from(raw, i * ENTRY.size) for i in range(ENTRIES)]

    def _find(self, mem: Offload, key: bytes) -> tuple[int, int, int] | None:
        """(slot, entry index, record va) of ``key``, if stored."""
        fp = fingerprint(key)
        for slot in self._slots(mem, key):
            for i, (efp, present, va) in enumerate(self._entries(mem, slot)):
                if not present:
                    continue
                if efp != fp:
                    self.stats.fingerprint_skips += 1
                    continue
                self.stats.key_compares += 1
                klen, vlen = RECORD_HEAD.unpack(mem.read(va, RECORD_HEAD.size))
                if klen == len(key) and mem.read(va + RECORD_HEAD.size, klen) == key:
                    return slot, i, va
        return None

    def _record(self, mem: Offload, key: bytes, value: bytes) -> int:
        va = self.arena.alloc(RECORD_HEAD.size + len(key) + len(value))
        mem.write(va, RECORD_HEAD.pack(len(key), len(value)) + key + value)
        return va

    def _put_entry(self, mem: Offload, slot: int, i: int, fp: int, va: int) -> None:
        mem.write(slot + 8 + i * ENTRY.size, ENTRY.pack(fp, 1, va))

    def set(self, mem: Offload, key: bytes, value: bytes) -> None:
        self.stats.sets += 1
        if len(key) > 0xFFFF:
            raise ValueError("key too long")
        record = self._record(mem, key, value)
        fp = fingerprint(key)
        hit = self._find(mem, key)
        if hit is not None:
            slot, i, _ = hit
            self._put_entry(mem, slot, i, fp, record)
            return
        last = None
        for last in self._slots(mem, key):
            pass
        for i, (_, present, _) in enumerate(self._entries(mem, last)):
            if not present:
                self._put_entry(mem, last, i, fp, record)
                return
        fresh = self.arena.alloc(SLOT_BYTES)
        mem.write(fresh, bytes(SLOT_BYTES))
        self._put_entry(mem, fresh, 0, fp, record)
        mem.write_u64(last, fresh)
        self.stats.slots_allocated += 1

    def get(self, mem: Offload, key: bytes) -> bytes | None:
        self.stats.gets += 1
        hit = self._find(mem, key)
        if hit is None:
            return None
        klen, vlen = RECORD_HEAD.unpack(mem.read(hit[2], RECORD_HEAD.size))
        return mem.read(hit[2] + RECORD_HEAD.size + klen, vlen)

    def delete(self, mem: Offload, key: bytes) -> bool:
        self.stats.deletes += 1
        hit = self._find(mem, key)
        if hit is None:
            return False
        slot, i, _ = hit
        mem.write(slot + 8 + i * ENTRY.size, ENTRY.pack(0, 0, 0))
        return True

    def chain_length(self, key: bytes) -> int:
        return sum(1 for _ in self._slots(Offload(self.mn, self.pid), key))


@dataclass
class KvClient:
    """CN side: partitions keys over MNs by hash and issues extension requests."""

    session: ClientSession
    mns: list[int]
    results: dict[int, tuple[str, bytes, bytes | None]] = field(default_factory=dict)

    def owner(self, key: bytes) -> int:
        return self.mns[key_hash(key) % len(self.mns)]

    def set_async(self, key: bytes, value: bytes, thread: int = 0) -> AsyncHandle:
        payload = struct.pack(">H", len(key)) + key + value
        return self.session.ext_async(KV_SET, payload, mn=self.owner(key), thread=thread)

    def get_async(self, key: bytes, thread: int = 0) -> AsyncHandle:
        return self.session.ext_async(KV_GET, key, mn=self.owner(key), thread=thread)

    def delete_async(self, key: bytes, thread: int = 0) -> AsyncHandle:
        return self.session.ext_async(KV_DELETE, key, mn=self.owner(key), thread=thread)

    @staticmethod
    def value_of(handle: AsyncHandle) -> bytes | None:
        """Get/delete outcome: bytes, or None for not-found. Other errors raise."""
        if handle.error is not None and handle.error.status == Status.NOT_FOUND:
            return None
        return handle.result()

    def set(self, key: bytes, value: bytes) -> None:
        self.session.wait(self.set_async(key, value))

    def get(self, key: bytes) -> bytes | None:
        h = self.get_async(key)
        self.session.net.wait(h)
        return self.value_of(h)

    def delete(self, key: bytes) -> bool:
        h = self.delete_async(key)
        self.session.net.wait(h)
        return self.value_of(h) is not None
