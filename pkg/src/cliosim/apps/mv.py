"""Multi-version object store running at the memory node.

An object is a header ``latest(8, signed) capacity(8)`` followed by a
version array of ``va(8) len(4)`` entries. Version ``v`` lives at array
index ``v``, so reading any version costs the same.
"""

from __future__ import annotations

import struct

from ..clib import AsyncHandle, ClientSession
from ..errors import Status
from ..memnode import MemoryNode
from ..wire import Packet, ext, read_u64, u64
from .offload import Arena, Offload

MV_CREATE, MV_APPEND, MV_READ = ext(5), ext(6), ext(7)
MV_PID = 0x4D560000
LATEST = (1 << 64) - 1
HEADER = struct.Struct("<qQ")
VERSION = struct.Struct("<QI")


class MvService:
    def __init__(self, mn: MemoryNode, pid: int = MV_PID) -> None:
        self.mn = mn
        self.pid = pid
        self.arena = Arena(mn, pid)
        self.objects: set[int] = set()
        for op in (MV_CREATE, MV_APPEND, MV_READ):
            mn.register_extension(op, self)

    def idempotent(self, p: Packet) -> bool:
        return p.opcode == MV_READ

    def handle(self, mn: MemoryNode, p: Packet) -> tuple[Status, bytes, int]:
        mem = Offload(mn, self.pid)
        if p.opcode == MV_CREATE:
            capacity = read_u64(p.payload)
            if capacity < 1:
                return Status.INVALID_ARGUMENT, b"", 0
            oid = self.arena.alloc(HEADER.size + capacity * VERSION.size)
            mem.write(oid, HEADER.pack(-1, capacity))
            self.objects.add(oid)
            return Status.OK, u64(oid), mem.cost_ns
        oid = read_u64(p.payload)
        if oid not in self.objects:
            return Status.NOT_FOUND, b"", 0
        latest, capacity = HEADER.unpack(mem.read(oid, HEADER.size))
        if p.opcode == MV_APPEND:
            data = p.payload[8:]
            version = latest + 1
            if version >= capacity:
                return Status.FULL, b"", mem.cost_ns
            blob = self.arena.alloc(max(1, len(data)))
            mem.write(blob, data)
            mem.write(oid + HEADER.size + version * VERSION.size, VERSION.pack(blob, len(data)))
            mem.write(oid, HEADER.pack(version, capacity))
            return Status.OK, u64(version), mem.cost_ns
        version = read_u64(p.payload, 8)
        if version == LATEST:
            version = latest
        if latest < 0 or version > latest:
            return Status.OUT_OF_RANGE, b"", mem.cost_ns
        blob, n = VERSION.unpack(mem.read(oid + HEADER.size + version * VERSION.size, VERSION.size))
        return Status.OK, mem.read(blob, n), mem.cost_ns


class MvClient:
    def __init__(self, session: ClientSession, mn: int) -> None:
        self.session = session
        self.mn = mn

    def create_async(self, capacity: int, thread: int = 0) -> AsyncHandle:
        return self.session.ext_async(MV_CREATE, u64(capacity), mn=self.mn, thread=thread)

    def append_async(self, oid: int, data: bytes, thread: int = 0) -> AsyncHandle:
        return self.session.ext_async(MV_APPEND, u64(oid) + data, mn=self.mn, thread=thread)

    def read_async(self, oid: int, version: int = LATEST, thread: int = 0) -> AsyncHandle:
        return self.session.ext_async(MV_READ, u64(oid) + u64(version), mn=self.mn, thread=thread)

    def create(self, capacity: int) -> int:
        return read_u64(self.session.wait(self.create_async(capacity)))

    def append(self, oid: int, data: bytes) -> int:
        return read_u64(self.session.wait(self.append_async(oid, data)))

    def read(self, oid: int, version: int = LATEST) -> bytes:
        return self.session.wait(self.read_async(oid, version))
