"""Memory node: match-action routing, the data pipeline and MN-side sync.

The node keeps no per-client state. What it does keep across requests is
bounded by configuration: the dedup ring, lock table, fence hold queue,
fault stall queue and the fragment table for in-progress multi-packet
writes. :meth:`MemoryNode.control_state` serializes exactly those into a
fixed-size image.

Timing model: each request enters a pipeline that accepts one 64-byte
beat per ``step_ns``; its service time is the sum of fixed stage costs.
A TLB miss adds one bucket fetch (``dram_ns``); a demand fault adds
``3 * step_ns`` and nothing else while the free-page buffer is non-empty.
"""

from __future__ import annotations

import logging
import struct
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .errors import ClioError, PermissionFault, Status
from .metadata import MetadataPlane
from .netsim import Network
from .page_table import DEFAULT_PAGE_SIZE, PAGE_SIZES, HashPageTable, PageTableEntry, Perm, Tlb
from .wire import (ATOMIC_OPS, DATA_OPS, META_OPS, SYNC_OPS, Op, Packet, is_ext,
                   max_fragment_payload, read_u64, u64)

log = logging.getLogger(__name__)

REGION_SIZE = 1 << 30
WORD = 8


@dataclass
class MnConfig:
    physical_bytes: int = 1 << 30
    page_size: int = DEFAULT_PAGE_SIZE
    slots_per_bucket: int = 8
    overprovision: float = 2.0
    tlb_entries: int = 16
    free_buffer_pages: int = 64
    step_ns: int = 4
    dram_ns: int = 100
    beat_bytes: int = 64
    meta_ns: int = 5_000
    alloc_retry_ns: int = 500
    refill_ns: int = 1_000
    dedup_bytes: int = 30_000
    mtu: int = 1500
    max_request_bytes: int = 1 << 20
    max_partial: int = 64
    max_locks: int = 1024
    max_lock_waiters: int = 1024
    max_held: int = 4096
    max_stalled: int = 1024
    timeout_ns: int = 10_000_000
    region_size: int = REGION_SIZE

    def __post_init__(self) -> None:
        if self.page_size not in PAGE_SIZES:
            raise ValueError(f"page size {self.page_size} not in {PAGE_SIZES}")
        if self.physical_bytes % self.page_size:
            raise ValueError("physical memory must be a whole number of pages")
        if self.region_size % self.page_size:
            raise ValueError("region size must be a multiple of the page size")

    @property
    def physical_pages(self) -> int:
        return self.physical_bytes // self.page_size


@dataclass
class DedupRecord:
    executor: int
    opcode: int
    result: bytes = b""

    @property
    def nbytes(self) -> int:
        return DedupBuffer.RECORD_OVERHEAD + len(self.result)


class DedupBuffer:
    """FIFO record of recently executed non-idempotent requests.

    Keyed by the root id (the original request's id), so the original and
    all its retries share one record.
    """

    RECORD_OVERHEAD = 17  # root id, executor id, opcode

    def __init__(self, capacity_bytes: int = 30_000) -> None:
        self.capacity_bytes = capacity_bytes
        self.records: OrderedDict[int, DedupRecord] = OrderedDict()
        self.used_bytes = 0
        self.evictions = 0

    def lookup(self, root: int) -> DedupRecord | None:
        return self.records.get(root)

    def record(self, root: int, executor: int, opcode: int, result: bytes = b"") -> None:
        rec = DedupRecord(executor, opcode, bytes(result))
        if rec.nbytes > self.capacity_bytes:
            raise ValueError("record larger than the dedup buffer")
        old = self.records.pop(root, None)
        if old is not None:
            self.used_bytes -= old.nbytes
        while self.used_bytes + rec.nbytes > self.capacity_bytes:
            _, evicted = self.records.popitem(last=False)
            self.used_bytes -= evicted.nbytes
            self.evictions += 1
        self.records[root] = rec
        self.used_bytes += rec.nbytes

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class SyncState:
    locks: dict[tuple[int, int], int] = field(default_factory=dict)
    waiters: dict[tuple[int, int], deque] = field(default_factory=dict)
    fence: Packet | None = None
    held: deque = field(default_factory=deque)

    @property
    def waiter_count(self) -> int:
        return sum(len(q) for q in self.waiters.values())


@dataclass
class PartialWrite:
    frag_count: int
    first_at: int
    seen: int = 0  # bitmap of fragment numbers
    status: Status = Status.OK
    replay: bool = False
    done_at: int = 0

    @property
    def complete(self) -> bool:
        return self.seen == (1 << self.frag_count) - 1


@dataclass
class Translation:
    ppn: int
    offset: int
    cost_ns: int
    tlb_hit: bool
    faulted: bool


class _Stall(Exception):
    """Free-page buffer empty; the request must wait for a refill."""


class Extension(Protocol):
    def handle(self, mn: "MemoryNode", packet: Packet) -> tuple[Status, bytes, int]: ...

    def idempotent(self, packet: Packet) -> bool: ...


class MemoryNode:
    def __init__(self, net: Network, node_id: int, config: MnConfig | None = None) -> None:
        self.net = net
        self.node_id = node_id
        self.config = cfg = config or MnConfig()
        self.page_shift = cfg.page_size.bit_length() - 1
        self.table = HashPageTable.for_memory(cfg.physical_bytes, cfg.page_size,
                                              cfg.slots_per_bucket, cfg.overprovision)
        self.tlb = Tlb(cfg.tlb_entries)
        self.metadata = MetadataPlane(self.table, cfg.physical_pages, cfg.page_size,
                                      self.tlb, cfg.free_buffer_pages)
        self.metadata.refill_free_pages()
        self.memory: dict[int, bytearray] = {}
        self.dedup = DedupBuffer(cfg.dedup_bytes)
        self.sync = SyncState()
        self.partial: OrderedDict[int, PartialWrite] = OrderedDict()
        self.stalled: deque[Packet] = deque()
        self.extensions: dict[int, Extension] = {}
        self.control_handlers: dict[int, Callable[[Packet], None]] = {}
        self.migrating: set[tuple[int, int]] = set()
        self.region_access: dict[tuple[int, int], int] = {}
        self._pipe_free = 0
        self._meta_free = 0
        self._meta_pending: set[int] = set()
        self._inflight = 0
        self._refill_event = None
        self._capture: list[Packet] | None = None
        self.record_service = True
        self.service_log: list[tuple[int, int, int, str]] = []
        self.stats = {"requests": 0, "nacks": 0, "bad_op": 0, "faults": 0,
                      "fault_stalls": 0, "dedup_replays": 0, "perm_errors": 0,
                      "partial_evictions": 0, "held_drops": 0}
        net.register(node_id, self.receive)

    # -- helpers

    @property
    def page_size(self) -> int:
        return self.config.page_size

    def vpn(self, va: int) -> int:
        return va >> self.page_shift

    def region_of(self, va: int) -> int:
        return va // self.config.region_size

    def _beats(self, nbytes: int) -> int:
        return max(1, -(-nbytes // self.config.beat_bytes))

    def _enter(self, nbytes: int) -> int:
        t = max(self.net.now, self._pipe_free)
        self._pipe_free = t + self._beats(nbytes) * self.config.step_ns
        return t

    def _emit(self, packet: Packet, at: int | None = None) -> None:
        if self._capture is not None:
            self._capture.append(packet)
        if at is None or at <= self.net.now:
            self.net.send(packet)
            return
        self._inflight += 1
        self.net.schedule(at, self._emit_later, packet)

    def _emit_later(self, packet: Packet) -> None:
        self._inflight -= 1
        self.net.send(packet)
        self._maybe_finish_fence()

    def _respond(self, req: Packet, status: Status, payload: bytes, at: int) -> None:
        """Send a (possibly fragmented) response at time ``at``."""
        chunk = max_fragment_payload(self.config.mtu)
        if len(payload) <= chunk:
            self._emit(req.reply(status, payload), at)
            return
        count = -(-len(payload) // chunk)
        for i in range(count):
            part = payload[i * chunk:(i + 1) * chunk]
            self._emit(req.reply(status, part, va=req.va + i * chunk, total_len=len(payload),
                                 frag_seq=i, frag_count=count), at)

    def _log_service(self, req: Packet, service: int, kind: str) -> None:
        if self.record_service:
            self.service_log.append((req.request_id, req.opcode, service, kind))

    def ingress(self, packet: Packet) -> list[Packet]:
        """Process one packet and run until idle; returns everything this node sent."""
        self._capture = captured = []
        try:
            self.receive(packet)
            self.net.run()
        finally:
            self._capture = None
        return captured

    # -- match-and-action routing

    def receive(self, p: Packet) -> None:
        if p.corrupted:
            self.stats["nacks"] += 1
            self._emit(p.reply(Status.NACK))
            return
        handler = self.control_handlers.get(p.opcode & 0x7F if p.is_response else p.opcode)
        if p.is_response:
            if handler is not None:
                handler(p)
            return
        if handler is not None:
            handler(p)
            return
        if self.sync.fence is not None and not self._admitted(p):
            if len(self.sync.held) >= self.config.max_held:
                self.stats["held_drops"] += 1
                return
            self.sync.held.append(p)
            return
        self.dispatch(p)

    def _admitted(self, p: Packet) -> bool:
        # fragments of a write admitted before the fence keep flowing
        return p.frag_count > 1 and p.request_id in self.partial

    def dispatch(self, p: Packet) -> None:
        self.stats["requests"] += 1
        op = p.opcode
        try:
            if op in DATA_OPS:
                self._data(p)
            elif op in SYNC_OPS:
                self._sync(p)
            elif op == Op.PING:
                t = self._enter(0)
                self._respond(p, Status.OK, b"", t + 2 * self.config.step_ns)
            elif op in META_OPS:
                self._meta(p)
            elif is_ext(op) and op in self.extensions:
                self._ext(p)
            else:
                self.stats["bad_op"] += 1
                self._respond(p, Status.BAD_OP, b"", self.net.now + self.config.step_ns)
        except _Stall:
            self.stats["fault_stalls"] += 1
            self.stalled.append(p)
            self._schedule_refill()

    # -- translation

    def translate(self, pid: int, va: int, access: Perm) -> Translation:
        """Translate one address; demand faults are handled inline.

        Raises PermissionFault for unallocated pages or a permission
        mismatch, and _Stall when a fault finds the free-page buffer empty.
        """
        cfg = self.config
        vpn, offset = va >> self.page_shift, va & (cfg.page_size - 1)
        cost = cfg.step_ns
        hit = self.tlb.access(pid, vpn)
        if hit is not None:
            ppn, perms = hit
            if access & ~perms:
                raise PermissionFault(f"pid {pid} va {va:#x}: {access} not in {perms}")
            return Translation(ppn, offset, cost, True, False)
        cost += cfg.dram_ns
        entry = self.table.lookup(pid, vpn)
        if entry is None or (access & ~entry.perms):
            raise PermissionFault(f"pid {pid} va {va:#x}: no mapping with {access}")
        faulted = False
        if not entry.valid:
            self.handle_fault(entry)
            cost += 3 * cfg.step_ns
            faulted = True
        else:
            self.tlb.fill(pid, vpn, entry.ppn, entry.perms)
        return Translation(entry.ppn, offset, cost, False, faulted)

    def handle_fault(self, entry: PageTableEntry) -> PageTableEntry:
        """Back a present-but-invalid PTE with a pre-reserved page."""
        ppn = self.metadata.pop_free_page()
        if ppn is None:
            raise _Stall()
        self.memory.pop(ppn, None)  # fresh page reads as zeros
        entry.ppn, entry.valid = ppn, True
        self.table.update(entry)
        self.tlb.fill(entry.pid, entry.vpn, ppn, entry.perms)
        self.stats["faults"] += 1
        self._schedule_refill()
        return entry

    def _schedule_refill(self) -> None:
        if self._refill_event is None or not self._refill_event.alive:
            self._refill_event = self.net.schedule(self.net.now + self.config.refill_ns, self._refill)

    def _refill(self) -> None:
        self._refill_event = None
        self.metadata.refill_free_pages()
        if self.stalled and len(self.metadata.buffer) == 0:
            return  # memory exhausted; stalled requests wait for frees
        pending, self.stalled = self.stalled, deque()
        for p in pending:
            self.dispatch(p)
        self._maybe_finish_fence()

    def _translate_span(self, pid: int, va: int, length: int, access: Perm) -> tuple[list[tuple[int, int, int]], int, str]:
        """Translate every page of ``[va, va+length)``.

        Returns (ppn, offset, nbytes) chunks, total translation cost, and
        the path taken ("tlb", "pt" or "fault") for the first page.
        """
        chunks, cost, kind = [], 0, ""
        pos, end = va, va + max(length, 1)
        while pos < end:
            t = self.translate(pid, pos, access)
            n = min(end - pos, self.config.page_size - t.offset)
            chunks.append((t.ppn, t.offset, n if length else 0))
            cost += t.cost_ns
            if not kind:
                kind = "fault" if t.faulted else ("tlb" if t.tlb_hit else "pt")
            pos += n
        if self.config.region_size:
            self.region_access[(pid, self.region_of(va))] = self.net.now
        return chunks, cost, kind

    def _page(self, ppn: int) -> bytearray:
        page = self.memory.get(ppn)
        if page is None:
            page = self.memory[ppn] = bytearray(self.config.page_size)
        return page

    def read_phys(self, ppn: int, offset: int, n: int) -> bytes:
        page = self.memory.get(ppn)
        if page is None:
            return bytes(n)
        return bytes(page[offset:offset + n])

    def write_phys(self, ppn: int, offset: int, data: bytes) -> None:
        self._page(ppn)[offset:offset + len(data)] = data

    def read_virtual(self, pid: int, va: int, length: int) -> bytes:
        """Debug/test read through the page table without touching TLB or counters."""
        out = bytearray()
        pos, end = va, va + length
        while pos < end:
            vpn, off = pos >> self.page_shift, pos & (self.page_size - 1)
            n = min(end - pos, self.page_size - off)
            entry = self.table.peek(pid, vpn)
            if entry is None:
                raise PermissionFault(f"pid {pid} va {pos:#x} unmapped")
            out += self.read_phys(entry.ppn, off, n) if entry.valid else bytes(n)
            pos += n
        return bytes(out)

    # -- data path

    def _replay(self, p: Packet) -> bool:
        rec = self.dedup.lookup(p.root_id)
        if rec is None:
            return False
        self.stats["dedup_replays"] += 1
        if p.frag_count > 1:
            self._track_fragment(p, replay=True)
            return True
        t = self._enter(0)
        self._respond(p, Status.OK, rec.result, t + 2 * self.config.step_ns)
        return True

    def _data(self, p: Packet) -> None:
        cfg = self.config
        if (p.pid, self.region_of(p.va)) in self.migrating:
            self._respond(p, Status.MIGRATING, b"", self.net.now + cfg.step_ns)
            return
        op = p.opcode
        if op != Op.READ and self._replay(p):
            return
        if op == Op.READ:
            self._read(p)
        elif op == Op.WRITE:
            self._write(p)
        else:
            self._atomic(p)

    def _error(self, p: Packet, exc: ClioError) -> None:
        if exc.status == Status.PERM:
            self.stats["perm_errors"] += 1
        self._respond(p, exc.status, b"", self.net.now + 2 * self.config.step_ns)

    def _read(self, p: Packet) -> None:
        cfg = self.config
        length = p.total_len
        if length > cfg.max_request_bytes:
            self._error(p, ClioError("read too large", Status.INVALID_ARGUMENT))
            return
        try:
            chunks, tcost, kind = self._translate_span(p.pid, p.va, length, Perm.READ)
        except PermissionFault as exc:
            self._error(p, exc)
            return
        data = b"".join(self.read_phys(ppn, off, n) for ppn, off, n in chunks)
        t = self._enter(length)
        service = cfg.step_ns + tcost + cfg.dram_ns + self._beats(length) * cfg.step_ns + cfg.step_ns
        self._log_service(p, service, kind)
        self._respond(p, Status.OK, data, t + service)

    def _write(self, p: Packet) -> None:
        cfg = self.config
        if p.frag_count > 1:
            entry = self.partial.get(p.request_id)
            if entry is not None and entry.status != Status.OK:
                self._track_fragment(p)
                return
        try:
            chunks, tcost, kind = self._translate_span(p.pid, p.va, len(p.payload), Perm.WRITE)
        except PermissionFault as exc:
            if p.frag_count > 1:
                self._track_fragment(p, status=exc.status)
            else:
                self._error(p, exc)
            return
        pos = 0
        for ppn, off, n in chunks:
            self.write_phys(ppn, off, p.payload[pos:pos + n])
            pos += n
        t = self._enter(len(p.payload))
        service = cfg.step_ns + tcost + cfg.dram_ns + self._beats(len(p.payload)) * cfg.step_ns + cfg.step_ns
        self._log_service(p, service, kind)
        if p.frag_count > 1:
            self._track_fragment(p, done_at=t + service)
            return
        self.dedup.record(p.root_id, p.request_id, p.opcode)
        self._respond(p, Status.OK, b"", t + service)

    def _track_fragment(self, p: Packet, status: Status = Status.OK, replay: bool = False,
                        done_at: int = 0) -> None:
        entry = self.partial.get(p.request_id)
        if entry is None:
            self._expire_partials()
            while len(self.partial) >= self.config.max_partial:
                self.partial.popitem(last=False)
                self.stats["partial_evictions"] += 1
            entry = self.partial[p.request_id] = PartialWrite(p.frag_count, self.net.now)
        entry.seen |= 1 << p.frag_seq
        entry.replay |= replay
        entry.done_at = max(entry.done_at, done_at, self.net.now + self.config.step_ns)
        if status != Status.OK:
            entry.status = status
        if not entry.complete:
            return
        del self.partial[p.request_id]
        if entry.status == Status.OK and not entry.replay:
            self.dedup.record(p.root_id, p.request_id, p.opcode)
        self._emit(p.reply(entry.status), entry.done_at)

    def _expire_partials(self) -> None:
        horizon = self.net.now - 3 * self.config.timeout_ns
        while self.partial:
            rid, entry = next(iter(self.partial.items()))
            if entry.first_at >= horizon:
                break
            del self.partial[rid]
            self.stats["partial_evictions"] += 1

    def _atomic(self, p: Packet) -> None:
        cfg = self.config
        if p.va % WORD:
            self._error(p, ClioError("unaligned atomic", Status.INVALID_ARGUMENT))
            return
        try:
            chunks, tcost, kind = self._translate_span(p.pid, p.va, WORD, Perm.RW)
        except PermissionFault as exc:
            self._error(p, exc)
            return
        ppn, off, _ = chunks[0]
        prior = int.from_bytes(self.read_phys(ppn, off, WORD), "little")
        if p.opcode == Op.FAA:
            new = (prior + read_u64(p.payload)) & 0xFFFFFFFFFFFFFFFF
        elif p.opcode == Op.CAS:
            new = read_u64(p.payload, 8) if prior == read_u64(p.payload) else prior
        else:
            new = 1
        if new != prior:
            self.write_phys(ppn, off, new.to_bytes(WORD, "little"))
        result = u64(prior)
        self.dedup.record(p.root_id, p.request_id, p.opcode, result)
        t = self._enter(WORD)
        service = cfg.step_ns + tcost + 2 * cfg.dram_ns + cfg.step_ns
        self._log_service(p, service, kind)
        self._respond(p, Status.OK, result, t + service)

    # -- synchronization primitives

    def _sync(self, p: Packet) -> None:
        cfg = self.config
        at = self._enter(0) + 2 * cfg.step_ns
        if p.opcode == Op.FENCE:
            if self._quiescent():
                self._respond(p, Status.OK, b"", at)
            else:
                self.sync.fence = p
            return
        if self._replay(p):
            return
        key = (p.pid, p.va)
        if p.opcode == Op.LOCK:
            if key not in self.sync.locks:
                if len(self.sync.locks) >= cfg.max_locks:
                    self._respond(p, Status.FULL, b"", at)
                    return
                self._grant(key, p, at)
                return
            queue = self.sync.waiters.setdefault(key, deque())
            for i, waiting in enumerate(queue):
                if waiting.root_id == p.root_id:
                    queue[i] = p  # a retry supersedes the queued copy
                    return
            if self.sync.waiter_count >= cfg.max_lock_waiters:
                self._respond(p, Status.FULL, b"", at)
                return
            queue.append(p)
            return
        # UNLOCK
        if key not in self.sync.locks:
            self._respond(p, Status.BAD_UNLOCK, b"", at)
            return
        del self.sync.locks[key]
        self.dedup.record(p.root_id, p.request_id, p.opcode)
        self._respond(p, Status.OK, b"", at)
        queue = self.sync.waiters.get(key)
        if queue:
            nxt = queue.popleft()
            if not queue:
                del self.sync.waiters[key]
            self._grant(key, nxt, at + cfg.step_ns)

    def _grant(self, key: tuple[int, int], p: Packet, at: int) -> None:
        self.sync.locks[key] = p.root_id
        self.dedup.record(p.root_id, p.request_id, p.opcode)
        self._respond(p, Status.OK, b"", at)

    def _quiescent(self) -> bool:
        return self._inflight == 0 and not self.stalled and not self._meta_pending

    def _maybe_finish_fence(self) -> None:
        fence = self.sync.fence
        if fence is None or not self._quiescent():
            return
        self.sync.fence = None
        self._emit(fence.reply(Status.OK))
        held, self.sync.held = self.sync.held, deque()
        while held:
            p = held.popleft()
            if self.sync.fence is not None:
                self.sync.held.append(p)
            else:
                self.dispatch(p)

    # -- slow path

    def _meta(self, p: Packet) -> None:
        cfg = self.config
        root = p.root_id
        if root in self._meta_pending:
            return  # the earlier copy will answer
        if self._replay(p):
            return
        self._meta_pending.add(root)
        start = max(self.net.now, self._meta_free) + cfg.meta_ns
        self._meta_free = start
        self.net.schedule(start, self._meta_run, p)

    def _meta_run(self, p: Packet) -> None:
        cfg = self.config
        extra = 0
        try:
            if p.opcode == Op.ALLOC:
                size = read_u64(p.payload)
                perms = Perm(p.payload[8]) if len(p.payload) > 8 else Perm.RW
                window = None
                if len(p.payload) >= 25:
                    window = (read_u64(p.payload, 9), read_u64(p.payload, 17))
                a = self.metadata.alloc_va(p.pid, size, perms, window)
                extra = a.retries * cfg.alloc_retry_ns
                result = u64(a.va) + u64(a.npages * cfg.page_size) + u64(a.retries)
            else:
                self.metadata.free_va(p.pid, p.va, p.total_len)
                result = b""
            status = Status.OK
            self.dedup.record(p.root_id, p.request_id, p.opcode, result)
        except ClioError as exc:
            status, result = exc.status, b""
        self._meta_free = self.net.now + extra
        self._meta_pending.discard(p.root_id)
        self._respond(p, status, result, self.net.now + extra)
        self._maybe_finish_fence()

    # -- extend path

    def register_extension(self, n_or_opcode: int, ext: Extension) -> None:
        self.extensions[n_or_opcode] = ext

    def _ext(self, p: Packet) -> None:
        ext = self.extensions[p.opcode]
        idem = ext.idempotent(p)
        if not idem and self._replay(p):
            return
        t = self._enter(len(p.payload))
        try:
            status, result, cost = ext.handle(self, p)
        except ClioError as exc:
            status, result, cost = exc.status, b"", 0
        if status == Status.OK and not idem:
            self.dedup.record(p.root_id, p.request_id, p.opcode, result)
        service = 2 * self.config.step_ns + cost
        self._log_service(p, service, "ext")
        self._respond(p, status, result, t + service)

    def sync_fault(self, entry: PageTableEntry) -> None:
        """Fault path for offloads, which cannot park mid-handler."""
        if len(self.metadata.buffer) == 0:
            self.stats["fault_stalls"] += 1
            self.metadata.refill_free_pages()
        self.handle_fault(entry)

    # -- bounded control state

    TLB_REC = struct.Struct(">IQQBB")
    LOCK_REC = struct.Struct(">IQQ")
    QUEUE_REC = struct.Struct(">QQQ")
    PARTIAL_REC = struct.Struct(">QQQB")

    def control_state(self) -> bytes:
        """Fixed-layout image of all non-memory, non-page-table state.

        Every section is padded to its configured bound, so the image size
        depends only on configuration and never on how many clients the
        node has served.
        """
        cfg = self.config
        out = bytearray()

        def section(records: list[bytes], bound: int, rec_size: int) -> None:
            if len(records) > bound:
                raise AssertionError("control state exceeded its bound")
            body = b"".join(records)
            out.extend(body + bytes(bound * rec_size - len(body)))

        section([self.TLB_REC.pack(pid & 0xFFFFFFFF, vpn, ppn, perms.value, 1)
                 for (pid, vpn), (ppn, perms) in self.tlb.entries.items()],
                cfg.tlb_entries, self.TLB_REC.size)
        ring = b"".join(struct.pack(">QQB", root, r.executor, r.opcode) + r.result
                        for root, r in self.dedup.records.items())
        out.extend(ring + bytes(cfg.dedup_bytes - len(ring)))
        section([self.LOCK_REC.pack(pid & 0xFFFFFFFF, va, holder)
                 for (pid, va), holder in self.sync.locks.items()],
                cfg.max_locks, self.LOCK_REC.size)
        waiters = [self.QUEUE_REC.pack(p.request_id, p.pid, p.va)
                   for q in self.sync.waiters.values() for p in q]
        section(waiters, cfg.max_lock_waiters, self.QUEUE_REC.size)
        section([self.QUEUE_REC.pack(p.request_id, p.pid, p.va) for p in self.sync.held],
                cfg.max_held, self.QUEUE_REC.size)
        section([self.QUEUE_REC.pack(p.request_id, p.pid, p.va) for p in self.stalled],
                cfg.max_stalled, self.QUEUE_REC.size)
        section([self.PARTIAL_REC.pack(rid, e.seen, e.first_at, e.frag_count)
                 for rid, e in self.partial.items()],
                cfg.max_partial, self.PARTIAL_REC.size)
        section([ppn.to_bytes(8, "big") for ppn in self.metadata.buffer.pages],
                cfg.free_buffer_pages, 8)
        out.extend(struct.pack(">QB", self.sync.fence.request_id if self.sync.fence else 0,
                               self.sync.fence is not None))
        return bytes(out)

    def live_control_entries(self) -> dict[str, int]:
        return {"tlb": len(self.tlb), "dedup": len(self.dedup), "locks": len(self.sync.locks),
                "lock_waiters": self.sync.waiter_count, "held": len(self.sync.held),
                "stalled": len(self.stalled), "partial": len(self.partial),
                "free_buffer": len(self.metadata.buffer)}
