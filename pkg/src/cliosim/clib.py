"""Compute-node client library.

One :class:`ClientSession` per process. It turns API calls into wire
requests, enforces page-granularity hazard ordering between outstanding
operations, gates sends with a per-MN congestion window and a per-session
incast window, and retries timed-out or NACKed requests under fresh ids.

Calls come in two flavours. ``*_async`` methods return an
:class:`AsyncHandle` immediately; simulated threads (generators run by
``Network.spawn``) ``yield`` these handles. The plain methods submit and
then drive the event loop until the handle completes, so they are meant
for a top-level driver, not for use inside a simulated thread.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ClioError, InvalidArgument, RequestTimeout, Status, error_for
from .netsim import Network, Waitable
from .page_table import DEFAULT_PAGE_SIZE, Perm
from .wire import (ATOMIC_OPS, HEADER_SIZE, Op, Packet, max_fragment_payload, read_u64, u64)

log = logging.getLogger(__name__)

ID_SHIFT = 40


@dataclass
class ClibConfig:
    timeout_ms: float = 10.0
    max_retries: int = 3
    cwnd_init: float = 1.0
    cwnd_floor: float = 1 / 64
    cwnd_max: float = 64.0
    additive_step: float = 1.0
    multiplicative_factor: float = 0.7
    iwnd_bytes: int = 256 * 1024
    mtu: int = 1500
    target_delay_factor: float = 3.0
    target_delay_ns: int | None = None
    rtt_alpha: float = 0.125
    max_request_bytes: int = 1 << 20
    page_size: int = DEFAULT_PAGE_SIZE
    record_sends: bool = False

    @property
    def timeout_ns(self) -> int:
        return int(self.timeout_ms * 1_000_000)


class AsyncHandle(Waitable):
    """Ticket for an outstanding call; completes with a value or an error."""

    def __init__(self) -> None:
        super().__init__()
        self.state = "pending"
        self.value: Any = None
        self.error: ClioError | None = None
        self.started = 0
        self.request_id = 0

    def _finish(self, value: Any = None, error: ClioError | None = None) -> None:
        if self.done:
            return
        self.state = "failed" if error is not None else "ok"
        self.value, self.error = value, error
        self._complete()

    def result(self) -> Any:
        if not self.done:
            raise RuntimeError("handle still pending")
        if self.error is not None:
            raise self.error
        return self.value


@dataclass
class CongestionState:
    """Per-MN window, RTT estimate and pacing clock."""

    cwnd: float
    target_delay: int | None = None
    srtt: float | None = None
    inflight: int = 0
    last_send: int | None = None
    handshake: "_Op | None" = None
    trajectory: list[tuple[int, float, int]] = field(default_factory=list)
    sends: list[tuple[int, int, float, bool]] = field(default_factory=list)

    def pacing_gap(self) -> int:
        if self.cwnd >= 1 or self.srtt is None:
            return 0
        return math.ceil(self.srtt / self.cwnd)


class _Op:
    __slots__ = ("seq", "thread", "opcode", "pid", "va", "length", "payload", "reads",
                 "writes", "barrier", "mn", "region", "expected", "handle", "ids",
                 "root", "attempts", "sent_at", "timer", "frags", "state", "decode",
                 "internal", "route_va", "fixed_mn")

    def __init__(self, seq: int, thread: int, opcode: int, pid: int, va: int, length: int,
                 payload: bytes, handle: AsyncHandle) -> None:
        self.seq, self.thread, self.opcode, self.pid = seq, thread, opcode, pid
        self.va, self.length, self.payload, self.handle = va, length, payload, handle
        self.reads: frozenset = frozenset()
        self.writes: frozenset = frozenset()
        self.barrier = False
        self.mn: int | None = None
        self.fixed_mn: int | None = None
        self.route_va = va
        self.region: tuple[int, int] | None = None
        self.expected = 0
        self.ids: list[int] = []
        self.root = 0
        self.attempts = 0
        self.sent_at = 0
        self.timer = None
        self.frags: dict[int, bytes] = {}
        self.state = "pending"
        self.decode: Callable[[bytes], Any] = lambda b: None
        self.internal = False


class StaticRouter:
    """All addresses live on one MN."""

    region_size = None

    def __init__(self, mn: int) -> None:
        self.mn = mn

    def lookup(self, session: "ClientSession", pid: int, region: int) -> int | None:
        return self.mn

    def all_mns(self) -> list[int]:
        return [self.mn]

    def on_packet(self, session: "ClientSession", packet: Packet) -> None:
        pass


class ClientSession:
    def __init__(self, net: Network, cn_id: int, router: StaticRouter | Any,
                 pid: int = 1, config: ClibConfig | None = None) -> None:
        self.net = net
        self.cn_id = cn_id
        self.router = router
        self.pid = pid
        self.config = cfg = config or ClibConfig()
        self.page_shift = cfg.page_size.bit_length() - 1
        self.frag_bytes = max_fragment_payload(cfg.mtu)
        self._counter = 0
        self._seq = 0
        self.pending: deque[_Op] = deque()
        self._by_id: dict[int, _Op] = {}
        self.inflight: dict[int, _Op] = {}  # root id -> op
        self._page_readers: dict[tuple[int, int], int] = {}
        self._page_writers: dict[tuple[int, int], int] = {}
        self._thread_inflight: dict[int, int] = {}
        self._thread_barriers: dict[int, int] = {}
        self._thread_outstanding: dict[int, int] = {}
        self._release_waiters: dict[int, list[Waitable]] = {}
        self.iwnd_used = 0
        self.cc: dict[int, CongestionState] = {}
        self.held_regions: set[tuple[int, int]] = set()
        self._region_inflight: dict[tuple[int, int], int] = {}
        self._drain_waiters: dict[tuple[int, int], list[Waitable]] = {}
        self._alloc_cursor: dict[int, int] = {}
        self._pump_event = None
        self._pump_at: int | None = None
        self.stats = {"issued": 0, "completed": 0, "failed": 0, "retries": 0, "timeouts": 0,
                      "nacks": 0, "corrupt_responses": 0, "stale_responses": 0}
        self.latencies: list[tuple[int, int]] = []  # (opcode, ns) of completed user ops
        net.register(cn_id, self._on_packet)

    # -- ids and congestion state

    def _next_id(self) -> int:
        self._counter += 1
        return (self.cn_id << ID_SHIFT) | self._counter

    def congestion(self, mn: int) -> CongestionState:
        st = self.cc.get(mn)
        if st is None:
            st = self.cc[mn] = CongestionState(self.config.cwnd_init, self.config.target_delay_ns)
        return st

    def _on_rtt(self, st: CongestionState, rtt: int) -> None:
        cfg = self.config
        a = cfg.rtt_alpha
        st.srtt = float(rtt) if st.srtt is None else (1 - a) * st.srtt + a * rtt
        if st.target_delay is None:
            return
        if rtt <= st.target_delay:
            if st.cwnd >= 1:
                st.cwnd += cfg.additive_step / st.cwnd
            else:
                st.cwnd += cfg.additive_step
        else:
            st.cwnd *= cfg.multiplicative_factor
        st.cwnd = min(cfg.cwnd_max, max(cfg.cwnd_floor, st.cwnd))
        st.trajectory.append((self.net.now, st.cwnd, rtt))

    def _on_congestion_timeout(self, st: CongestionState) -> None:
        cfg = self.config
        st.cwnd = min(cfg.cwnd_max, max(cfg.cwnd_floor, st.cwnd * cfg.multiplicative_factor))
        st.trajectory.append((self.net.now, st.cwnd, -1))

    # -- submission

    def _pages(self, pid: int, va: int, length: int) -> frozenset:
        if length <= 0:
            return frozenset()
        first, last = va >> self.page_shift, (va + length - 1) >> self.page_shift
        return frozenset((pid, v) for v in range(first, last + 1))

    def _make(self, opcode: int, pid: int | None, va: int, length: int, payload: bytes,
              thread: int, handle: AsyncHandle | None = None) -> _Op:
        self._seq += 1
        op = _Op(self._seq, thread, opcode, self.pid if pid is None else pid, va, length,
                 payload, handle or AsyncHandle())
        op.handle.started = self.net.now
        return op

    def _submit(self, op: _Op) -> AsyncHandle:
        cfg = self.config
        if op.opcode == Op.READ:
            nfrag = max(1, -(-op.length // self.frag_bytes))
            op.expected = op.length + nfrag * (HEADER_SIZE + 1)
        else:
            op.expected = HEADER_SIZE + 1 + 24
        if self.router.region_size and op.fixed_mn is None:
            op.region = (op.pid, op.route_va // self.router.region_size)
        self.pending.append(op)
        if not op.internal:
            self.stats["issued"] += 1
            self._thread_outstanding[op.thread] = self._thread_outstanding.get(op.thread, 0) + 1
        self._pump()
        return op.handle

    def _split(self, opcode: int, pid: int | None, va: int, length: int, payload: bytes,
               thread: int, decode: Callable[[bytes], Any], reads: bool) -> AsyncHandle:
        """Submit a data op, splitting it at region boundaries."""
        if length > self.config.max_request_bytes:
            raise InvalidArgument(f"request of {length} bytes exceeds the maximum")
        if va < 0 or length < 0:
            raise InvalidArgument("negative address or length")
        rsize = self.router.region_size
        spans = [(va, length)]
        if rsize and length and va // rsize != (va + length - 1) // rsize:
            spans, pos, end = [], va, va + length
            while pos < end:
                n = min(end - pos, rsize - pos % rsize)
                spans.append((pos, n))
                pos += n
        parts = []
        for sva, n in spans:
            body = payload[sva - va:sva - va + n] if payload else b""
            op = self._make(opcode, pid, sva, n, body, thread)
            pages = self._pages(op.pid, sva, n)
            if reads:
                op.reads = pages
            else:
                op.writes = pages
            op.decode = decode
            parts.append(op)
        if len(parts) == 1:
            return self._submit(parts[0])
        parent = AsyncHandle()
        handles = [self._submit(op) for op in parts]

        def one_done(_w: Waitable) -> None:
            if parent.done or not all(h.done for h in handles):
                return
            err = next((h.error for h in handles if h.error is not None), None)
            if err is not None:
                parent._finish(error=err)
            elif reads:
                parent._finish(b"".join(h.value for h in handles))
            else:
                parent._finish(None)

        for h in handles:
            h.on_done(one_done)
        return parent

    # -- public async API

    def rread_async(self, va: int, length: int, pid: int | None = None, thread: int = 0) -> AsyncHandle:
        return self._split(Op.READ, pid, va, length, b"", thread, bytes, True)

    def rwrite_async(self, va: int, data: bytes, pid: int | None = None, thread: int = 0) -> AsyncHandle:
        return self._split(Op.WRITE, pid, va, len(data), bytes(data), thread, lambda b: None, False)

    def _atomic(self, opcode: Op, va: int, payload: bytes, pid: int | None, thread: int) -> AsyncHandle:
        if va % 8:
            raise InvalidArgument("atomic address must be 8-byte aligned")
        op = self._make(opcode, pid, va, 8, payload, thread)
        op.writes = self._pages(op.pid, va, 8)
        op.decode = read_u64
        return self._submit(op)

    def rfaa_async(self, va: int, delta: int, pid: int | None = None, thread: int = 0) -> AsyncHandle:
        return self._atomic(Op.FAA, va, u64(delta), pid, thread)

    def rcas_async(self, va: int, expected: int, new: int, pid: int | None = None,
                   thread: int = 0) -> AsyncHandle:
        return self._atomic(Op.CAS, va, u64(expected) + u64(new), pid, thread)

    def rtas_async(self, va: int, pid: int | None = None, thread: int = 0) -> AsyncHandle:
        return self._atomic(Op.TAS, va, b"", pid, thread)

    def rlock_async(self, va: int, pid: int | None = None, thread: int = 0) -> AsyncHandle:
        op = self._make(Op.LOCK, pid, va, 0, b"", thread)
        op.barrier = True
        return self._submit(op)

    def runlock_async(self, va: int, pid: int | None = None, thread: int = 0) -> AsyncHandle:
        op = self._make(Op.UNLOCK, pid, va, 0, b"", thread)
        op.barrier = True
        return self._submit(op)

    def rfence_async(self, va: int | None = None, pid: int | None = None, thread: int = 0) -> AsyncHandle:
        """Fence the MN owning ``va``, or every MN this session has used."""
        if va is not None:
            op = self._make(Op.FENCE, pid, va, 0, b"", thread)
            op.barrier = True
            return self._submit(op)
        mns = sorted(self.cc) or self.router.all_mns()
        handles = []
        for mn in mns:
            op = self._make(Op.FENCE, pid, 0, 0, b"", thread)
            op.barrier, op.fixed_mn = True, mn
            handles.append(self._submit(op))
        return _gather(handles)

    def ralloc_async(self, size: int, perms: Perm = Perm.RW, pid: int | None = None,
                     thread: int = 0) -> AsyncHandle:
        if size <= 0:
            raise InvalidArgument(f"allocation size must be positive, got {size}")
        pid = self.pid if pid is None else pid
        body = u64(size) + bytes([perms.value])
        rsize = self.router.region_size
        if not rsize:
            op = self._make(Op.ALLOC, pid, 0, 0, body, thread)
            op.decode = read_u64
            return self._submit(op)
        if size > rsize:
            raise InvalidArgument("allocation larger than a region")
        outer = AsyncHandle()
        self._thread_outstanding[thread] = self._thread_outstanding.get(thread, 0) + 1
        self.stats["issued"] += 1

        def attempt() -> Any:
            while True:
                region = self._alloc_cursor.get(pid, 0)
                lo = (region * rsize) >> self.page_shift
                hi = ((region + 1) * rsize) >> self.page_shift
                op = self._make(Op.ALLOC, pid, region * rsize, 0, body + u64(lo) + u64(hi), thread)
                op.decode, op.internal = read_u64, True
                h = self._submit(op)
                yield h
                if h.error is not None and h.error.status == Status.OUT_OF_VA:
                    self._alloc_cursor[pid] = region + 1
                    continue
                return h

        def finish(task: Waitable) -> None:
            self._thread_done(thread)
            if task.error is not None:
                outer._finish(error=task.error if isinstance(task.error, ClioError)
                              else ClioError(str(task.error)))
                return
            h = task.result
            outer._finish(h.value, h.error)

        task = self.net.spawn(_guard(attempt()), "ralloc")
        task.on_done(finish)
        return outer

    def rfree_async(self, va: int, size: int, pid: int | None = None, thread: int = 0) -> AsyncHandle:
        op = self._make(Op.FREE, pid, va, size, b"", thread)
        op.writes = self._pages(op.pid, va, size)
        return self._submit(op)

    def ext_async(self, opcode: int, payload: bytes, mn: int | None = None, va: int = 0,
                  pid: int | None = None, thread: int = 0) -> AsyncHandle:
        """Issue an extension request. ``mn`` pins it to one node."""
        op = self._make(opcode, pid, va, 0, payload, thread)
        op.fixed_mn = mn
        op.decode = bytes
        return self._submit(op)

    def ping_async(self, mn: int, thread: int = 0) -> AsyncHandle:
        op = self._make(Op.PING, None, 0, 0, b"", thread)
        op.fixed_mn = mn
        return self._submit(op)

    def rrelease_async(self, thread: int = 0) -> Waitable:
        """Completes once every op this thread issued has completed or failed."""
        w = Waitable()
        if self._thread_outstanding.get(thread, 0) == 0:
            w._complete()
        else:
            self._release_waiters.setdefault(thread, []).append(w)
        return w

    @staticmethod
    def rpoll(handle: AsyncHandle) -> tuple[str, Any]:
        if handle.state == "failed":
            return ("failed", handle.error)
        return (handle.state, handle.value)

    # -- public sync API

    def wait(self, handle: Waitable) -> Any:
        self.net.wait(handle)
        return handle.result() if isinstance(handle, AsyncHandle) else None

    def ralloc(self, size: int, perms: Perm = Perm.RW, pid: int | None = None, thread: int = 0) -> int:
        return self.wait(self.ralloc_async(size, perms, pid, thread))

    def rfree(self, va: int, size: int, pid: int | None = None, thread: int = 0) -> None:
        self.wait(self.rfree_async(va, size, pid, thread))

    def rread(self, va: int, length: int, pid: int | None = None, thread: int = 0) -> bytes:
        return self.wait(self.rread_async(va, length, pid, thread))

    def rwrite(self, va: int, data: bytes, pid: int | None = None, thread: int = 0) -> None:
        self.wait(self.rwrite_async(va, data, pid, thread))

    def rfaa(self, va: int, delta: int, pid: int | None = None, thread: int = 0) -> int:
        return self.wait(self.rfaa_async(va, delta, pid, thread))

    def rcas(self, va: int, expected: int, new: int, pid: int | None = None, thread: int = 0) -> int:
        return self.wait(self.rcas_async(va, expected, new, pid, thread))

    def rtas(self, va: int, pid: int | None = None, thread: int = 0) -> int:
        return self.wait(self.rtas_async(va, pid, thread))

    def rlock(self, va: int, pid: int | None = None, thread: int = 0) -> None:
        self.wait(self.rlock_async(va, pid, thread))

    def runlock(self, va: int, pid: int | None = None, thread: int = 0) -> None:
        self.wait(self.runlock_async(va, pid, thread))

    def rfence(self, va: int | None = None, pid: int | None = None, thread: int = 0) -> None:
        self.wait(self.rfence_async(va, pid, thread))

    def rrelease(self, thread: int = 0) -> None:
        self.wait(self.rrelease_async(thread))

    def ext(self, opcode: int, payload: bytes, mn: int | None = None, va: int = 0) -> bytes:
        return self.wait(self.ext_async(opcode, payload, mn, va))

    # -- admission

    def _route(self, op: _Op) -> int | None:
        if op.fixed_mn is not None:
            return op.fixed_mn
        if op.region is None:
            return self.router.lookup(self, op.pid, 0)
        return self.router.lookup(self, op.region[0], op.region[1])

    def _pump(self) -> None:
        """Admit every pending op whose hazards, route and windows allow it."""
        now = self.net.now
        blocked_r: set = set()
        blocked_w: set = set()
        pending_threads: set[int] = set()
        pending_barriers: set[int] = set()
        wake_at: int | None = None
        keep: deque[_Op] = deque()
        iwnd_blocked = False
        while self.pending:
            op = self.pending.popleft()
            ok = self._hazard_free(op, blocked_r, blocked_w, pending_threads, pending_barriers)
            mn = None
            if ok and op.region is not None and op.region in self.held_regions:
                ok = False
            if ok:
                mn = self._route(op)
                ok = mn is not None
            if ok:
                st = self.congestion(mn)
                if st.target_delay is None and op.opcode != Op.PING:
                    self._handshake(mn, st)
                    ok = False
                elif st.handshake is not None and op is not st.handshake:
                    ok = False
            if ok and op.opcode != Op.PING:
                if st.inflight >= math.ceil(st.cwnd):
                    ok = False
                else:
                    gap = st.pacing_gap()
                    if gap and st.last_send is not None and now < st.last_send + gap:
                        ok = False
                        t = st.last_send + gap
                        wake_at = t if wake_at is None else min(wake_at, t)
            if ok and self.inflight and self.iwnd_used + op.expected > self.config.iwnd_bytes:
                ok = False
                iwnd_blocked = True
            if ok and not iwnd_blocked:
                self._admit(op, mn)
                continue
            keep.append(op)
            blocked_r |= op.reads
            blocked_w |= op.writes
            pending_threads.add(op.thread)
            if op.barrier:
                pending_barriers.add(op.thread)
        self.pending = keep
        if wake_at is not None:
            self._schedule_pump(wake_at)

    def _hazard_free(self, op: _Op, blocked_r: set, blocked_w: set,
                     pending_threads: set[int], pending_barriers: set[int]) -> bool:
        t = op.thread
        if op.internal:
            pass
        elif op.barrier:
            if self._thread_inflight.get(t, 0) or t in pending_threads:
                return False
        elif self._thread_barriers.get(t, 0) or t in pending_barriers:
            return False
        for page in op.writes:
            if (self._page_writers.get(page) or self._page_readers.get(page)
                    or page in blocked_r or page in blocked_w):
                return False
        for page in op.reads:
            if self._page_writers.get(page) or page in blocked_w:
                return False
        return True

    def _schedule_pump(self, at: int) -> None:
        if self._pump_at is not None and self._pump_at <= at and self._pump_event is not None \
                and self._pump_event.alive:
            return
        self.net.cancel(self._pump_event)
        self._pump_at = at
        self._pump_event = self.net.schedule(at, self._pump_fire)

    def _pump_fire(self) -> None:
        self._pump_event = self._pump_at = None
        self._pump()

    def _handshake(self, mn: int, st: CongestionState) -> None:
        if st.handshake is not None:
            return
        op = self._make(Op.PING, None, 0, 0, b"", -1)
        op.fixed_mn, op.internal = mn, True
        st.handshake = op

        def done(h: Waitable) -> None:
            st.handshake = None
            base = st.srtt if st.srtt is not None else 0
            st.target_delay = int(self.config.target_delay_factor * base)
            self._pump()

        op.handle.on_done(done)
        self.pending.appendleft(op)

    def _admit(self, op: _Op, mn: int) -> None:
        op.mn = mn
        op.state = "inflight"
        op.root = op.handle.request_id = self._next_id()
        self.inflight[op.root] = op
        st = self.congestion(mn)
        st.inflight += 1
        self.iwnd_used += op.expected
        assert self.iwnd_used <= self.config.iwnd_bytes or len(self.inflight) == 1
        assert st.inflight <= max(1, math.ceil(st.cwnd)) or op.opcode == Op.PING
        for page in op.reads:
            self._page_readers[page] = self._page_readers.get(page, 0) + 1
        for page in op.writes:
            self._page_writers[page] = self._page_writers.get(page, 0) + 1
        if not op.internal:
            self._thread_inflight[op.thread] = self._thread_inflight.get(op.thread, 0) + 1
            if op.barrier:
                self._thread_barriers[op.thread] = self._thread_barriers.get(op.thread, 0) + 1
        if op.region is not None:
            self._region_inflight[op.region] = self._region_inflight.get(op.region, 0) + 1
        if op.opcode != Op.PING:
            gap = st.pacing_gap()
            paced = bool(gap and st.last_send is not None
                         and self.net.now == st.last_send + gap)
            if self.config.record_sends:
                st.sends.append((self.net.now, gap, st.cwnd, paced))
            st.last_send = self.net.now
        self._transmit(op, op.root, 0)

    def _transmit(self, op: _Op, rid: int, retry_of: int) -> None:
        op.ids.append(rid)
        self._by_id[rid] = op
        op.attempts += 1
        op.sent_at = self.net.now
        op.frags = {}
        self.net.cancel(op.timer)
        op.timer = self.net.schedule(self.net.now + self.config.timeout_ns, self._on_timeout,
                                     op, op.attempts)
        for p in self._packets(op, rid, retry_of):
            self.net.send(p)

    def _packets(self, op: _Op, rid: int, retry_of: int) -> list[Packet]:
        base = dict(src=self.cn_id, dst=op.mn, opcode=op.opcode, pid=op.pid, request_id=rid,
                    retry_of=retry_of)
        if op.opcode == Op.WRITE and len(op.payload) > self.frag_bytes:
            chunk = self.frag_bytes
            count = -(-len(op.payload) // chunk)
            return [Packet(**base, va=op.va + i * chunk, total_len=len(op.payload), frag_seq=i,
                           frag_count=count, payload=op.payload[i * chunk:(i + 1) * chunk])
                    for i in range(count)]
        total = op.length if op.opcode in (Op.READ, Op.FREE) else len(op.payload)
        return [Packet(**base, va=op.va, total_len=total, payload=op.payload)]

    # -- responses and retries

    def _on_packet(self, p: Packet) -> None:
        if not p.is_response or Op.ASSIGN <= (p.opcode & 0x7F) < 0x40:
            self.router.on_packet(self, p)
            return
        op = self._by_id.get(p.request_id)
        if op is None or op.state != "inflight":
            self.stats["stale_responses"] += 1
            return
        if p.corrupted:
            self.stats["corrupt_responses"] += 1
            self._retry(op, timeout=False)
            return
        if p.status == Status.NACK or p.status == Status.MIGRATING:
            self.stats["nacks"] += 1
            self._retry(op, timeout=False)
            return
        if p.frag_count > 1:
            op.frags[p.frag_seq] = p.payload
            if len(op.frags) < p.frag_count:
                return
            payload = b"".join(op.frags[i] for i in range(p.frag_count))
        else:
            payload = p.payload
        st = self.congestion(op.mn)
        sent = op.sent_at if p.request_id == op.ids[-1] else None
        if sent is not None:
            self._on_rtt(st, self.net.now - sent)
        if p.status == Status.OK:
            self._complete(op, op.decode(payload))
        else:
            self._complete(op, error=error_for(Status(p.status)))

    def _on_timeout(self, op: _Op, attempt: int) -> None:
        if op.state != "inflight" or op.attempts != attempt:
            return
        op.timer = None
        self.stats["timeouts"] += 1
        self._on_congestion_timeout(self.congestion(op.mn))
        self._retry(op, timeout=True)

    def _retry(self, op: _Op, timeout: bool) -> None:
        if op.attempts > self.config.max_retries:
            err = RequestTimeout(f"request {op.root:#x} gave up after {op.attempts} attempts") \
                if timeout else ClioError("request rejected by every attempt", Status.NACK)
            self._complete(op, error=err)
            return
        self.stats["retries"] += 1
        mn = self._route(op)
        if mn is not None and mn != op.mn:
            self._move(op, mn)
        self._transmit(op, self._next_id(), op.root)

    def _move(self, op: _Op, mn: int) -> None:
        old = self.congestion(op.mn)
        old.inflight -= 1
        self.congestion(mn).inflight += 1
        op.mn = mn

    def _complete(self, op: _Op, value: Any = None, error: ClioError | None = None) -> None:
        op.state = "done"
        self.net.cancel(op.timer)
        op.timer = None
        for rid in op.ids:
            self._by_id.pop(rid, None)
        del self.inflight[op.root]
        st = self.congestion(op.mn)
        st.inflight -= 1
        self.iwnd_used -= op.expected
        for page in op.reads:
            _dec(self._page_readers, page)
        for page in op.writes:
            _dec(self._page_writers, page)
        if op.region is not None:
            _dec(self._region_inflight, op.region)
            if op.region not in self._region_inflight:
                for w in self._drain_waiters.pop(op.region, []):
                    w._complete()
        if not op.internal:
            _dec(self._thread_inflight, op.thread)
            if op.barrier:
                _dec(self._thread_barriers, op.thread)
            self.stats["failed" if error is not None else "completed"] += 1
            self.latencies.append((op.opcode, self.net.now - op.handle.started))
        op.handle._finish(value, error)
        if not op.internal:
            self._thread_done(op.thread)
        self._pump()

    def _thread_done(self, thread: int) -> None:
        _dec(self._thread_outstanding, thread)
        if thread not in self._thread_outstanding:
            for w in self._release_waiters.pop(thread, []):
                w._complete()

    # -- region quiesce, driven by the cluster controller

    def hold_region(self, pid: int, region: int) -> Waitable:
        """Stop admitting ops to a region; completes once its inflight ops drain."""
        key = (pid, region)
        self.held_regions.add(key)
        w = Waitable()
        if not self._region_inflight.get(key):
            w._complete()
        else:
            self._drain_waiters.setdefault(key, []).append(w)
        return w

    def resume_region(self, pid: int, region: int) -> None:
        self.held_regions.discard((pid, region))
        self._pump()

    def fail_region(self, pid: int, region: int, error: ClioError) -> None:
        """Fail every not-yet-admitted op bound for a region that cannot be placed."""
        key = (pid, region)
        keep: deque[_Op] = deque()
        failed = []
        for op in self.pending:
            (failed if op.region == key else keep).append(op)
        self.pending = keep
        for op in failed:
            op.state = "done"
            if not op.internal:
                self.stats["failed"] += 1
            op.handle._finish(error=error)
            if not op.internal:
                self._thread_done(op.thread)
        self._pump()

    @property
    def outstanding(self) -> int:
        return len(self.pending) + len(self.inflight)


def _dec(counts: dict, key: Any) -> None:
    n = counts.get(key, 0) - 1
    if n <= 0:
        counts.pop(key, None)
    else:
        counts[key] = n


def _guard(gen):
    result = yield from gen
    return result


def _gather(handles: list[AsyncHandle]) -> AsyncHandle:
    out = AsyncHandle()
    if not handles:
        out._finish(None)
        return out

    def one_done(_w: Waitable) -> None:
        if out.done or not all(h.done for h in handles):
            return
        err = next((h.error for h in handles if h.error is not None), None)
        out._finish(None, err)

    for h in handles:
        h.on_done(one_done)
    return out
