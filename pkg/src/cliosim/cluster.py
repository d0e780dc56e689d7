"""Multi-MN coordination: region assignment, routing and migration.

A controller hands out 1 GB regions of each process's address space to
memory nodes, and moves a region from one MN to another when the source
fills up. Moving a region is a two-phase affair: every CN that has looked
the region up is told to hold it and acknowledges once its inflight
requests to the region have drained; only then does the source stream
pages to the destination. Ownership flips when the destination has
installed everything, and the CNs are released.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Generator

from .clib import AsyncHandle, ClibConfig, ClientSession
from .errors import ClioError, OutOfMemory, Status, error_for
from .memnode import MemoryNode, MnConfig
from .netsim import FaultPlan, Network, Waitable
from .page_table import Perm
from .wire import Op, Packet, read_u64, u64

log = logging.getLogger(__name__)

CONTROLLER_ID = 0
MN_BASE = 100
CN_BASE = 1000
RPC_ID_BIT = 1 << 39
MIGRATION_CHUNK = 64 * 1024


@dataclass
class Region:
    pid: int
    index: int
    owner: int
    state: str = "active"  # or "migrating"
    subscribers: set[int] = field(default_factory=set)


class Rpc:
    """Request/response helper with timeout-driven retransmission."""

    def __init__(self, net: Network, node_id: int, timeout_ns: int = 10_000_000) -> None:
        self.net = net
        self.node_id = node_id
        self.timeout_ns = timeout_ns
        self._counter = 0
        self._calls: dict[int, list] = {}

    def _next_id(self) -> int:
        self._counter += 1
        return (self.node_id << 40) | RPC_ID_BIT | self._counter

    def call(self, dst: int, opcode: int, pid: int = 0, va: int = 0, payload: bytes = b"",
             max_attempts: int | None = 8, timeout_ns: int | None = None) -> AsyncHandle:
        handle = AsyncHandle()
        state = {"attempts": 0, "root": 0, "timer": None, "ids": []}
        timeout = timeout_ns or self.timeout_ns

        def send() -> None:
            rid = self._next_id()
            if not state["root"]:
                state["root"] = rid
            state["attempts"] += 1
            state["ids"].append(rid)
            self._calls[rid] = [handle, state]
            state["timer"] = self.net.schedule(self.net.now + timeout, expire, state["attempts"])
            retry_of = 0 if rid == state["root"] else state["root"]
            self.net.send(Packet(self.node_id, dst, opcode, pid, rid, retry_of, va,
                                 len(payload), payload=payload))

        def expire(attempt: int) -> None:
            if handle.done or attempt != state["attempts"]:
                return
            if max_attempts is not None and state["attempts"] >= max_attempts:
                self._forget(state)
                handle._finish(error=ClioError("control message timed out", Status.TIMEOUT))
                return
            send()

        state["send"] = send
        send()
        return handle

    def _forget(self, state: dict) -> None:
        for rid in state["ids"]:
            self._calls.pop(rid, None)
        self.net.cancel(state["timer"])

    def on_response(self, p: Packet) -> bool:
        entry = self._calls.get(p.request_id)
        if entry is None:
            return False
        handle, state = entry
        if p.corrupted or p.status == Status.NACK:
            self.net.cancel(state["timer"])
            state["send"]()
            return True
        self._forget(state)
        handle._finish(p)
        return True


def _reply(net: Network, req: Packet, status: Status = Status.OK, payload: bytes = b"") -> None:
    net.send(req.reply(status, payload))


class Controller:
    """Global region map plus the migration driver."""

    def __init__(self, net: Network, mn_ids: list[int], node_id: int = CONTROLLER_ID,
                 region_size: int = 1 << 30, pressure_threshold: float = 0.85,
                 hard_capacity: float = 1.0, auto_migrate: bool = True,
                 timeout_ns: int = 10_000_000) -> None:
        if not mn_ids:
            raise ValueError("controller needs at least one MN")
        self.net = net
        self.node_id = node_id
        self.mn_ids = sorted(mn_ids)
        self.region_size = region_size
        self.pressure_threshold = pressure_threshold
        self.hard_capacity = hard_capacity
        self.auto_migrate = auto_migrate
        self.regions: dict[tuple[int, int], Region] = {}
        self.occupancy: dict[int, float] = {m: 0.0 for m in self.mn_ids}
        self.assigned: dict[int, int] = {m: 0 for m in self.mn_ids}
        self.last_access: dict[int, dict[tuple[int, int], int]] = {m: {} for m in self.mn_ids}
        self.rpc = Rpc(net, node_id, timeout_ns)
        self.migrating_from: set[int] = set()
        self.migrations: list[dict[str, Any]] = []
        net.register(node_id, self._on_packet)

    # -- assignment

    def choose(self) -> int:
        """MN with the lowest reported occupancy; ties go to fewer regions, then lower id."""
        live = [m for m in self.mn_ids if self.occupancy[m] < self.hard_capacity]
        if not live:
            raise OutOfMemory("every memory node is at capacity")
        return min(live, key=lambda m: (self.occupancy[m], self.assigned[m], m))

    def assign_region(self, pid: int, index: int) -> int:
        region = self.regions.get((pid, index))
        if region is not None:
            return region.owner
        owner = self.choose()
        self.regions[(pid, index)] = Region(pid, index, owner)
        self.assigned[owner] += 1
        return owner

    def owner(self, pid: int, index: int) -> int | None:
        region = self.regions.get((pid, index))
        return None if region is None else region.owner

    # -- messages

    def _on_packet(self, p: Packet) -> None:
        if p.is_response:
            self.rpc.on_response(p)
            return
        if p.corrupted:
            _reply(self.net, p, Status.NACK)
            return
        if p.opcode == Op.ASSIGN:
            try:
                owner = self.assign_region(p.pid, p.va)
            except ClioError as exc:
                _reply(self.net, p, exc.status)
                return
            region = self.regions[(p.pid, p.va)]
            region.subscribers.add(p.src)
            _reply(self.net, p, Status.OK, u64(owner) + bytes([region.state == "migrating"]))
        elif p.opcode == Op.REPORT:
            self._on_report(p)
        else:
            _reply(self.net, p, Status.BAD_OP)

    def _on_report(self, p: Packet) -> None:
        mn = p.src
        occ = read_u64(p.payload) / 1e6
        self.occupancy[mn] = occ
        access = {}
        for off in range(8, len(p.payload), 20):
            pid, index, t = struct.unpack_from(">IQQ", p.payload, off)
            access[(pid, index)] = t
        self.last_access[mn] = access
        if self.auto_migrate and occ > self.pressure_threshold and mn not in self.migrating_from:
            self._pressure_migrate(mn)

    def _pressure_migrate(self, mn: int) -> None:
        owned = [(self.last_access[mn].get(k, -1), k) for k, r in self.regions.items()
                 if r.owner == mn and r.state == "active"]
        others = [m for m in self.mn_ids if m != mn and self.occupancy[m] < self.pressure_threshold]
        if not owned or not others:
            return
        _, (pid, index) = min(owned)
        dst = min(others, key=lambda m: (self.occupancy[m], self.assigned[m], m))
        log.info("pressure on MN %d: moving region (%d, %d) to MN %d", mn, pid, index, dst)
        self.migrate(pid, index, dst)

    # -- migration

    def migrate(self, pid: int, index: int, dst: int) -> AsyncHandle:
        """Move one region to ``dst``. The handle's value is the number of pages moved."""
        out = AsyncHandle()
        region = self.regions.get((pid, index))
        if region is None:
            out._finish(error=ClioError("region not assigned", Status.NOT_FOUND))
            return out
        if region.state != "active":
            out._finish(error=ClioError("region already migrating", Status.MIGRATING))
            return out
        if region.owner == dst:
            out._finish(0)
            return out
        task = self.net.spawn(self._migrate(region, dst), f"migrate {pid}/{index}")

        def done(t: Waitable) -> None:
            if t.error is not None:
                out._finish(error=t.error if isinstance(t.error, ClioError) else ClioError(str(t.error)))
            elif isinstance(t.result, ClioError):
                out._finish(error=t.result)
            else:
                out._finish(t.result)

        task.on_done(done)
        return out

    def _migrate(self, region: Region, dst: int) -> Generator[Any, Any, Any]:
        src = region.owner
        region.state = "migrating"
        self.migrating_from.add(src)
        record = {"pid": region.pid, "region": region.index, "src": src, "dst": dst,
                  "start": self.net.now}
        try:
            holds = [self.rpc.call(cn, Op.HOLD, region.pid, region.index, max_attempts=None)
                     for cn in sorted(region.subscribers)]
            yield holds
            h = self.rpc.call(src, Op.MIGRATE, region.pid, region.index, u64(dst),
                              max_attempts=None)
            yield h
            resp: Packet = h.value
            if resp.status == Status.OK:
                moved = read_u64(resp.payload)
                self.assigned[src] -= 1
                self.assigned[dst] += 1
                region.owner = dst
                result: Any = moved
            else:
                result = ClioError("migration aborted", Status(resp.status))
            region.state = "active"
            resumes = [self.rpc.call(cn, Op.RESUME, region.pid, region.index, u64(region.owner),
                                     max_attempts=None)
                       for cn in sorted(region.subscribers)]
            yield resumes
        finally:
            self.migrating_from.discard(src)
        record.update(end=self.net.now, ok=not isinstance(result, ClioError),
                      pages=result if isinstance(result, int) else 0)
        self.migrations.append(record)
        return result


class MigrationAgent:
    """MN-side handlers for migration and periodic occupancy reports."""

    def __init__(self, mn: MemoryNode, controller_id: int = CONTROLLER_ID,
                 report_interval_ns: int = 0, chunk_bytes: int = MIGRATION_CHUNK) -> None:
        self.mn = mn
        self.net = mn.net
        self.controller_id = controller_id
        self.chunk_bytes = chunk_bytes
        self.rpc = Rpc(mn.net, mn.node_id, mn.config.timeout_ns)
        self._outgoing: dict[int, Any] = {}   # migration root id -> state/result
        self._incoming: dict[int, dict] = {}  # migration id -> chunks
        self._installed: dict[int, Status] = {}
        self.pages_sent = 0
        for op in (Op.MIGRATE, Op.MIGRATE_DATA):
            mn.control_handlers[op] = self._on_packet
        mn.control_handlers[Op.REPORT] = self._on_packet
        if report_interval_ns:
            self.report_interval_ns = report_interval_ns
            self.net.schedule(self.net.now + report_interval_ns, self._report, daemon=True)

    def _on_packet(self, p: Packet) -> None:
        if p.is_response:
            self.rpc.on_response(p)
            return
        if p.corrupted:
            _reply(self.net, p, Status.NACK)
            return
        if p.opcode == Op.MIGRATE:
            self._on_migrate(p)
        elif p.opcode == Op.MIGRATE_DATA:
            self._on_data(p)

    # -- reports

    def report_payload(self) -> bytes:
        mn = self.mn
        body = bytearray(u64(int(mn.metadata.occupancy() * 1e6)))
        for (pid, index), t in sorted(mn.region_access.items()):
            body += struct.pack(">IQQ", pid, index, t)
        return bytes(body)

    def _report(self) -> None:
        self.net.send(Packet(self.mn.node_id, self.controller_id, Op.REPORT,
                             request_id=self.rpc._next_id(), payload=self.report_payload()))
        self.net.schedule(self.net.now + self.report_interval_ns, self._report, daemon=True)

    # -- source side

    def _on_migrate(self, p: Packet) -> None:
        root = p.root_id
        state = self._outgoing.get(root)
        if state == "running":
            return
        if state is not None:
            status, moved = state
            _reply(self.net, p, status, u64(moved))
            return
        self._outgoing[root] = "running"
        self.net.spawn(self._stream(p), f"stream {p.pid}/{p.va}")

    def _stream(self, req: Packet) -> Generator[Any, Any, Any]:
        mn = self.mn
        pid, index, dst = req.pid, req.va, read_u64(req.payload)
        rsize = mn.config.region_size
        lo, hi = (index * rsize) >> mn.page_shift, ((index + 1) * rsize) >> mn.page_shift
        key = (pid, index)
        mn.migrating.add(key)
        ranges, entries = mn.metadata.export_range(pid, lo, hi)
        valid = [e for e in entries if e.valid]
        chunks = self._encode(ranges, valid)
        mig_id = req.root_id
        status = Status.OK
        for seq, body in enumerate(chunks):
            payload = u64(mig_id) + struct.pack(">II", seq, len(chunks)) + body
            h = self.rpc.call(dst, Op.MIGRATE_DATA, pid, index, payload, max_attempts=None)
            yield h
            if h.value.status != Status.OK:
                status = Status(h.value.status)
                break
        if status == Status.OK:
            mn.metadata.drop_range(pid, lo, hi)
            mn.region_access.pop(key, None)
            self.pages_sent += len(valid)
        mn.migrating.discard(key)
        moved = len(valid) if status == Status.OK else 0
        final = Status.OK if status == Status.OK else Status.ABORTED
        self._outgoing[req.root_id] = (final, moved)
        _reply(self.net, req, final, u64(moved))

    def _encode(self, ranges: list[tuple[int, int, Perm]], valid: list) -> list[bytes]:
        head = bytearray(struct.pack(">I", len(ranges)))
        for start, end, perms in ranges:
            head += struct.pack(">QQB", start, end, perms.value)
        head += struct.pack(">I", len(valid))
        for e in valid:
            head += u64(e.vpn)
        chunks = [bytes(head)]
        step = self.chunk_bytes
        for e in valid:
            page = self.mn.memory.get(e.ppn)
            if page is None:
                continue
            for off in range(0, len(page), step):
                part = bytes(page[off:off + step])
                if part.count(0) == len(part):
                    continue
                chunks.append(struct.pack(">QI", e.vpn, off) + part)
        return chunks

    # -- destination side

    def _on_data(self, p: Packet) -> None:
        mig_id = read_u64(p.payload)
        seq, total = struct.unpack_from(">II", p.payload, 8)
        if mig_id in self._installed:
            _reply(self.net, p, self._installed[mig_id] if seq == total - 1 else Status.OK)
            return
        chunks = self._incoming.setdefault(mig_id, {})
        chunks[seq] = p.payload[16:]
        if len(chunks) < total:
            _reply(self.net, p, Status.OK)
            return
        del self._incoming[mig_id]
        status = self._install(p.pid, [chunks[i] for i in range(total)])
        self._installed[mig_id] = status
        _reply(self.net, p, status)

    def _install(self, pid: int, chunks: list[bytes]) -> Status:
        head = chunks[0]
        (nranges,) = struct.unpack_from(">I", head, 0)
        off, ranges = 4, []
        for _ in range(nranges):
            start, end, perms = struct.unpack_from(">QQB", head, off)
            ranges.append((start, end, Perm(perms)))
            off += 17
        (nvalid,) = struct.unpack_from(">I", head, off)
        off += 4
        vpns = [read_u64(head, off + 8 * i) for i in range(nvalid)]
        try:
            fresh = self.mn.metadata.import_range(pid, ranges, vpns)
        except OutOfMemory:
            return Status.ABORTED
        for ppn in fresh.values():
            self.mn.memory.pop(ppn, None)
        for body in chunks[1:]:
            vpn, page_off = struct.unpack_from(">QI", body, 0)
            self.mn.write_phys(fresh[vpn], page_off, body[12:])
        return Status.OK


class ClusterRouter:
    """CN-side region cache. Misses ask the controller; HOLD/RESUME arrive here."""

    def __init__(self, controller_id: int, mn_ids: list[int], region_size: int = 1 << 30,
                 timeout_ns: int = 10_000_000) -> None:
        self.controller_id = controller_id
        self.mn_ids = sorted(mn_ids)
        self.region_size = region_size
        self.timeout_ns = timeout_ns
        self.routes: dict[tuple[int, int], int] = {}
        self._asking: set[tuple[int, int]] = set()
        self.rpc: Rpc | None = None
        self.lookups = 0

    def _rpc(self, session: ClientSession) -> Rpc:
        if self.rpc is None:
            self.rpc = Rpc(session.net, session.cn_id, self.timeout_ns)
        return self.rpc

    def all_mns(self) -> list[int]:
        return list(self.mn_ids)

    def lookup(self, session: ClientSession, pid: int, index: int) -> int | None:
        key = (pid, index)
        owner = self.routes.get(key)
        if owner is not None:
            return owner
        if key not in self._asking:
            self._asking.add(key)
            self.lookups += 1
            h = self._rpc(session).call(self.controller_id, Op.ASSIGN, pid, index,
                                        max_attempts=None)

            def done(w: Waitable) -> None:
                self._asking.discard(key)
                p: Packet = h.value
                if p.status != Status.OK:
                    log.warning("region (%d, %d) could not be assigned: %s", pid, index, p.status)
                    session.fail_region(pid, index, error_for(Status(p.status)))
                    return
                self.routes[key] = read_u64(p.payload)
                if p.payload[8]:
                    session.held_regions.add(key)
                session._pump()

            h.on_done(done)
        return None

    def on_packet(self, session: ClientSession, p: Packet) -> None:
        if p.is_response:
            self._rpc(session).on_response(p)
            return
        if p.corrupted:
            _reply(session.net, p, Status.NACK)
            return
        key = (p.pid, p.va)
        if p.opcode == Op.HOLD:
            w = session.hold_region(p.pid, p.va)
            w.on_done(lambda _w: _reply(session.net, p, Status.OK))
        elif p.opcode == Op.RESUME:
            self.routes[key] = read_u64(p.payload)
            session.resume_region(p.pid, p.va)
            _reply(session.net, p, Status.OK)


@dataclass
class Cluster:
    net: Network
    controller: Controller
    mns: list[MemoryNode]
    agents: list[MigrationAgent]
    sessions: list[ClientSession]

    @classmethod
    def build(cls, n_mns: int = 2, n_cns: int = 1, mn_config: MnConfig | None = None,
              clib_config: ClibConfig | None = None, plan: FaultPlan | None = None,
              net: Network | None = None, pressure_threshold: float = 0.85,
              auto_migrate: bool = False, report_interval_ns: int = 0,
              pids: list[int] | None = None) -> "Cluster":
        net = net or Network(plan)
        mn_config = mn_config or MnConfig()
        ids = [MN_BASE + i for i in range(n_mns)]
        controller = Controller(net, ids, region_size=mn_config.region_size,
                                pressure_threshold=pressure_threshold, auto_migrate=auto_migrate,
                                timeout_ns=mn_config.timeout_ns)
        mns, agents = [], []
        for mid in ids:
            mn = MemoryNode(net, mid, mn_config)
            mns.append(mn)
            agents.append(MigrationAgent(mn, controller.node_id, report_interval_ns))
        sessions = []
        for i in range(n_cns):
            router = ClusterRouter(controller.node_id, ids, mn_config.region_size,
                                   mn_config.timeout_ns)
            pid = pids[i] if pids else i + 1
            sessions.append(ClientSession(net, CN_BASE + i, router, pid, clib_config))
        return cls(net, controller, mns, agents, sessions)

    def mn(self, node_id: int) -> MemoryNode:
        return next(m for m in self.mns if m.node_id == node_id)

    def read_virtual(self, pid: int, va: int, length: int) -> bytes:
        size = self.controller.region_size
        out = bytearray()
        pos, end = va, va + length
        while pos < end:
            owner = self.controller.owner(pid, pos // size)
            if owner is None:
                raise KeyError("region not assigned")
            n = min(end, (pos // size + 1) * size) - pos
            out += self.mn(owner).read_virtual(pid, pos, n)
            pos += n
        return bytes(out)
