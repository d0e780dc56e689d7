from __future__ import annotations

import itertools

import pytest

from cliosim.errors import Status
from cliosim.memnode import DedupBuffer, MemoryNode, MnConfig
from cliosim.netsim import FaultPlan, Network
from cliosim.page_table import Perm
from cliosim.wire import Op, Packet, ext, read_u64, u64

MN = 100
CN = 1
PAGE = 4 << 20
_ids = itertools.count(1)


def node(**kw) -> MemoryNode:
    net = Network(FaultPlan())
    net.register(CN, lambda p: None)
    return MemoryNode(net, MN, MnConfig(**kw))


def req(op, va=0, payload=b"", pid=1, length=None, rid=None, retry_of=0, seq=0, count=1) -> Packet:
    return Packet(CN, MN, int(op), pid, rid or next(_ids), retry_of, va,
                  len(payload) if length is None else length, seq, count, payload)


def one(mn: MemoryNode, p: Packet) -> Packet:
    out = mn.ingress(p)
    assert len(out) == 1, out
    return out[0]


def alloc(mn: MemoryNode, size: int = PAGE, pid: int = 1, perms: Perm = Perm.RW) -> int:
    return mn.metadata.alloc_va(pid, size, perms).va


def test_corrupted_request_is_nacked_without_side_effects():
    mn = node()
    va = alloc(mn)
    p = req(Op.WRITE, va, b"x" * 8)
    p.corrupted = True
    r = one(mn, p)
    assert r.status == Status.NACK
    assert mn.stats["requests"] == 0 and not mn.memory
    assert mn.read_virtual(1, va, 8) == bytes(8)


def test_unknown_opcode_is_bad_op():
    mn = node()
    before = mn.control_state()
    assert one(mn, req(0x3F)).status == Status.BAD_OP
    assert one(mn, req(ext(30))).status == Status.BAD_OP
    assert mn.control_state() == before


def test_unallocated_access_is_perm():
    mn = node()
    assert one(mn, req(Op.READ, PAGE, length=8)).status == Status.PERM
    assert one(mn, req(Op.WRITE, PAGE, b"a")).status == Status.PERM
    assert mn.stats["perm_errors"] == 2


def test_read_only_page_rejects_writes():
    mn = node()
    va = alloc(mn, perms=Perm.READ)
    assert one(mn, req(Op.READ, va, length=8)).status == Status.OK
    assert one(mn, req(Op.WRITE, va, b"a")).status == Status.PERM
    assert one(mn, req(Op.FAA, va, u64(1))).status == Status.PERM


def test_write_then_read():
    mn = node()
    va = alloc(mn)
    assert one(mn, req(Op.WRITE, va + 100, b"0123456789abcdef")).status == Status.OK
    r = one(mn, req(Op.READ, va + 100, length=16))
    assert r.payload == b"0123456789abcdef"
    assert one(mn, req(Op.READ, va, length=4)).payload == bytes(4)


def test_write_spanning_pages():
    mn = node()
    va = alloc(mn, 2 * PAGE)
    data = bytes(range(200))
    one(mn, req(Op.WRITE, va + PAGE - 100, data))
    assert mn.read_virtual(1, va + PAGE - 100, 200) == data
    assert mn.stats["faults"] == 2


def test_large_read_is_fragmented():
    mn = node()
    va = alloc(mn)
    one(mn, req(Op.WRITE, va, b"z" * 1400))
    out = mn.ingress(req(Op.READ, va, length=4000))
    assert [p.frag_seq for p in out] == [0, 1, 2]
    assert all(p.frag_count == 3 and p.total_len == 4000 for p in out)
    assert b"".join(p.payload for p in out) == b"z" * 1400 + bytes(2600)


def test_out_of_order_fragments_one_response():
    mn = node()
    va = alloc(mn)
    rid = next(_ids)
    chunks = [b"A" * 1459, b"B" * 1459, b"C" * 100]
    frags = [req(Op.WRITE, va + i * 1459, c, rid=rid, seq=i, count=3, length=3018)
             for i, c in enumerate(chunks)]
    assert mn.ingress(frags[2]) == []
    assert mn.ingress(frags[0]) == []
    out = mn.ingress(frags[1])
    assert len(out) == 1 and out[0].status == Status.OK and out[0].request_id == rid
    assert mn.read_virtual(1, va, 3018) == b"".join(chunks)
    assert not mn.partial


def test_fault_pages_are_distinct():
    mn = node(page_size=4096, physical_bytes=8 << 20, free_buffer_pages=16)
    base = mn.metadata.alloc_va(1, 1000 * 4096).va
    for i in range(1000):
        assert one(mn, req(Op.WRITE, base + i * 4096, b"\x01")).status == Status.OK
    ppns = [mn.table.peek(1, base // 4096 + i).ppn for i in range(1000)]
    assert len(set(ppns)) == 1000
    assert mn.stats["faults"] == 1000


def test_tlb_hit_needs_no_bucket_fetch():
    mn = node()
    va = alloc(mn)
    one(mn, req(Op.WRITE, va, b"a"))
    fetches = mn.table.bucket_fetches
    one(mn, req(Op.READ, va, length=1))
    assert mn.table.bucket_fetches == fetches
    assert mn.service_log[-1][3] == "tlb"


def test_service_times_by_path():
    mn = node()
    va = alloc(mn)
    one(mn, req(Op.READ, va, length=16))          # fault
    mn.tlb.invalidate(1, va // PAGE)
    one(mn, req(Op.READ, va, length=16))          # page-table hit
    one(mn, req(Op.READ, va, length=16))          # TLB hit
    kinds = [(k, ns) for _, _, ns, k in mn.service_log]
    step, dram = mn.config.step_ns, mn.config.dram_ns
    tlb = step + step + dram + step + step        # parse, tlb, dram, 1 beat, emit
    assert kinds == [("fault", tlb + dram + 3 * step), ("pt", tlb + dram), ("tlb", tlb)]


def test_fault_stall_then_completes():
    mn = node(free_buffer_pages=1, physical_bytes=64 << 20)
    va = alloc(mn, 2 * PAGE)
    mn.ingress(req(Op.WRITE, va, b"a"))
    out = mn.ingress(req(Op.WRITE, va + PAGE, b"b"))
    assert [p.status for p in out] == [Status.OK]
    assert mn.stats["fault_stalls"] == 0  # buffer was refilled in between
    mn.metadata.buffer.pages.clear()
    va2 = alloc(mn)
    out = mn.ingress(req(Op.WRITE, va2, b"c"))
    assert [p.status for p in out] == [Status.OK]
    assert mn.stats["fault_stalls"] == 1


def test_atomics():
    mn = node()
    va = alloc(mn)
    assert read_u64(one(mn, req(Op.FAA, va, u64(5))).payload) == 0
    assert read_u64(one(mn, req(Op.FAA, va, u64(2))).payload) == 5
    assert read_u64(one(mn, req(Op.CAS, va, u64(6) + u64(9))).payload) == 7  # miss
    assert read_u64(one(mn, req(Op.CAS, va, u64(7) + u64(9))).payload) == 7  # hit
    assert int.from_bytes(mn.read_virtual(1, va, 8), "little") == 9
    assert read_u64(one(mn, req(Op.TAS, va + 8)).payload) == 0
    assert read_u64(one(mn, req(Op.TAS, va + 8)).payload) == 1
    assert one(mn, req(Op.FAA, va + 4, u64(1))).status == Status.INVALID_ARGUMENT


def test_faa_wraps():
    mn = node()
    va = alloc(mn)
    one(mn, req(Op.FAA, va, u64(2**64 - 1)))
    one(mn, req(Op.FAA, va, u64(2)))
    assert int.from_bytes(mn.read_virtual(1, va, 8), "little") == 1


def test_retry_of_executed_atomic_is_replayed():
    mn = node()
    va = alloc(mn)
    first = req(Op.FAA, va, u64(10))
    one(mn, first)
    again = one(mn, req(Op.FAA, va, u64(10), retry_of=first.request_id))
    assert read_u64(again.payload) == 0
    assert int.from_bytes(mn.read_virtual(1, va, 8), "little") == 10
    assert mn.stats["dedup_replays"] == 1


def test_evicted_record_re_executes():
    mn = node(dedup_bytes=64)
    va = alloc(mn)
    first = req(Op.FAA, va, u64(1))
    one(mn, first)
    for _ in range(5):
        one(mn, req(Op.FAA, va + 8, u64(1)))
    assert mn.dedup.lookup(first.request_id) is None
    one(mn, req(Op.FAA, va, u64(1), retry_of=first.request_id))
    assert int.from_bytes(mn.read_virtual(1, va, 8), "little") == 2


def test_dedup_buffer_is_byte_bounded_fifo():
    d = DedupBuffer(100)
    for i in range(10):
        d.record(i, i, 1, b"12345678")
    assert d.used_bytes <= 100 and d.evictions == 10 - len(d)
    assert d.lookup(9) is not None and d.lookup(0) is None
    with pytest.raises(ValueError):
        d.record(99, 99, 1, bytes(200))


def test_lock_queue_and_unlock():
    mn = node()
    va = alloc(mn)
    a, b = req(Op.LOCK, va), req(Op.LOCK, va)
    assert one(mn, a).status == Status.OK
    assert mn.ingress(b) == []  # queued
    out = mn.ingress(req(Op.UNLOCK, va))
    assert [(p.request_id, p.status) for p in out] == [(out[0].request_id, Status.OK),
                                                        (b.request_id, Status.OK)]
    assert mn.sync.locks[(1, va)] == b.request_id
    assert one(mn, req(Op.UNLOCK, va)).status == Status.OK
    assert one(mn, req(Op.UNLOCK, va)).status == Status.BAD_UNLOCK


def test_lock_retry_is_replayed():
    mn = node()
    va = alloc(mn)
    a = req(Op.LOCK, va)
    one(mn, a)
    assert one(mn, req(Op.LOCK, va, retry_of=a.request_id)).status == Status.OK
    assert not mn.sync.waiters


def test_fence_waits_for_slow_path_and_holds_later_requests():
    mn = node()
    net = mn.net
    sent: list[Packet] = []
    mn._capture = sent
    va = alloc(mn)
    mn.receive(req(Op.ALLOC, payload=u64(PAGE) + bytes([3])))
    fence = req(Op.FENCE)
    mn.receive(fence)
    later = req(Op.WRITE, va, b"q")
    mn.receive(later)
    assert sent == [] and len(mn.sync.held) == 1
    net.run()
    order = [p.opcode & 0x7F for p in sent]
    assert order == [Op.ALLOC, Op.FENCE, Op.WRITE]


def test_fence_when_idle_answers_immediately():
    mn = node()
    assert one(mn, req(Op.FENCE)).status == Status.OK


def test_alloc_and_free_over_the_wire():
    mn = node()
    r = one(mn, req(Op.ALLOC, payload=u64(PAGE + 1) + bytes([3])))
    va, size, retries = read_u64(r.payload), read_u64(r.payload, 8), read_u64(r.payload, 16)
    assert (size, retries) == (2 * PAGE, 0) and va % PAGE == 0
    assert one(mn, req(Op.FREE, va, length=PAGE)).status == Status.NOT_ALLOCATED
    assert one(mn, req(Op.FREE, va, length=2 * PAGE)).status == Status.OK
    assert one(mn, req(Op.READ, va, length=1)).status == Status.PERM


def test_alloc_retry_is_not_re_executed():
    mn = node()
    a = req(Op.ALLOC, payload=u64(PAGE))
    first = one(mn, a)
    again = one(mn, req(Op.ALLOC, payload=u64(PAGE), retry_of=a.request_id))
    assert again.payload == first.payload
    assert len(mn.metadata.vma(1).starts) == 1


def test_ping():
    mn = node()
    assert one(mn, req(Op.PING)).status == Status.OK


def test_migrating_region_answers_migrating():
    mn = node()
    va = alloc(mn)
    mn.migrating.add((1, mn.region_of(va)))
    assert one(mn, req(Op.READ, va, length=1)).status == Status.MIGRATING


class Echo:
    def idempotent(self, p):
        return False

    def handle(self, mn, p):
        return Status.OK, p.payload[::-1], 40


def test_extension_dispatch_and_dedup():
    mn = node()
    mn.register_extension(ext(9), Echo())
    a = req(ext(9), payload=b"abc")
    assert one(mn, a).payload == b"cba"
    assert one(mn, req(ext(9), payload=b"zzz", retry_of=a.request_id)).payload == b"cba"
    assert mn.service_log[0][2] == 2 * mn.config.step_ns + 40


def test_control_state_size_is_constant():
    mn = node()
    size = len(mn.control_state())
    va = alloc(mn, 4 * PAGE)
    for i in range(200):
        mn.ingress(req(Op.FAA, va + 8 * (i % 50), u64(1), pid=1))
    one(mn, req(Op.LOCK, va))
    mn.ingress(req(Op.LOCK, va))
    assert len(mn.control_state()) == size
    assert mn.live_control_entries()["lock_waiters"] == 1


def test_config_validation():
    with pytest.raises(ValueError):
        MnConfig(page_size=12345)
    with pytest.raises(ValueError):
        MnConfig(physical_bytes=PAGE + 1)
