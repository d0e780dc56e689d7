from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from cliosim.errors import InvalidArgument, NotAllocated, OutOfMemory, OutOfVa
from cliosim.metadata import BuddyAllocator, FreePageBuffer, MetadataPlane, VmaTree
from cliosim.page_table import HashPageTable, Perm, Tlb

PAGE = 4 << 20


def plane(buckets: int = 64, pages: int = 256, slots: int = 8) -> MetadataPlane:
    return MetadataPlane(HashPageTable(buckets, slots), pages, PAGE, Tlb(16))


# -- buddy allocator


def test_buddy_split_and_merge():
    b = BuddyAllocator(8)
    assert b.alloc(0) == 0
    assert b.alloc(0) == 1
    assert b.alloc(1) == 2
    assert b.free_pages == 4
    for addr, order in ((0, 0), (1, 0), (2, 1)):
        b.free(addr, order)
    assert b.free_pages == 8
    assert b.alloc(3) == 0  # fully coalesced again


def test_buddy_non_power_of_two():
    b = BuddyAllocator(5)
    got = sorted(b.alloc(0) for _ in range(5))
    assert got == [0, 1, 2, 3, 4]
    assert b.alloc(0) is None


def test_buddy_double_free_and_range():
    b = BuddyAllocator(4)
    p = b.alloc(0)
    b.free(p)
    with pytest.raises(ValueError):
        b.free(p)
    with pytest.raises(ValueError):
        b.free(4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.lists(st.tuples(st.booleans(), st.integers(0, 3)), max_size=80))
def test_buddy_never_hands_out_a_page_twice(n, script):
    b = BuddyAllocator(n)
    held: dict[int, int] = {}
    for do_alloc, order in script:
        if do_alloc or not held:
            addr = b.alloc(order)
            if addr is None:
                continue
            pages = set(range(addr, addr + (1 << order)))
            assert all(not (pages & set(range(a, a + (1 << o)))) for a, o in held.items())
            assert max(pages) < n
            held[addr] = order
        else:
            addr = next(iter(held))
            b.free(addr, held.pop(addr))
        assert b.free_pages == n - sum(1 << o for o in held.values())


def test_free_page_buffer_bounds():
    buf = FreePageBuffer(2)
    buf.push(1)
    buf.push(2)
    assert buf.full
    with pytest.raises(OverflowError):
        buf.push(3)
    assert buf.pop() == 1 and buf.pop() == 2 and buf.pop() is None


# -- VMA tree


def test_vma_find_free_skips_ranges_and_unusable():
    t = VmaTree(1)
    t.add(1, 4, Perm.RW)
    assert t.find_free(2, 1, 100) == 4
    t.mark_unusable(5)
    assert t.find_free(2, 1, 100) == 6
    assert t.find_free(1, 1, 100) == 4
    t.clear_unusable(5)
    assert t.find_free(2, 1, 100) == 4
    assert t.find_free(200, 1, 100) is None
    assert t.perms_for(2) == Perm.RW and t.perms_for(4) is None


# -- VA allocation


def test_alloc_rounds_up_and_skips_vpn_zero():
    m = plane()
    a = m.alloc_va(1, PAGE + 1)
    assert a.npages == 2 and a.va == PAGE and a.retries == 0
    assert m.table.peek(1, 1) is not None and m.table.peek(1, 2) is not None
    assert not m.table.peek(1, 1).valid


def test_alloc_rejects_bad_size():
    with pytest.raises(InvalidArgument):
        plane().alloc_va(1, 0)


def test_alloc_never_overflows_a_bucket():
    # 2 buckets x 2 slots: every placement must be pre-checked
    m = plane(buckets=2, pages=16, slots=2)
    done = 0
    for pid in (1, 2, 3, 4):
        try:
            m.alloc_va(pid, PAGE)
            done += 1
        except OutOfVa:
            break
        assert max(m.table.occupancy()) <= 2
    assert done == 4
    with pytest.raises(OutOfVa):
        m.alloc_va(5, PAGE)


def test_retry_marks_unusable_and_free_clears():
    m = plane(buckets=2, pages=16, slots=1)
    first = m.alloc_va(1, PAGE)
    second = m.alloc_va(1, PAGE)  # the other bucket
    assert {m.table.index(1, first.va // PAGE), m.table.index(1, second.va // PAGE)} == {0, 1}
    with pytest.raises(OutOfVa):
        m.alloc_va(1, PAGE)
    assert m.vma(1).unusable
    m.free_va(1, first.va, PAGE)
    assert not any(m.table.index(1, v) == m.table.index(1, first.va // PAGE)
                   for v in m.vma(1).unusable)
    again = m.alloc_va(1, PAGE)
    assert m.table.index(1, again.va // PAGE) == m.table.index(1, first.va // PAGE)


def test_retry_histogram_counts_allocations():
    m = plane()
    for _ in range(5):
        m.alloc_va(1, PAGE)
    assert sum(m.retry_histogram.values()) == 5


def test_window_bounds_search():
    m = plane()
    a = m.alloc_va(1, PAGE, window=(300, 310))
    assert 300 <= a.va // PAGE < 310
    with pytest.raises(OutOfVa):
        m.alloc_va(1, 11 * PAGE, window=(300, 310))


def test_free_requires_exact_match():
    m = plane()
    a = m.alloc_va(1, 2 * PAGE)
    with pytest.raises(NotAllocated):
        m.free_va(1, a.va, PAGE)
    with pytest.raises(NotAllocated):
        m.free_va(1, a.va + PAGE, PAGE)
    with pytest.raises(NotAllocated):
        m.free_va(2, a.va, 2 * PAGE)
    assert m.free_va(1, a.va, 2 * PAGE) == [a.va // PAGE, a.va // PAGE + 1]
    assert len(m.table) == 0
    with pytest.raises(NotAllocated):
        m.free_va(1, a.va, 2 * PAGE)


def test_free_returns_backing_page_and_invalidates_tlb():
    m = plane(pages=8)
    m.refill_free_pages()
    a = m.alloc_va(1, PAGE)
    e = m.table.peek(1, a.va // PAGE)
    e.ppn, e.valid = m.pop_free_page(), True
    m.tlb.fill(1, e.vpn, e.ppn, e.perms)
    free_before = m.buddy.free_pages
    m.free_va(1, a.va, PAGE)
    assert m.buddy.free_pages == free_before + 1
    assert (1, e.vpn) not in m.tlb


def test_refill_and_occupancy():
    m = plane(pages=8)
    assert m.refill_free_pages() == 8
    assert m.occupancy() == 0.0
    m.pop_free_page()
    assert m.used_pages() == 1


# -- migration transfer


def test_export_import_round_trip():
    src, dst = plane(), plane()
    src.refill_free_pages()
    a = src.alloc_va(7, 3 * PAGE)
    e = src.table.peek(7, a.va // PAGE)
    e.ppn, e.valid = src.pop_free_page(), True
    ranges, entries = src.export_range(7, 0, 1000)
    assert ranges == [(a.va // PAGE, a.va // PAGE + 3, Perm.RW)]
    assert sum(x.valid for x in entries) == 1
    fresh = dst.import_range(7, ranges, [e.vpn])
    assert list(fresh) == [e.vpn]
    assert dst.table.peek(7, e.vpn).valid
    assert src.drop_range(7, 0, 1000) == 3
    assert len(src.table) == 0
    with pytest.raises(OutOfMemory):
        dst.import_range(7, ranges, [])  # overlaps what it already holds
