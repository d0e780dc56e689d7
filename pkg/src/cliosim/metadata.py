"""Memory-node slow path: VA allocation, physical pages, free-page buffer.

VA allocation works against a shadow copy of the page table. A candidate
range whose PTEs would overflow any bucket is rejected, the offending
pages are marked unusable, and the search continues. Real inserts made on
behalf of a committed allocation therefore can never overflow.
"""

from __future__ import annotations

import bisect
import heapq
from collections import deque
from dataclasses import dataclass, field

from .errors import InvalidArgument, NotAllocated, OutOfMemory, OutOfVa
from .page_table import HashPageTable, PageTableEntry, Perm, Tlb

VA_BITS = 48


class BuddyAllocator:
    """Binary buddy allocator over page frames ``[0, num_pages)``.

    Lowest-address blocks are handed out first so runs are reproducible.
    """

    def __init__(self, num_pages: int) -> None:
        if num_pages < 1:
            raise ValueError("num_pages must be >= 1")
        self.num_pages = num_pages
        self.max_order = num_pages.bit_length() - 1
        self._free: list[set[int]] = [set() for _ in range(self.max_order + 1)]
        self._heaps: list[list[int]] = [[] for _ in range(self.max_order + 1)]
        self.free_pages = 0
        addr = 0
        while addr < num_pages:
            order = self.max_order
            while order > 0 and (addr % (1 << order) or addr + (1 << order) > num_pages):
                order -= 1
            self._push(addr, order)
            addr += 1 << order

    def _push(self, addr: int, order: int) -> None:
        self._free[order].add(addr)
        heapq.heappush(self._heaps[order], addr)
        self.free_pages += 1 << order

    def _pop(self, order: int) -> int | None:
        heap, live = self._heaps[order], self._free[order]
        while heap:
            addr = heapq.heappop(heap)
            if addr in live:
                live.remove(addr)
                self.free_pages -= 1 << order
                return addr
        return None

    def _take(self, addr: int, order: int) -> bool:
        if addr in self._free[order]:
            self._free[order].remove(addr)
            self.free_pages -= 1 << order
            return True
        return False

    def alloc(self, order: int = 0) -> int | None:
        for o in range(order, self.max_order + 1):
            addr = self._pop(o)
            if addr is None:
                continue
            while o > order:
                o -= 1
                self._push(addr + (1 << o), o)
            return addr
        return None

    def free(self, addr: int, order: int = 0) -> None:
        if addr < 0 or addr + (1 << order) > self.num_pages:
            raise ValueError(f"block {addr}/{order} out of range")
        if self.is_free(addr):
            raise ValueError(f"double free of page {addr}")
        while order < self.max_order:
            buddy = addr ^ (1 << order)
            if buddy + (1 << order) > self.num_pages or not self._take(buddy, order):
                break
            addr = min(addr, buddy)
            order += 1
        self._push(addr, order)

    def is_free(self, page: int) -> bool:
        for order, live in enumerate(self._free):
            if (page >> order << order) in live:
                return True
        return False


class FreePageBuffer:
    """Bounded queue of reserved-but-unused physical page numbers."""

    def __init__(self, capacity: int = 64) -> None:
        self.capacity = capacity
        self.pages: deque[int] = deque()

    def __len__(self) -> int:
        return len(self.pages)

    @property
    def full(self) -> bool:
        return len(self.pages) >= self.capacity

    def push(self, ppn: int) -> None:
        if self.full:
            raise OverflowError("free page buffer is full")
        self.pages.append(ppn)

    def pop(self) -> int | None:
        return self.pages.popleft() if self.pages else None


class ShadowPageTable:
    """Slow-path mirror of bucket occupancy, plus the unusable-page index."""

    def __init__(self, num_buckets: int, slots_per_bucket: int) -> None:
        self.num_buckets = num_buckets
        self.slots_per_bucket = slots_per_bucket
        self.keys: list[set[tuple[int, int]]] = [set() for _ in range(num_buckets)]
        self.unusable: dict[int, set[tuple[int, int]]] = {}
        self._table = HashPageTable(num_buckets, slots_per_bucket)

    def bucket_of(self, pid: int, vpn: int) -> int:
        return self._table.index(pid, vpn)

    def overflowing(self, keys: list[tuple[int, int]]) -> list[tuple[int, int]]:
        """Keys that would not fit if ``keys`` were inserted in order."""
        added: dict[int, int] = {}
        bad = []
        for pid, vpn in keys:
            b = self.bucket_of(pid, vpn)
            used = len(self.keys[b]) + added.get(b, 0)
            if used >= self.slots_per_bucket:
                bad.append((pid, vpn))
            else:
                added[b] = added.get(b, 0) + 1
        return bad

    def add(self, pid: int, vpn: int) -> None:
        self.keys[self.bucket_of(pid, vpn)].add((pid, vpn))

    def remove(self, pid: int, vpn: int) -> int:
        b = self.bucket_of(pid, vpn)
        self.keys[b].discard((pid, vpn))
        return b

    def occupancy(self) -> list[int]:
        return [len(k) for k in self.keys]


@dataclass
class VmaTree:
    """Allocated VPN ranges of one process, plus pages known to overflow."""

    pid: int
    starts: list[int] = field(default_factory=list)
    ranges: dict[int, tuple[int, Perm]] = field(default_factory=dict)  # start -> (end, perms)
    unusable: list[int] = field(default_factory=list)  # sorted VPNs

    def overlapping(self, lo: int, hi: int) -> tuple[int, int] | None:
        # disjoint sorted ranges: only the last one starting below hi can reach lo
        i = bisect.bisect_left(self.starts, hi) - 1
        if i >= 0:
            start = self.starts[i]
            end = self.ranges[start][0]
            if end > lo:
                return start, end
        return None

    def find_free(self, npages: int, lo: int, hi: int) -> int | None:
        cur = lo
        while cur + npages <= hi:
            hit = self.overlapping(cur, cur + npages)
            if hit is not None:
                cur = hit[1]
                continue
            j = bisect.bisect_left(self.unusable, cur + npages) - 1
            if j >= 0 and self.unusable[j] >= cur:
                # skip the whole run of consecutive unusable pages
                while j + 1 < len(self.unusable) and self.unusable[j + 1] == self.unusable[j] + 1:
                    j += 1
                cur = self.unusable[j] + 1
                continue
            return cur
        return None

    def add(self, start: int, end: int, perms: Perm) -> None:
        bisect.insort(self.starts, start)
        self.ranges[start] = (end, perms)

    def remove(self, start: int) -> None:
        del self.ranges[start]
        self.starts.pop(bisect.bisect_left(self.starts, start))

    def mark_unusable(self, vpn: int) -> None:
        i = bisect.bisect_left(self.unusable, vpn)
        if i == len(self.unusable) or self.unusable[i] != vpn:
            self.unusable.insert(i, vpn)

    def clear_unusable(self, vpn: int) -> None:
        i = bisect.bisect_left(self.unusable, vpn)
        if i < len(self.unusable) and self.unusable[i] == vpn:
            self.unusable.pop(i)

    def range_at(self, start: int) -> tuple[int, Perm] | None:
        return self.ranges.get(start)

    def perms_for(self, vpn: int) -> Perm | None:
        hit = self.overlapping(vpn, vpn + 1)
        return None if hit is None else self.ranges[hit[0]][1]


@dataclass
class Allocation:
    va: int
    npages: int
    perms: Perm
    retries: int


class MetadataPlane:
    """Slow-path allocator state for one memory node."""

    def __init__(self, table: HashPageTable, physical_pages: int, page_size: int,
                 tlb: Tlb | None = None, buffer_capacity: int = 64,
                 max_candidates: int = 10_000) -> None:
        self.table = table
        self.tlb = tlb
        self.page_size = page_size
        self.page_shift = page_size.bit_length() - 1
        self.physical_pages = physical_pages
        self.shadow = ShadowPageTable(table.num_buckets, table.slots_per_bucket)
        self.buddy = BuddyAllocator(physical_pages)
        self.buffer = FreePageBuffer(buffer_capacity)
        self.vmas: dict[int, VmaTree] = {}
        self.max_candidates = max_candidates
        self.retry_histogram: dict[int, int] = {}
        self.va_limit_vpn = (1 << VA_BITS) >> self.page_shift

    def vma(self, pid: int) -> VmaTree:
        tree = self.vmas.get(pid)
        if tree is None:
            tree = self.vmas[pid] = VmaTree(pid)
        return tree

    def pages_for(self, size: int) -> int:
        return -(-size // self.page_size)

    def alloc_va(self, pid: int, size: int, perms: Perm = Perm.RW,
                 window: tuple[int, int] | None = None) -> Allocation:
        """Allocate ``ceil(size / page_size)`` pages that fit the page table.

        ``window`` bounds the search to a VPN range (used for cluster
        regions); VPN 0 is never handed out so VA 0 can act as null.
        """
        if size <= 0:
            raise InvalidArgument(f"allocation size must be positive, got {size}")
        npages = self.pages_for(size)
        lo, hi = window if window is not None else (1, self.va_limit_vpn)
        lo = max(lo, 1)
        tree = self.vma(pid)
        retries = 0
        while True:
            start = tree.find_free(npages, lo, hi)
            # candidates below ``start`` were already rejected
            lo = start if start is not None else lo
            if start is None or retries >= self.max_candidates:
                raise OutOfVa(f"pid {pid}: no {npages}-page range fits the page table")
            keys = [(pid, v) for v in range(start, start + npages)]
            bad = self.shadow.overflowing(keys)
            if not bad:
                break
            for _, vpn in bad:
                tree.mark_unusable(vpn)
                b = self.shadow.bucket_of(pid, vpn)
                self.shadow.unusable.setdefault(b, set()).add((pid, vpn))
            retries += 1
        tree.add(start, start + npages, perms)
        for p, v in keys:
            self.shadow.add(p, v)
            ok = self.table.insert(PageTableEntry(p, v, perms=perms, valid=False))
            assert ok, "shadow pre-check admitted an overflowing insert"
        self.retry_histogram[retries] = self.retry_histogram.get(retries, 0) + 1
        return Allocation(start << self.page_shift, npages, perms, retries)

    def free_va(self, pid: int, va: int, size: int) -> list[int]:
        """Release an exact prior allocation; returns the VPNs unmapped."""
        tree = self.vmas.get(pid)
        start = va >> self.page_shift
        found = tree.range_at(start) if tree is not None and va % self.page_size == 0 else None
        if found is None or found[0] - start != self.pages_for(size) or size <= 0:
            raise NotAllocated(f"pid {pid}: [{va:#x}, +{size}) is not an allocation")
        end = found[0]
        tree.remove(start)
        vpns = list(range(start, end))
        for vpn in vpns:
            self._unmap(pid, vpn)
        return vpns

    def _unmap(self, pid: int, vpn: int) -> None:
        entry = self.table.remove(pid, vpn)
        if self.tlb is not None:
            self.tlb.invalidate(pid, vpn)
        if entry is not None and entry.valid:
            self.buddy.free(entry.ppn)
        bucket = self.shadow.remove(pid, vpn)
        for upid, uvpn in self.shadow.unusable.pop(bucket, ()):
            other = self.vmas.get(upid)
            if other is not None:
                other.clear_unusable(uvpn)

    def refill_free_pages(self) -> int:
        added = 0
        while not self.buffer.full:
            ppn = self.buddy.alloc(0)
            if ppn is None:
                break
            self.buffer.push(ppn)
            added += 1
        return added

    def pop_free_page(self) -> int | None:
        return self.buffer.pop()

    def valid_pages(self) -> int:
        return sum(1 for _, _, e in self.table.entries() if e.valid)

    def used_pages(self) -> int:
        """Physical pages backing valid PTEs."""
        return self.physical_pages - self.buddy.free_pages - len(self.buffer)

    def occupancy(self) -> float:
        return self.used_pages() / self.physical_pages

    # region transfer, used by migration

    def export_range(self, pid: int, lo: int, hi: int) -> tuple[list[tuple[int, int, Perm]], list[PageTableEntry]]:
        """Allocations and present PTEs of ``pid`` inside VPNs ``[lo, hi)``."""
        tree = self.vmas.get(pid)
        ranges = []
        entries = []
        if tree is None:
            return ranges, entries
        for start in list(tree.starts):
            end, perms = tree.ranges[start]
            if start >= lo and end <= hi:
                ranges.append((start, end, perms))
                for vpn in range(start, end):
                    e = self.table.peek(pid, vpn)
                    if e is not None:
                        entries.append(e)
        return ranges, entries

    def can_import(self, pid: int, ranges: list[tuple[int, int, Perm]], valid_pages: int) -> bool:
        keys = [(pid, v) for s, e, _ in ranges for v in range(s, e)]
        tree = self.vma(pid)
        if any(tree.overlapping(s, e) is not None for s, e, _ in ranges):
            return False
        return not self.shadow.overflowing(keys) and self.buddy.free_pages >= valid_pages

    def import_range(self, pid: int, ranges: list[tuple[int, int, Perm]],
                     valid_vpns: list[int]) -> dict[int, int]:
        """Install migrated allocations; returns vpn -> fresh ppn for valid pages."""
        if not self.can_import(pid, ranges, len(valid_vpns)):
            raise OutOfMemory("destination cannot host the region")
        tree = self.vma(pid)
        fresh: dict[int, int] = {}
        valid = set(valid_vpns)
        for start, end, perms in ranges:
            tree.add(start, end, perms)
            for vpn in range(start, end):
                self.shadow.add(pid, vpn)
                entry = PageTableEntry(pid, vpn, perms=perms, valid=False)
                if vpn in valid:
                    ppn = self.buddy.alloc(0)
                    entry.ppn, entry.valid = ppn, True
                    fresh[vpn] = ppn
                ok = self.table.insert(entry)
                assert ok
        return fresh

    def drop_range(self, pid: int, lo: int, hi: int) -> int:
        tree = self.vmas.get(pid)
        if tree is None:
            return 0
        dropped = 0
        for start in [s for s in tree.starts if s >= lo and tree.ranges[s][0] <= hi]:
            end = tree.ranges[start][0]
            tree.remove(start)
            for vpn in range(start, end):
                self._unmap(pid, vpn)
                dropped += 1
        return dropped
