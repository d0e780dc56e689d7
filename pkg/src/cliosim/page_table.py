"""Memory-node address translation structures.

All PTEs from all processes live in one fixed-size hash table. Each
bucket has ``K`` slots and is always fetched whole, so a lookup costs one
bucket read no matter how many processes share the node. Overflow is
prevented at allocation time by the metadata plane, never here.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from enum import Flag
from typing import Iterator, TextIO

from .lookup3 import hashlittle, pid_vpn_key

SLOT_BYTES = 24
"""Encoded size of one slot: pid(4) vpn(8) ppn(8) flags(1) + pad."""

PAGE_SIZES = (4 * 1024, 2 * 1024 * 1024, 4 * 1024 * 1024)
DEFAULT_PAGE_SIZE = 4 * 1024 * 1024


class Perm(Flag):
    NONE = 0
    READ = 1
    WRITE = 2
    RW = READ | WRITE

    def __str__(self) -> str:
        return ("r" if self & Perm.READ else "-") + ("w" if self & Perm.WRITE else "-")

    @classmethod
    def parse(cls, text: str) -> "Perm":
        perms = cls.NONE
        if "r" in text:
            perms |= cls.READ
        if "w" in text:
            perms |= cls.WRITE
        return perms


class DuplicateEntryError(KeyError):
    """A present entry with the same (pid, vpn) already exists."""


@dataclass
class PageTableEntry:
    pid: int
    vpn: int
    ppn: int = 0
    perms: Perm = Perm.RW
    valid: bool = False
    present: bool = True

    def __post_init__(self) -> None:
        if not self.present and self.valid:
            raise ValueError("an absent slot cannot be valid")

    @property
    def key(self) -> tuple[int, int]:
        return (self.pid, self.vpn)


def hash_index(pid: int, vpn: int, num_buckets: int) -> int:
    """Bucket index of (pid, vpn): lookup3 over the 12-byte key, mod ``num_buckets``."""
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    return hashlittle(pid_vpn_key(pid, vpn)) % num_buckets


def buckets_for(physical_bytes: int, page_size: int, slots_per_bucket: int = 8,
                overprovision: float = 2.0) -> int:
    """Bucket count giving ``overprovision`` slots per physical page."""
    pages = physical_bytes // page_size
    slots = int(round(pages * overprovision))
    return max(1, -(-slots // slots_per_bucket))


class HashPageTable:
    """Fixed-geometry hash page table.

    ``bucket_fetches`` counts bucket reads made by :meth:`lookup`; inserts,
    removals and in-place updates are writes and go to ``bucket_writes``.
    """

    def __init__(self, num_buckets: int, slots_per_bucket: int = 8) -> None:
        if num_buckets < 1 or slots_per_bucket < 1:
            raise ValueError("table geometry must be positive")
        self.num_buckets = num_buckets
        self.slots_per_bucket = slots_per_bucket
        self.buckets: list[list[PageTableEntry | None]] = [
            [None] * slots_per_bucket for _ in range(num_buckets)
        ]
        self.bucket_fetches = 0
        self.bucket_writes = 0

    @classmethod
    def for_memory(cls, physical_bytes: int, page_size: int = DEFAULT_PAGE_SIZE,
                   slots_per_bucket: int = 8, overprovision: float = 2.0) -> "HashPageTable":
        return cls(buckets_for(physical_bytes, page_size, slots_per_bucket, overprovision),
                   slots_per_bucket)

    @property
    def total_slots(self) -> int:
        return self.num_buckets * self.slots_per_bucket

    @property
    def size_bytes(self) -> int:
        return self.total_slots * SLOT_BYTES

    def index(self, pid: int, vpn: int) -> int:
        return hash_index(pid, vpn, self.num_buckets)

    def fetch_bucket(self, index: int) -> list[PageTableEntry | None]:
        """One DRAM read of a whole bucket."""
        self.bucket_fetches += 1
        return self.buckets[index]

    def lookup(self, pid: int, vpn: int) -> PageTableEntry | None:
        for slot in self.fetch_bucket(self.index(pid, vpn)):
            if slot is not None and slot.pid == pid and slot.vpn == vpn:
                return slot
        return None

    def peek(self, pid: int, vpn: int) -> PageTableEntry | None:
        """Slow-path read that does not count as a fast-path bucket fetch."""
        for slot in self.buckets[self.index(pid, vpn)]:
            if slot is not None and slot.pid == pid and slot.vpn == vpn:
                return slot
        return None

    def insert(self, entry: PageTableEntry) -> bool:
        """Place ``entry`` in the first free slot of its bucket.

        Returns False on overflow, leaving the table unchanged.
        """
        bucket = self.buckets[self.index(entry.pid, entry.vpn)]
        free = None
        for i, slot in enumerate(bucket):
            if slot is None:
                if free is None:
                    free = i
            elif slot.pid == entry.pid and slot.vpn == entry.vpn:
                raise DuplicateEntryError((entry.pid, entry.vpn))
        if free is None:
            return False
        entry.present = True
        bucket[free] = entry
        self.bucket_writes += 1
        return True

    def remove(self, pid: int, vpn: int) -> PageTableEntry | None:
        """Free the slot holding (pid, vpn); None when absent."""
        bucket = self.buckets[self.index(pid, vpn)]
        for i, slot in enumerate(bucket):
            if slot is not None and slot.pid == pid and slot.vpn == vpn:
                bucket[i] = None
                self.bucket_writes += 1
                return slot
        return None

    def update(self, entry: PageTableEntry) -> None:
        """Write back a modified entry (counts as one bucket write)."""
        self.bucket_writes += 1

    def bucket_occupancy(self, index: int) -> int:
        return sum(1 for s in self.buckets[index] if s is not None)

    def occupancy(self) -> list[int]:
        return [self.bucket_occupancy(i) for i in range(self.num_buckets)]

    def entries(self) -> Iterator[tuple[int, int, PageTableEntry]]:
        for b, bucket in enumerate(self.buckets):
            for s, slot in enumerate(bucket):
                if slot is not None:
                    yield b, s, slot

    def __len__(self) -> int:
        return sum(1 for _ in self.entries())

    def dump(self, out: TextIO) -> None:
        """Write present slots as ``bucket,slot,pid,vpn,ppn,perms,valid`` lines."""
        for b, s, e in self.entries():
            out.write(f"{b},{s},{e.pid},{e.vpn},{e.ppn},{e.perms},{int(e.valid)}\n")


class Tlb:
    """Fully associative translation cache with LRU replacement."""

    def __init__(self, capacity: int = 16) -> None:
        if capacity < 1:
            raise ValueError("TLB capacity must be >= 1")
        self.capacity = capacity
        self.entries: OrderedDict[tuple[int, int], tuple[int, Perm]] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def access(self, pid: int, vpn: int) -> tuple[int, Perm] | None:
        key = (pid, vpn)
        hit = self.entries.get(key)
        if hit is None:
            self.misses += 1
            return None
        self.entries.move_to_end(key)
        self.hits += 1
        return hit

    def fill(self, pid: int, vpn: int, ppn: int, perms: Perm) -> None:
        key = (pid, vpn)
        if key in self.entries:
            self.entries.move_to_end(key)
        elif len(self.entries) >= self.capacity:
            self.entries.popitem(last=False)
        self.entries[key] = (ppn, perms)

    def invalidate(self, pid: int, vpn: int) -> None:
        self.entries.pop((pid, vpn), None)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self.entries
