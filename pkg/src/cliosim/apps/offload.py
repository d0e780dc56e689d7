"""Memory access for code that runs on the memory node itself."""

from __future__ import annotations

from ..errors import PermissionFault
from ..memnode import MemoryNode
from ..page_table import Perm


class Offload:
    """Reads and writes one process's virtual memory from inside the MN.

    Each access costs one DRAM access plus one pipeline step, accumulated
    in :attr:`cost_ns` so the caller can charge it to the request.
    """

    def __init__(self, mn: MemoryNode, pid: int) -> None:
        self.mn = mn
        self.pid = pid
        self.cost_ns = 0

    def _spans(self, va: int, length: int, access: Perm):
        mn = self.mn
        pos, end = va, va + length
        while pos < end:
            vpn, off = pos >> mn.page_shift, pos & (mn.page_size - 1)
            n = min(end - pos, mn.page_size - off)
            hit = mn.tlb.access(self.pid, vpn)
            if hit is not None:
                ppn, perms = hit
            else:
                entry = mn.table.lookup(self.pid, vpn)
                if entry is None:
                    raise PermissionFault(f"offload pid {self.pid} va {pos:#x}")
                if not entry.valid:
                    mn.sync_fault(entry)
                else:
                    mn.tlb.fill(self.pid, vpn, entry.ppn, entry.perms)
                ppn, perms = entry.ppn, entry.perms
            if access & ~perms:
                raise PermissionFault(f"offload pid {self.pid} va {pos:#x}")
            yield ppn, off, n
            pos += n

    def _charge(self, nbytes: int) -> None:
        cfg = self.mn.config
        self.cost_ns += cfg.dram_ns + max(1, -(-nbytes // cfg.beat_bytes)) * cfg.step_ns

    def read(self, va: int, length: int) -> bytes:
        self._charge(length)
        return b"".join(self.mn.read_phys(ppn, off, n) for ppn, off, n in self._spans(va, length, Perm.READ))

    def write(self, va: int, data: bytes) -> None:
        self._charge(len(data))
        pos = 0
        for ppn, off, n in self._spans(va, len(data), Perm.WRITE):
            self.mn.write_phys(ppn, off, data[pos:pos + n])
            pos += n

    def read_u64(self, va: int) -> int:
        return int.from_bytes(self.read(va, 8), "little")

    def write_u64(self, va: int, value: int) -> None:
        self.write(va, value.to_bytes(8, "little"))


class Arena:
    """Bump allocator carving small blocks out of whole-page allocations."""

    def __init__(self, mn: MemoryNode, pid: int, align: int = 8) -> None:
        self.mn = mn
        self.pid = pid
        self.align = align
        self._cur = 0
        self._end = 0
        self.pages = 0

    def alloc(self, size: int) -> int:
        size = -(-size // self.align) * self.align
        if self._cur + size > self._end:
            chunk = max(size, self.mn.page_size)
            a = self.mn.metadata.alloc_va(self.pid, chunk)
            self._cur, self._end = a.va, a.va + a.npages * self.mn.page_size
            self.pages += a.npages
        va = self._cur
        self._cur += size
        return va
