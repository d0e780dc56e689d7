"""Desk-scale experiments. Each returns rows and can be written as CSV."""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..clib import ClibConfig, ClientSession, StaticRouter
from ..memnode import MemoryNode, MnConfig
from ..metadata import MetadataPlane
from ..netsim import FaultPlan, Network
from ..page_table import DEFAULT_PAGE_SIZE, HashPageTable
from .runner import percentiles

GB = 1 << 30
MN_ID = 100
CN_BASE = 1000  # client ids start here so they never collide with MN ids


# -- allocation retries


@dataclass
class AllocSample:
    trial: int
    occupancy: float  # fraction of physical pages already mapped, before this allocation
    retries: int


def alloc_retry_samples(trials: int = 1000, seed: int = 0, max_occupancy: float = 0.95,
                        physical_bytes: int = GB, page_size: int = DEFAULT_PAGE_SIZE,
                        slots_per_bucket: int = 8, overprovision: float = 2.0,
                        pids_per_trial: int = 4) -> list[AllocSample]:
    """Single-page allocations from a few random processes until the table is
    ``max_occupancy`` full, repeated over independent seeded trials."""
    pages = physical_bytes // page_size
    limit = int(max_occupancy * pages)
    out = []
    for trial in range(trials):
        rng = random.Random(seed * 1_000_003 + trial)
        table = HashPageTable.for_memory(physical_bytes, page_size, slots_per_bucket, overprovision)
        meta = MetadataPlane(table, pages, page_size)
        pids = [rng.randrange(1, 1 << 31) for _ in range(pids_per_trial)]
        for n in range(limit):
            a = meta.alloc_va(rng.choice(pids), page_size)
            out.append(AllocSample(trial, n / pages, a.retries))
    return out


def alloc_retry(trials: int = 1000, seed: int = 0, bin_width: float = 0.05, **kw) -> list[dict]:
    samples = alloc_retry_samples(trials, seed, **kw)
    bins: dict[int, list[int]] = {}
    for s in samples:
        bins.setdefault(int(s.occupancy / bin_width + 1e-9), []).append(s.retries)
    rows = []
    for b in sorted(bins):
        r = bins[b]
        rows.append({"occupancy_lo": round(b * bin_width, 4),
                     "occupancy_hi": round((b + 1) * bin_width, 4),
                     "allocations": len(r),
                     "with_retries": sum(1 for x in r if x),
                     "mean_retries": round(sum(r) / len(r), 6),
                     "max_retries": max(r)})
    return rows


# -- fault cost at several occupancy levels


def fault_constancy(levels: tuple[float, ...] = (0.1, 0.5, 0.9), seed: int = 0,
                    mn_config: MnConfig | None = None) -> list[dict]:
    """Service time of a faulting write vs. a page-table hit and a TLB hit."""
    rows = []
    for level in levels:
        net = Network(FaultPlan(seed=seed))
        cfg = mn_config or MnConfig()
        mn = MemoryNode(net, MN_ID, cfg)
        s = ClientSession(net, 1, StaticRouter(MN_ID), pid=1,
                          config=ClibConfig(page_size=cfg.page_size))
        page = cfg.page_size
        target = int(level * cfg.physical_pages)
        base = s.ralloc((target + 2) * page)
        for i in range(target):  # back pages until the level is reached
            s.rwrite_async(base + i * page, b"\x01")
            if i % 8 == 7:
                s.rrelease()
        s.rrelease()
        occupancy = mn.metadata.occupancy()
        mn.service_log.clear()
        fresh = base + target * page
        s.rwrite(fresh, b"\x02" * 8)          # demand fault
        mn.tlb.invalidate(1, fresh // page)
        s.rwrite(fresh + 64, b"\x03" * 8)     # TLB miss, PTE valid
        s.rwrite(fresh + 128, b"\x04" * 8)    # TLB hit
        kinds = {kind: ns for _, _, ns, kind in mn.service_log}
        rows.append({"level": level, "occupancy": round(occupancy, 4),
                     "fault_ns": kinds["fault"], "pt_hit_ns": kinds["pt"],
                     "tlb_hit_ns": kinds["tlb"], "fault_minus_pt_ns": kinds["fault"] - kinds["pt"],
                     "step_ns": cfg.step_ns, "fault_stalls": mn.stats["fault_stalls"]})
    return rows


# -- scalability with client count


def scalability(clients: tuple[int, ...] = (1, 16, 256, 1024), ops: int = 4096,
                interval_ns: int = 2_000, seed: int = 0, working_pages: int = 4) -> list[dict]:
    """Many client processes at a fixed aggregate request rate.

    All clients share one process id and a small working set, so the only
    thing varying across rows is how many distinct CNs talk to the MN.
    """
    rows = []
    for n in clients:
        net = Network(FaultPlan(seed=seed))
        mn = MemoryNode(net, MN_ID)
        page = mn.page_size
        cfg = ClibConfig(page_size=page)
        sessions = [ClientSession(net, CN_BASE + i, StaticRouter(MN_ID), pid=1, config=cfg)
                    for i in range(n)]
        base = sessions[0].ralloc(working_pages * page)
        for w in range(working_pages):
            sessions[0].rwrite(base + w * page, b"\x00" * 64)
        for s in sessions:  # handshake and warm-up, outside the measurement
            s.rread(base, 64)
        state_before = len(mn.control_state())
        rng = random.Random(seed)
        lat: list[int] = []
        start = net.now
        handles = []
        for i in range(ops):
            s = sessions[i % n]
            va = base + rng.randrange(working_pages) * page + rng.randrange(0, page - 64, 64)

            def issue(s=s, va=va):
                t0 = net.now
                h = s.rread_async(va, 64)
                h.on_done(lambda _h: lat.append(net.now - t0))
                handles.append(h)

            net.schedule(start + i * interval_ns, issue)
        net.run()
        p = percentiles(lat)
        rows.append({"clients": n, "ops": len(lat), "p50_ns": p["p50"], "p99_ns": p["p99"],
                     "control_state_bytes": len(mn.control_state()),
                     "control_state_bytes_before": state_before,
                     "dedup_entries": len(mn.dedup), "failed": sum(1 for h in handles if h.error)})
    return rows


# -- loss resilience


def random_program(rng: random.Random, ops: int, pages: int, page: int,
                   span: int = 4096, max_len: int = 3000) -> list[tuple]:
    """Random writes/reads/fetch-adds with rrelease barriers.

    Returns ("write", off, bytes) | ("read", off, n) | ("faa", off, delta)
    | ("release",) entries. Offsets are relative to the allocation base.
    """
    prog: list[tuple] = []
    while len(prog) < ops:
        for _ in range(rng.randint(1, 16)):
            p = rng.randrange(pages)
            r = rng.random()
            if r < 0.5:
                n = rng.randint(1, max_len)
                off = p * page + rng.randrange(span)
                prog.append(("write", off, rng.randbytes(n)))
            elif r < 0.8:
                off = p * page + rng.randrange(span)
                prog.append(("read", off, rng.randint(1, max_len)))
            else:
                off = p * page + span + 8 * rng.randrange(16)
                prog.append(("faa", off, rng.randint(1, 1000)))
        prog.append(("release",))
    return prog


def apply_sequential(prog: list[tuple], size: int) -> bytearray:
    """Fault-free oracle: run the program in order against a byte array."""
    mem = bytearray(size)
    for step in prog:
        if step[0] == "write":
            _, off, data = step
            mem[off:off + len(data)] = data
        elif step[0] == "faa":
            _, off, delta = step
            v = (int.from_bytes(mem[off:off + 8], "little") + delta) & (2 ** 64 - 1)
            mem[off:off + 8] = v.to_bytes(8, "little")
    return mem


def run_program(prog: list[tuple], plan: FaultPlan, pages: int,
                clib_config: ClibConfig | None = None,
                mn_config: MnConfig | None = None) -> dict:
    """Execute ``prog`` asynchronously under ``plan``; compare with the oracle."""
    net = Network(plan)
    mn_config = mn_config or MnConfig()
    mn = MemoryNode(net, MN_ID, mn_config)
    page = mn.page_size
    s = ClientSession(net, 1, StaticRouter(MN_ID), pid=1,
                      config=clib_config or ClibConfig(page_size=page))
    base = s.ralloc(pages * page)
    failed = 0
    handles = []
    for step in prog:
        if step[0] == "release":
            s.rrelease()
            continue
        if step[0] == "write":
            handles.append(s.rwrite_async(base + step[1], step[2]))
        elif step[0] == "read":
            handles.append(s.rread_async(base + step[1], step[2]))
        else:
            handles.append(s.rfaa_async(base + step[1], step[2]))
    s.rrelease()
    failed = sum(1 for h in handles if h.error is not None)
    size = pages * page
    oracle = apply_sequential(prog, size)
    actual = mn.read_virtual(1, base, size)
    diverged = sum(1 for p in range(pages)
                   if actual[p * page:(p + 1) * page] != bytes(oracle[p * page:(p + 1) * page]))
    lat = [ns for _, ns in s.latencies]
    pc = percentiles(lat)
    return {"ops": len(handles), "failed": failed, "diverged_pages": diverged,
            "identical": actual == bytes(oracle), "retries": s.stats["retries"],
            "timeouts": s.stats["timeouts"], "p50_ns": pc["p50"], "p99_ns": pc["p99"],
            "dropped": net.stats["dropped"], "corrupted": net.stats["corrupted"],
            "duplicated": net.stats["duplicated"], "sim_time_ns": net.now}


def loss_resilience(losses: tuple[float, ...] = (0.0, 0.001, 0.01, 0.05), ops: int = 2000,
                    seeds: int = 3, pages: int = 4) -> list[dict]:
    rows = []
    page = DEFAULT_PAGE_SIZE
    for loss in losses:
        for seed in range(seeds):
            prog = random_program(random.Random(seed), ops, pages, page)
            plan = FaultPlan(seed=seed, loss_prob=loss, dup_prob=loss / 2, corrupt_prob=loss / 2,
                             jitter_ns=500)
            r = run_program(prog, plan, pages)
            rows.append({"loss": loss, "seed": seed, **r})
    return rows


EXPERIMENTS: dict[str, Callable[[], list[dict]]] = {
    "alloc_retry": alloc_retry,
    "scalability": scalability,
    "fault_constancy": fault_constancy,
    "loss_resilience": loss_resilience,
}


def write_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def run_experiment(name: str, out: str | Path | None = None) -> list[dict]:
    if name not in EXPERIMENTS:
        raise KeyError(name)
    rows = EXPERIMENTS[name]()
    if out is not None:
        write_csv(rows, out)
    return rows


__all__ = ["EXPERIMENTS", "alloc_retry", "alloc_retry_samples", "apply_sequential",
           "fault_constancy", "loss_resilience", "random_program", "run_experiment",
           "run_program", "scalability", "write_csv"]
