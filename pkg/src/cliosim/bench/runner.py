"""Run a workload through a simulated cluster and summarize it."""

from __future__ import annotations

import dataclasses
import json
import random
from dataclasses import dataclass, field
from typing import Any, Generator

import numpy as np

from ..apps.chase import ChaseService, ChaseSpec, chase_async, node_bytes
from ..apps.kv import KvClient, KvService
from ..apps.mv import MvClient, MvService
from ..clib import AsyncHandle, ClientSession
from ..cluster import Cluster
from ..config import SimConfig
from ..errors import Status
from ..netsim import Network
from ..wire import read_u64
from .workload import TraceOp, WorkloadSpec, key_generator, key_name, ycsb_ops


def percentiles(samples: list[int]) -> dict[str, float | None]:
    """Nearest-rank percentiles over the whole population."""
    if not samples:
        return {"count": 0, "p50": None, "p99": None, "max": None}
    arr = np.asarray(samples, dtype=np.int64)
    return {"count": int(arr.size),
            "p50": float(np.percentile(arr, 50, method="inverted_cdf")),
            "p99": float(np.percentile(arr, 99, method="inverted_cdf")),
            "max": float(arr.max())}


@dataclass
class RunReport:
    seed: int
    workload: dict[str, Any]
    ops: int = 0
    outcomes: dict[str, int] = field(default_factory=lambda: {"ok": 0, "not_found": 0, "failed": 0})
    latency_ns: dict[str, dict[str, float | None]] = field(default_factory=dict)
    throughput_ops_per_s: float = 0.0
    sim_time_ns: int = 0
    retries: int = 0
    timeouts: int = 0
    fault_stalls: int = 0
    faults: int = 0
    alloc_retry_histogram: dict[str, int] = field(default_factory=dict)
    cwnd_samples: list[list[float]] = field(default_factory=list)
    migrations: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


class _Recorder:
    def __init__(self, net: Network) -> None:
        self.net = net
        self.samples: dict[str, list[int]] = {}
        self.outcomes = {"ok": 0, "not_found": 0, "failed": 0}
        self.first: int | None = None
        self.last = 0

    def track(self, label: str, handle: AsyncHandle) -> AsyncHandle:
        start = self.net.now
        if self.first is None:
            self.first = start

        def done(h: AsyncHandle) -> None:
            self.last = self.net.now
            if h.error is None:
                self.outcomes["ok"] += 1
                self.samples.setdefault(label, []).append(self.net.now - start)
            elif h.error.status == Status.NOT_FOUND:
                self.outcomes["not_found"] += 1
                self.samples.setdefault(label, []).append(self.net.now - start)
            else:
                self.outcomes["failed"] += 1

        handle.on_done(done)
        return handle


def _split(items: list, parts: int) -> list[list]:
    return [items[i::parts] for i in range(parts)]


def _kv_thread(client: KvClient, ops: list[TraceOp], rec: _Recorder) -> Generator:
    for op in ops:
        key = op.key.encode()
        if op.op == "get":
            yield rec.track("get", client.get_async(key))
        elif op.op == "set":
            yield rec.track("set", client.set_async(key, bytes(op.size)))
        else:
            yield rec.track("delete", client.delete_async(key))


def _mem_thread(session: ClientSession, spec: WorkloadSpec, seed: int, count: int,
                rec: _Recorder) -> Generator:
    size = max(8, spec.value_size)
    rng = random.Random(seed)
    if spec.kind in ("read", "write"):
        span = spec.keys * size
        h = session.ralloc_async(span)
        yield h
        base = h.result()
        gen = key_generator(spec, seed)
        payload = bytes(size)
        for _ in range(count):
            va = base + gen.next() * size
            if spec.kind == "read":
                yield rec.track("read", session.rread_async(va, size))
            else:
                yield rec.track("write", session.rwrite_async(va, payload))
    elif spec.kind == "alloc":
        for _ in range(count):
            yield rec.track("alloc", session.ralloc_async(size))
    elif spec.kind == "fault":
        page = session.config.page_size
        h = session.ralloc_async(max(1, count) * page)
        yield h
        base = h.result()
        for i in range(count):
            yield rec.track("fault", session.rwrite_async(base + i * page, b"\x01" * 8))
    elif spec.kind == "chase":
        cs = ChaseSpec(match=0, node_size=max(16, size))
        nodes = max(1, spec.keys)
        h = session.ralloc_async(nodes * cs.node_size)
        yield h
        base = h.result()
        for i in range(nodes):
            nxt = base + (i + 1) * cs.node_size if i + 1 < nodes else 0
            session.rwrite_async(base + i * cs.node_size, node_bytes(i, nxt, cs))
        yield session.rrelease_async()
        for _ in range(count):
            target = dataclasses.replace(cs, match=rng.randrange(nodes), max_hops=nodes)
            yield rec.track("chase", chase_async(session, base, target))


def _mv_thread(client: MvClient, count: int, size: int, rec: _Recorder) -> Generator:
    h = client.create_async(max(1, count))
    yield h
    oid = read_u64(h.result())
    appended = 0
    for i in range(count):
        if i % 2 == 0 or appended == 0:
            yield rec.track("append", client.append_async(oid, bytes(size)))
            appended += 1
        else:
            yield rec.track("read", client.read_async(oid))


def run(config: SimConfig, workload: WorkloadSpec | list[TraceOp], seed: int) -> RunReport:
    """Deterministic for fixed ``(config, workload, seed)``."""
    plan = dataclasses.replace(config.net, seed=seed)
    trace = None if isinstance(workload, WorkloadSpec) else list(workload)
    spec = workload if isinstance(workload, WorkloadSpec) else WorkloadSpec(kind="kv", ops=len(trace))
    cc = config.cluster
    cluster = Cluster.build(n_mns=cc.mns, n_cns=spec.clients, mn_config=config.mn,
                            clib_config=config.clib, net=Network(plan),
                            pressure_threshold=cc.pressure_threshold,
                            auto_migrate=cc.auto_migrate,
                            report_interval_ns=cc.report_interval_ns)
    net = cluster.net
    rec = _Recorder(net)
    mn_ids = [m.node_id for m in cluster.mns]
    tasks = []
    base_seed = seed * 7919 + spec.seed * 104_729
    per_client = [spec.ops // spec.clients + (1 if i < spec.ops % spec.clients else 0)
                  for i in range(spec.clients)]
    if spec.kind == "kv":
        for mn in cluster.mns:
            KvService(mn)
        clients = [KvClient(s, mn_ids) for s in cluster.sessions]
        if trace is None:
            loader = clients[0]
            for rank in range(spec.keys):
                loader.set_async(key_name(rank).encode(), bytes(spec.value_size))
            net.wait(loader.session.rrelease_async())
            streams = [ycsb_ops(spec, base_seed + i, per_client[i]) for i in range(spec.clients)]
        else:
            streams = _split(trace, spec.clients)
        for c, ops in zip(clients, streams):
            tasks.append(net.spawn(_kv_thread(c, ops, rec), "kv"))
    elif spec.kind == "mv":
        for mn in cluster.mns:
            MvService(mn)
        for i, s in enumerate(cluster.sessions):
            client = MvClient(s, mn_ids[i % len(mn_ids)])
            tasks.append(net.spawn(_mv_thread(client, per_client[i], spec.value_size, rec), "mv"))
    else:
        if spec.kind == "chase":
            for mn in cluster.mns:
                ChaseService(mn)
        for i, s in enumerate(cluster.sessions):
            tasks.append(net.spawn(_mem_thread(s, spec, base_seed + i, per_client[i], rec),
                                   spec.kind))
    net.run_until(lambda: all(t.done for t in tasks))
    report = RunReport(seed=seed, workload=dataclasses.asdict(spec))
    report.ops = sum(rec.outcomes.values())
    report.outcomes = dict(rec.outcomes)
    everything = [x for v in rec.samples.values() for x in v]
    report.latency_ns = {k: percentiles(v) for k, v in sorted(rec.samples.items())}
    report.latency_ns["all"] = percentiles(everything)
    span = (rec.last - rec.first) if rec.first is not None else 0
    report.throughput_ops_per_s = report.ops / (span / 1e9) if span > 0 else 0.0
    report.sim_time_ns = net.now
    report.retries = sum(s.stats["retries"] for s in cluster.sessions)
    report.timeouts = sum(s.stats["timeouts"] for s in cluster.sessions)
    report.fault_stalls = sum(m.stats["fault_stalls"] for m in cluster.mns)
    report.faults = sum(m.stats["faults"] for m in cluster.mns)
    hist: dict[int, int] = {}
    for m in cluster.mns:
        for k, v in m.metadata.retry_histogram.items():
            hist[k] = hist.get(k, 0) + v
    report.alloc_retry_histogram = {str(k): v for k, v in sorted(hist.items())}
    for mn_id, st in sorted(cluster.sessions[0].cc.items()):
        step = max(1, len(st.trajectory) // 100)
        report.cwnd_samples.extend([float(mn_id), float(t), round(c, 6)]
                                   for t, c, _ in st.trajectory[::step])
    report.migrations = len(cluster.controller.migrations)
    return report
