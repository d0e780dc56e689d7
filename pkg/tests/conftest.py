from __future__ import annotations

from dataclasses import dataclass

import pytest

from cliosim.clib import ClibConfig, ClientSession, StaticRouter
from cliosim.memnode import MemoryNode, MnConfig
from cliosim.netsim import FaultPlan, Network

MN_ID = 100
MB = 1 << 20
PAGE = 4 * MB


@dataclass
class Rig:
    net: Network
    mn: MemoryNode
    session: ClientSession

    def client(self, cn_id: int, pid: int = 1, config: ClibConfig | None = None) -> ClientSession:
        return ClientSession(self.net, cn_id, StaticRouter(MN_ID), pid=pid,
                             config=config or ClibConfig(page_size=self.mn.page_size))


def make_rig(plan: FaultPlan | None = None, mn_config: MnConfig | None = None,
             clib_config: ClibConfig | None = None, pid: int = 1) -> Rig:
    net = Network(plan or FaultPlan())
    mn = MemoryNode(net, MN_ID, mn_config or MnConfig())
    cfg = clib_config or ClibConfig(page_size=mn.page_size)
    return Rig(net, mn, ClientSession(net, 1, StaticRouter(MN_ID), pid=pid, config=cfg))


@pytest.fixture
def rig() -> Rig:
    return make_rig()


@pytest.fixture
def small_rig() -> Rig:
    """64 MB node: 16 physical pages, 4 buckets."""
    return make_rig(mn_config=MnConfig(physical_bytes=64 * MB, free_buffer_pages=4))


# -- acceptance summary: one PASS/FAIL line per criterion

_criteria: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for mark in report.keywords:
        if mark.startswith("criterion_"):
            num = int(mark.split("_", 1)[1])
            outcome = report.outcome
            if hasattr(report, "wasxfail"):
                outcome = "failed"  # an expected failure is still a miss
            _criteria.setdefault(num, []).append(outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        results = _criteria[num]
        verdict = "PASS" if all(r == "passed" for r in results) else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {verdict} ({len(results)} checks)")


def pytest_configure(config):
    for num in range(1, 11):
        config.addinivalue_line("markers", f"criterion_{num}: acceptance criterion {num}")
