"""Deterministic discrete-event network with seeded fault injection.

Time is an integer count of simulated nanoseconds. Events run in
timestamp order, ties broken by scheduling order, so a (seed, program)
pair always produces the same trace. Reordering comes only from
per-packet jitter.
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Generator, Iterable

from .wire import Packet


class ConfigurationError(RuntimeError):
    pass


class Verdict(Enum):
    DROP = "drop"
    CORRUPT = "corrupt"
    DUPLICATE = "duplicate"


class FaultRule:
    """Scripted fault hook. Subclasses override either method."""

    def verdict(self, packet: Packet, now: int) -> Verdict | None:
        return None

    def extra_delay(self, packet: Packet, now: int) -> int:
        return 0


class DropOriginals(FaultRule):
    """Drop every packet of first transmissions (``retry_of == 0``).

    ``responses=True`` drops the responses to originals instead, so the
    original executes but its sender never hears back.
    """

    def __init__(self, responses: bool = False, opcodes: Iterable[int] | None = None) -> None:
        self.responses = responses
        self.opcodes = None if opcodes is None else {int(o) for o in opcodes}

    def verdict(self, packet: Packet, now: int) -> Verdict | None:
        if packet.retry_of != 0 or packet.is_response != self.responses:
            return None
        op = packet.opcode & 0x7F
        if self.opcodes is not None and op not in self.opcodes:
            return None
        return Verdict.DROP


class DelayStep(FaultRule):
    """Add ``extra_ns`` to every packet sent in ``[start, stop)``."""

    def __init__(self, start: int, extra_ns: int, stop: int | None = None) -> None:
        self.start, self.extra_ns, self.stop = start, extra_ns, stop

    def extra_delay(self, packet: Packet, now: int) -> int:
        if now >= self.start and (self.stop is None or now < self.stop):
            return self.extra_ns
        return 0


@dataclass
class FaultPlan:
    seed: int = 0
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    corrupt_prob: float = 0.0
    base_delay_ns: int = 1000
    bandwidth_gbps: float = 10.0
    jitter_ns: int = 0
    jitter_dist: str = "uniform"
    rules: list[FaultRule] = field(default_factory=list)

    def serialization_ns(self, nbytes: int) -> int:
        if self.bandwidth_gbps <= 0:
            return 0
        return math.ceil(nbytes * 8 / self.bandwidth_gbps)


class Waitable:
    """Something a simulated thread can ``yield`` on."""

    def __init__(self) -> None:
        self.done = False
        self._callbacks: list[Callable[["Waitable"], None]] = []

    def on_done(self, callback: Callable[["Waitable"], None]) -> None:
        if self.done:
            callback(self)
        else:
            self._callbacks.append(callback)

    def _complete(self) -> None:
        if self.done:
            return
        self.done = True
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)


class Task(Waitable):
    """Cooperative simulated thread driven by a generator.

    The generator yields a :class:`Waitable` (or a list of them) and is
    resumed with it once complete.
    """

    def __init__(self, net: "Network", gen: Generator[Any, Any, Any], name: str = "") -> None:
        super().__init__()
        self.net = net
        self.gen = gen
        self.name = name
        self.result: Any = None
        self.error: BaseException | None = None

    def _step(self, value: Any = None) -> None:
        try:
            waited = self.gen.send(value)
        except StopIteration as stop:
            self.result = stop.value
            self._complete()
            return
        except BaseException as exc:  # surfaced by Network.run_until
            self.error = exc
            self._complete()
            self.net._failed_tasks.append(self)
            return
        if isinstance(waited, (list, tuple)):
            pending = [w for w in waited if not w.done]
            if not pending:
                self.net.schedule(self.net.now, self._step, waited)
                return
            remaining = [len(pending)]

            def one_done(_w: Waitable) -> None:
                remaining[0] -= 1
                if remaining[0] == 0:
                    self.net.schedule(self.net.now, self._step, waited)

            for w in pending:
                w.on_done(one_done)
        else:
            waited.on_done(lambda w: self.net.schedule(self.net.now, self._step, w))


class _Event:
    __slots__ = ("fn", "args", "daemon", "alive")

    def __init__(self, fn: Callable, args: tuple, daemon: bool) -> None:
        self.fn, self.args, self.daemon, self.alive = fn, args, daemon, True


class Network:
    """Event loop plus lossy packet delivery between registered endpoints."""

    def __init__(self, plan: FaultPlan | None = None, trace: bool = False,
                 wire_check: bool = False) -> None:
        self.plan = plan or FaultPlan()
        self.rng = random.Random(self.plan.seed)
        self.now = 0
        self._heap: list[tuple[int, int, _Event]] = []
        self._seq = itertools.count()
        self._live = 0
        self.endpoints: dict[int, Callable[[Packet], None]] = {}
        self.tracing = trace
        self.trace: list[str] = []
        self.wire_check = wire_check
        self.stats = {"sent": 0, "dropped": 0, "duplicated": 0, "corrupted": 0,
                      "delivered": 0, "requests_sent": 0}
        self._failed_tasks: list[Task] = []

    # -- scheduling

    def schedule(self, at: int, fn: Callable, *args: Any, daemon: bool = False) -> _Event:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        ev = _Event(fn, args, daemon)
        heapq.heappush(self._heap, (at, next(self._seq), ev))
        if not daemon:
            self._live += 1
        return ev

    def cancel(self, ev: _Event | None) -> None:
        if ev is not None and ev.alive:
            ev.alive = False
            if not ev.daemon:
                self._live -= 1

    def sleep(self, ns: int) -> Waitable:
        w = Waitable()
        self.schedule(self.now + max(0, int(ns)), w._complete)
        return w

    def spawn(self, gen: Generator[Any, Any, Any], name: str = "") -> Task:
        task = Task(self, gen, name)
        self.schedule(self.now, task._step, None)
        return task

    def run_until(self, predicate: Callable[[], bool] | None = None,
                  until: int | None = None) -> int:
        """Process events until ``predicate`` holds, ``until`` is reached, or
        only daemon events remain."""
        heap = self._heap
        while True:
            if predicate is not None and predicate():
                break
            if not heap or (self._live == 0 and until is None):
                break
            at, _, ev = heap[0]
            if until is not None and at > until:
                self.now = until
                break
            heapq.heappop(heap)
            if not ev.alive:
                continue
            ev.alive = False
            if not ev.daemon:
                self._live -= 1
            self.now = at
            ev.fn(*ev.args)
            if self._failed_tasks:
                task = self._failed_tasks.pop(0)
                raise task.error  # type: ignore[misc]
        return self.now

    def run(self) -> int:
        return self.run_until()

    def wait(self, waitable: Waitable) -> Waitable:
        self.run_until(lambda: waitable.done)
        if not waitable.done:
            raise RuntimeError("simulation went idle before the awaited event completed")
        return waitable

    # -- packets

    def register(self, endpoint_id: int, handler: Callable[[Packet], None]) -> None:
        if endpoint_id in self.endpoints:
            raise ConfigurationError(f"endpoint {endpoint_id} already registered")
        self.endpoints[endpoint_id] = handler

    def _log(self, event: str, p: Packet) -> None:
        if not self.tracing:
            return
        flags = [f"op={p.opcode:02x}"]
        if p.is_response:
            flags.append("resp")
        if p.retry_of:
            flags.append("retry")
        if p.corrupted:
            flags.append("corrupt")
        if p.meta.get("dup"):
            flags.append("dup")
        self.trace.append(f"{self.now},{event},{p.src},{p.dst},{p.request_id},{p.frag_seq},{'|'.join(flags)}")

    def send(self, packet: Packet, at: int | None = None) -> None:
        """Put ``packet`` on the wire at time ``at`` (default: now)."""
        if packet.dst not in self.endpoints:
            raise ConfigurationError(f"no endpoint {packet.dst} registered")
        if at is not None and at > self.now:
            self.schedule(at, self.send, packet)
            return
        plan, rng = self.plan, self.rng
        self.stats["sent"] += 1
        if not packet.is_response:
            self.stats["requests_sent"] += 1
        packet.sent_at = self.now
        self._log("send", packet)
        r_loss, r_dup, r_corrupt = rng.random(), rng.random(), rng.random()
        verdicts = {rule.verdict(packet, self.now) for rule in plan.rules} - {None}
        if Verdict.DROP in verdicts or r_loss < plan.loss_prob:
            self.stats["dropped"] += 1
            self._log("drop", packet)
            return
        copies = [packet]
        if Verdict.DUPLICATE in verdicts or r_dup < plan.dup_prob:
            dup = packet.copy()
            dup.meta["dup"] = True
            copies.append(dup)
            self.stats["duplicated"] += 1
        if Verdict.CORRUPT in verdicts or r_corrupt < plan.corrupt_prob:
            packet.corrupted = True
        extra = sum(rule.extra_delay(packet, self.now) for rule in plan.rules)
        base = plan.base_delay_ns + plan.serialization_ns(packet.wire_size) + extra
        for p in copies:
            delay = base + self._jitter()
            self.schedule(self.now + delay, self._deliver, p)

    def _jitter(self) -> int:
        j = self.plan.jitter_ns
        if j <= 0:
            return 0
        if self.plan.jitter_dist == "exponential":
            return int(self.rng.expovariate(1.0 / j))
        return self.rng.randint(0, j)

    def _deliver(self, packet: Packet) -> None:
        packet.delivered_at = self.now
        self.stats["delivered"] += 1
        if packet.corrupted:
            self.stats["corrupted"] += 1
        self._log("deliver", packet)
        if self.wire_check:
            decoded = Packet.decode(packet.encode(), packet.src, packet.dst, packet.is_response)
            decoded.corrupted, decoded.sent_at, decoded.delivered_at = (
                packet.corrupted, packet.sent_at, packet.delivered_at)
            decoded.meta = packet.meta
            packet = decoded
        self.endpoints[packet.dst](packet)

    def write_trace(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("time,event,src,dst,request_id,frag_seq,flags\n")
            for line in self.trace:
                fh.write(line + "\n")
