"""Workload descriptions, key generators and YCSB-style trace ingestion."""

from __future__ import annotations

import configparser
import dataclasses
import math
import random
from dataclasses import dataclass
from pathlib import Path

KINDS = ("read", "write", "alloc", "fault", "kv", "mv", "chase")
TRACE_OPS = {"READ": "get", "UPDATE": "set", "INSERT": "set", "DELETE": "delete"}
YCSB_MIXES = {"A": 0.5, "B": 0.95, "C": 1.0}  # read fraction


class TraceError(ValueError):
    def __init__(self, message: str, line: int, path: str | None = None) -> None:
        super().__init__(f"{path or '<trace>'}:{line}: {message}")
        self.line = line


@dataclass
class WorkloadSpec:
    kind: str = "kv"
    clients: int = 1
    ops: int = 1000
    keys: int = 1000
    distribution: str = "zipf"
    theta: float = 0.99
    value_size: int = 64
    mix: str = "A"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.distribution not in ("uniform", "zipf"):
            raise ValueError(f"unknown key distribution {self.distribution!r}")
        if self.mix.upper() not in YCSB_MIXES:
            raise ValueError(f"unknown YCSB mix {self.mix!r}")
        if self.clients < 1 or self.ops < 0 or self.keys < 1 or self.value_size < 0:
            raise ValueError("clients/keys must be positive, ops and value_size non-negative")

    @property
    def read_fraction(self) -> float:
        return YCSB_MIXES[self.mix.upper()]


@dataclass(frozen=True)
class TraceOp:
    op: str  # get | set | delete
    key: str
    size: int = 0


def zeta(n: int, theta: float) -> float:
    return math.fsum(1.0 / (i ** theta) for i in range(1, n + 1))


class ZipfGenerator:
    """Zipfian ranks in ``[0, n)`` with rank 0 the most popular.

    Uses the closed-form inversion from Gray et al. (as in YCSB), which
    needs only zeta(n) and zeta(2) up front.
    """

    def __init__(self, n: int, theta: float = 0.99, seed: int | None = 0) -> None:
        if n < 1:
            raise ValueError("n must be >= 1")
        if not 0 < theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        self.n, self.theta = n, theta
        self.rng = random.Random(seed)
        self.zetan = zeta(n, theta)
        zeta2 = zeta(2, theta)
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - zeta2 / self.zetan)
        self._half = 1 + 0.5 ** theta

    def mass(self, rank: int) -> float:
        """Analytic probability of ``rank`` (0-based)."""
        return 1.0 / ((rank + 1) ** self.theta) / self.zetan

    def next(self) -> int:
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < self._half:
            return 1
        return min(self.n - 1, int(self.n * (self.eta * u - self.eta + 1) ** self.alpha))


class UniformGenerator:
    def __init__(self, n: int, seed: int | None = 0) -> None:
        self.n = n
        self.rng = random.Random(seed)

    def next(self) -> int:
        return self.rng.randrange(self.n)


def key_generator(spec: WorkloadSpec, seed: int):
    if spec.distribution == "zipf":
        return ZipfGenerator(spec.keys, spec.theta, seed)
    return UniformGenerator(spec.keys, seed)


def key_name(rank: int) -> str:
    return f"user{rank}"


def ycsb_ops(spec: WorkloadSpec, seed: int, count: int | None = None) -> list[TraceOp]:
    """Synthesize a YCSB-style get/set sequence for one client."""
    gen = key_generator(spec, seed)
    rng = random.Random(seed ^ 0x9E3779B9)
    ops = []
    for _ in range(spec.ops if count is None else count):
        key = key_name(gen.next())
        if rng.random() < spec.read_fraction:
            ops.append(TraceOp("get", key))
        else:
            ops.append(TraceOp("set", key, spec.value_size))
    return ops


def parse_trace(text: str, path: str | None = None, default_size: int = 64) -> list[TraceOp]:
    ops = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        verb = parts[0].upper()
        if verb not in TRACE_OPS:
            raise TraceError(f"unknown op {parts[0]!r}", lineno, path)
        if len(parts) < 2 or len(parts) > 3:
            raise TraceError("expected 'OP key [value-size]'", lineno, path)
        size = default_size
        if len(parts) == 3:
            try:
                size = int(parts[2])
            except ValueError:
                raise TraceError(f"bad value size {parts[2]!r}", lineno, path) from None
            if size < 0:
                raise TraceError("value size must be non-negative", lineno, path)
        kind = TRACE_OPS[verb]
        ops.append(TraceOp(kind, parts[1], size if kind == "set" else 0))
    return ops


def ingest_trace(path: str | Path, default_size: int = 64) -> list[TraceOp]:
    p = Path(path)
    return parse_trace(p.read_text(encoding="utf-8"), str(p), default_size)


def parse_workload_spec(text: str, path: str | None = None) -> WorkloadSpec:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=path or "<workload>")
    except configparser.Error as exc:
        raise TraceError(str(exc).splitlines()[0], getattr(exc, "lineno", 1) or 1, path) from exc
    if not parser.has_section("workload"):
        raise TraceError("missing [workload] section", 1, path)
    fields = {f.name: f for f in dataclasses.fields(WorkloadSpec)}
    defaults = WorkloadSpec()
    values: dict = {}
    lines = text.splitlines()
    for key, raw in parser.items("workload"):
        lineno = next((i for i, l in enumerate(lines, 1) if l.strip().lower().startswith(key)), 1)
        if key not in fields:
            raise TraceError(f"unknown workload key {key!r}", lineno, path)
        default = getattr(defaults, key)
        try:
            values[key] = type(default)(raw.strip()) if not isinstance(default, str) else raw.strip()
        except ValueError:
            raise TraceError(f"bad value for {key}: {raw!r}", lineno, path) from None
    try:
        return WorkloadSpec(**values)
    except ValueError as exc:
        raise TraceError(str(exc), 1, path) from None


def load_workload(path: str | Path) -> WorkloadSpec | list[TraceOp]:
    """A ``[workload]`` INI spec, or a plain trace file."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    first = next((l.strip() for l in text.splitlines() if l.strip() and not l.strip().startswith("#")), "")
    if first.startswith("["):
        return parse_workload_spec(text, str(p))
    return parse_trace(text, str(p))
