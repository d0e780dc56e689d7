"""INI-style configuration: ``[mn]``, ``[net]``, ``[clib]`` and ``[cluster]``."""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .clib import ClibConfig
from .memnode import MnConfig
from .netsim import FaultPlan


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None) -> None:
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


@dataclass
class ClusterConfig:
    mns: int = 1
    pressure_threshold: float = 0.85
    auto_migrate: bool = False
    report_interval_ns: int = 0


@dataclass
class SimConfig:
    mn: MnConfig = field(default_factory=MnConfig)
    net: FaultPlan = field(default_factory=FaultPlan)
    clib: ClibConfig = field(default_factory=ClibConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)


_SECTIONS = {"mn": MnConfig, "net": FaultPlan, "clib": ClibConfig, "cluster": ClusterConfig}
_SKIP = {"rules"}


def _coerce(raw: str, default: object, type_name: str):
    text = raw.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if default is None:
        if text.lower() in ("", "none"):
            return None
        return float(text) if "float" in type_name else int(text)
    if isinstance(default, int):
        try:
            return int(text.replace("_", ""), 0)
        except ValueError:
            value = float(text)  # allow 1e9
            if not value.is_integer():
                raise ValueError(f"expected an integer, got {text!r}") from None
            return int(value)
    if isinstance(default, float):
        if "/" in text:
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return float(text)
    return text


def _line_of(lines: list[str], section: str, key: str | None) -> int | None:
    current = None
    for i, line in enumerate(lines, 1):
        stripped = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None:
            k = re.split(r"[=:]", stripped, maxsplit=1)[0].strip().lower()
            if k == key:
                return i
    return None


def parse_config(text: str, path: str | None = None) -> SimConfig:
    lines = text.splitlines()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None), path) from exc
    cfg = SimConfig()
    for section in parser.sections():
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown section [{section}]", _line_of(lines, section, None), path)
        defaults = cls()
        fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in _SKIP}
        values = {}
        for key, raw in parser.items(section):
            line = _line_of(lines, section, key)
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, path)
            try:
                values[key] = _coerce(raw, getattr(defaults, key), str(fields[key].type))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}", line, path) from exc
        try:
            obj = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}", _line_of(lines, section, None), path) from exc
        setattr(cfg, section, obj)
    return cfg


def load_config(path: str | Path) -> SimConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=str(p)) from exc
    return parse_config(text, str(p))
