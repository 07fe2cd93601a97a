"""Scenario configuration files.

The format is flat ``key = value`` lines with dotted section prefixes::

    scenario = "cauchy-wave"
    sim.dt = 0.001
    sim.n_paths = 100000
    kernel.y0 = 0.0
    check.ks_threshold = 0.01628
    out.dir = "results"

Values are JSON literals; a bare word that is not valid JSON is read as a
string.  ``#`` starts a comment line.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

__all__ = ["ConfigError", "ScenarioConfig", "dumps", "loads", "parse_config"]

SIM_KEYS = ("dt", "T", "n_paths", "seed", "workers", "mutate")


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    dt: float
    T: float
    n_paths: int
    seed: int
    kernel: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    out: str | None = None
    workers: int = 1
    mutate: bool = False

    def __post_init__(self):
        if not isinstance(self.scenario, str) or not self.scenario:
            raise ConfigError("scenario must be a nonempty string")
        for name in ("dt", "T"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"sim.{name} must be a positive number, got {v!r}")
        if self.T < self.dt:
            raise ConfigError("sim.T must be at least sim.dt")
        for name, lo in (("n_paths", 1), ("seed", 0), ("workers", 1)):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < lo:
                raise ConfigError(f"sim.{name} must be an integer >= {lo}, got {v!r}")
        if not isinstance(self.mutate, bool):
            raise ConfigError("sim.mutate must be true or false")
        if self.out is not None and not isinstance(self.out, str):
            raise ConfigError("out.dir must be a string")

    def to_flat(self) -> dict:
        flat = {"scenario": self.scenario}
        flat.update({f"sim.{k}": getattr(self, k) for k in SIM_KEYS})
        flat.update({f"kernel.{k}": v for k, v in sorted(self.kernel.items())})
        flat.update({f"check.{k}": v for k, v in sorted(self.checks.items())})
        if self.out is not None:
            flat["out.dir"] = self.out
        return flat

    def updated(self, flat: dict) -> "ScenarioConfig":
        """Apply overrides; kernel and check keys must already exist here."""
        sim, kernel, checks, out = {}, dict(self.kernel), dict(self.checks), self.out
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if key == "scenario":
                if value != self.scenario:
                    raise ConfigError(f"config is for scenario {value!r}, not {self.scenario!r}")
            elif section == "sim" and name in SIM_KEYS:
                sim[name] = float(value) if name in ("dt", "T") and _is_int(value) else value
            elif section == "kernel" and name in kernel:
                kernel[name] = value
            elif section == "check" and name in checks:
                checks[name] = value
            elif key == "out.dir":
                out = value
            else:
                raise ConfigError(f"unknown key {key!r} for scenario {self.scenario}")
        return replace(self, kernel=kernel, checks=checks, out=out, **sim)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _value(text: str, lineno: int):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if not text or any(c in text for c in "[]{}\",= "):
            raise ConfigError(f"line {lineno}: cannot parse value {text!r}") from None
        return text


def parse_config(text: str) -> dict:
    """Parse the flat format into an ordered ``{dotted key: value}`` dict."""
    flat: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        section, dot, name = key.partition(".")
        if key != "scenario" and (not dot or section not in ("sim", "kernel", "check", "out") or not name):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = _value(value.strip(), lineno)
    return flat


def dumps(config: ScenarioConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in config.to_flat().items())


def loads(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Build a config from text.  Without ``base`` every sim key must be present."""
    flat = parse_config(text)
    if base is not None:
        return base.updated(flat)
    missing = [k for k in ("scenario",) + tuple(f"sim.{k}" for k in SIM_KEYS) if k not in flat]
    if missing:
        raise ConfigError(f"missing keys: {', '.join(missing)}")
    kernel, checks, out = {}, {}, None
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section == "kernel":
            kernel[name] = value
        elif section == "check":
            checks[name] = value
        elif key == "out.dir":
            out = value
        elif section == "out":
            raise ConfigError(f"unknown key {key!r}")
        elif section == "sim" and name not in SIM_KEYS:
            raise ConfigError(f"unknown key {key!r}")
    sim = {k: flat[f"sim.{k}"] for k in SIM_KEYS}
    for k in ("dt", "T"):
        if _is_int(sim[k]):
            sim[k] = float(sim[k])
    return ScenarioConfig(flat["scenario"], kernel=kernel, checks=checks, out=out, **sim)
