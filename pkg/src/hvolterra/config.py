"""Scenario files: YAML with validation errors that carry line numbers."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Any

import yaml

__all__ = ["SUITE_NAMES", "ConfigError", "GridConfig", "ScenarioConfig", "parse_config", "load_config"]

SUITE_NAMES = (
    "chaos-identities",
    "x-identities",
    "smg",
    "volterra-chaos",
    "ito",
    "ou",
    "random-field",
    "fbm-variance",
    "wave",
)

SIGMA_TYPES = ("deterministic", "chaos-polynomial", "lognormal-sampled")
TOP_KEYS = {"suite", "grid", "kernel", "sigma", "noise", "seeds", "refinement_levels", "tolerances", "options"}
GRID_KEYS = {"N", "T", "K1", "K2", "K3", "d_max"}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class GridConfig:
    N: int = 16
    T: float = 1.0
    K1: int | tuple = 1
    K2: int = 1
    K3: int = 1
    d_max: int = 4


@dataclass(frozen=True)
class ScenarioConfig:
    suite: str
    grid: GridConfig = field(default_factory=GridConfig)
    kernel: Any = None
    sigma: dict = field(default_factory=lambda: {"type": "deterministic", "value": 1.0})
    noise: dict | None = None
    seeds: tuple = (0,)
    refinement_levels: tuple = ()
    tolerances: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    source: str = "<config>"
    base_dir: str | None = None

    def with_overrides(self, suite: str | None = None, seed: int | None = None) -> "ScenarioConfig":
        kw = dict(self.__dict__)
        if suite is not None:
            if suite not in SUITE_NAMES:
                raise ConfigError(f"unknown suite {suite!r}", None, "--suite")
            kw["suite"] = suite
        if seed is not None:
            kw["seeds"] = (int(seed),)
        return ScenarioConfig(**kw)


def _line_map(node, prefix=(), out=None) -> dict:
    """(key path) -> 1-based line of the key, from the composed YAML tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            out[path] = k.start_mark.line + 1
            _line_map(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[prefix + (i,)] = v.start_mark.line + 1
            _line_map(v, prefix + (i,), out)
    return out


def _positive_int(value, what: str, err) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise err(f"{what} must be a positive integer, got {value!r}")
    return value


def parse_config(text: str, source: str = "<config>", base_dir: str | None = None) -> ScenarioConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"YAML syntax error: {problem}", line, source) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    lines = _line_map(node)

    def err_at(*path):
        def make(msg):
            return ConfigError(msg, lines.get(tuple(path)), source)
        return make

    unknown = sorted(set(data) - TOP_KEYS)
    if unknown:
        raise err_at(unknown[0])(f"unknown key {unknown[0]!r}")
    suite = data.get("suite")
    if suite is None:
        raise ConfigError("missing required key 'suite'", 1, source)
    if suite not in SUITE_NAMES:
        raise err_at("suite")(f"unknown suite {suite!r}; run list-suites for the names")

    grid_raw = data.get("grid") or {}
    if not isinstance(grid_raw, dict):
        raise err_at("grid")("grid must be a mapping")
    bad = sorted(set(grid_raw) - GRID_KEYS)
    if bad:
        raise err_at("grid", bad[0])(f"unknown grid key {bad[0]!r}")
    g = {}
    for key in ("N", "K2", "K3", "d_max"):
        if key in grid_raw:
            g[key] = _positive_int(grid_raw[key], f"grid.{key}", err_at("grid", key))
    if "K1" in grid_raw:
        k1 = grid_raw["K1"]
        if isinstance(k1, list):
            g["K1"] = tuple(_positive_int(v, "grid.K1 entry", err_at("grid", "K1")) for v in k1)
        else:
            g["K1"] = _positive_int(k1, "grid.K1", err_at("grid", "K1"))
    if "T" in grid_raw:
        T = grid_raw["T"]
        if isinstance(T, bool) or not isinstance(T, (int, float)) or T <= 0:
            raise err_at("grid", "T")(f"grid.T must be a positive number, got {T!r}")
        g["T"] = float(T)
    grid = GridConfig(**g)
    if suite == "ito" and grid.d_max < 2:
        raise err_at("grid", "d_max")("Ito suites need d_max >= 2")

    sigma = data.get("sigma") or {"type": "deterministic", "value": 1.0}
    if not isinstance(sigma, dict) or sigma.get("type") not in SIGMA_TYPES:
        raise err_at("sigma")(f"sigma needs a type from {SIGMA_TYPES}")

    kernel = data.get("kernel")
    kernels = kernel if isinstance(kernel, list) else [kernel] if kernel is not None else []
    for i, k in enumerate(kernels):
        if not isinstance(k, dict) or "type" not in k:
            path = ("kernel", i) if isinstance(kernel, list) else ("kernel",)
            raise err_at(*path)("kernel descriptor needs a 'type'")

    noise = data.get("noise")
    if noise is not None and not isinstance(noise, dict):
        raise err_at("noise")("noise must be a mapping")

    seeds = data.get("seeds", [0])
    seeds = [seeds] if isinstance(seeds, int) else seeds
    if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise err_at("seeds")("seeds must be an integer or a list of integers")

    levels = data.get("refinement_levels", [])
    if not isinstance(levels, list):
        raise err_at("refinement_levels")("refinement_levels must be a list")
    for i, lv in enumerate(levels):
        _positive_int(lv, "refinement level", err_at("refinement_levels", i))

    tolerances = data.get("tolerances") or {}
    if not isinstance(tolerances, dict):
        raise err_at("tolerances")("tolerances must be a mapping")
    clean_tol = {}
    for name, value in tolerances.items():
        try:
            clean_tol[str(name)] = float(value)
        except (TypeError, ValueError):
            raise err_at("tolerances", str(name))(f"tolerance {name!r} must be a number") from None

    options = data.get("options") or {}
    if not isinstance(options, dict):
        raise err_at("options")("options must be a mapping")

    return ScenarioConfig(
        suite=suite,
        grid=grid,
        kernel=kernel,
        sigma=dict(sigma),
        noise=dict(noise) if noise else None,
        seeds=tuple(seeds),
        refinement_levels=tuple(levels),
        tolerances=clean_tol,
        options=dict(options),
        source=source,
        base_dir=base_dir,
    )


def load_config(path) -> ScenarioConfig:
    p = FsPath(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror or exc}", None, str(p)) from None
    return parse_config(text, str(p), str(p.parent))
