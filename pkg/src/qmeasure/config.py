"""Experiment configuration files.

A config is a YAML mapping::

    schema: qmeasure-config/1
    kind: ch-sweep            # simulate | ch-sweep | reliability | approximant | verify
    seed: 0
    threads: 1
    output: results           # directory, overridden by --out
    ch-sweep:                 # one section, named after ``kind``
      n_spins: {start: 20, stop: 200, step: 20}
      angles: [0.0, 1.0]
      p_up: 0.9

Every section is validated and completed with defaults before anything runs.
``to_dict`` returns the completed form, so parse -> serialize -> parse is a
fixed point.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SCHEMA = "qmeasure-config/1"
KINDS = ("simulate", "ch-sweep", "reliability", "approximant", "verify")


class ConfigError(ValueError):
    pass


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _int(d: dict, key: str, path: str, default=None, lo: int | None = None) -> int:
    v = d.get(key, default)
    if v is None:
        _fail(f"{path}.{key}", "required")
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(f"{path}.{key}", f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        _fail(f"{path}.{key}", f"must be >= {lo}, got {v}")
    return v


def _float(d: dict, key: str, path: str, default=None) -> float:
    v = d.get(key, default)
    if v is None:
        _fail(f"{path}.{key}", "required")
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        _fail(f"{path}.{key}", f"expected a finite number, got {v!r}")
    return float(v)


def _floats(d: dict, key: str, path: str, default=None, length: int | None = None) -> list[float]:
    v = d.get(key, default)
    if v is None:
        _fail(f"{path}.{key}", "required")
    if not isinstance(v, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in v):
        _fail(f"{path}.{key}", f"expected a list of numbers, got {v!r}")
    if length is not None and len(v) != length:
        _fail(f"{path}.{key}", f"expected {length} entries, got {len(v)}")
    return [float(x) for x in v]


def _choice(d: dict, key: str, path: str, options, default=None) -> str:
    v = d.get(key, default)
    if v not in options:
        _fail(f"{path}.{key}", f"expected one of {list(options)}, got {v!r}")
    return v


def _grid(d: dict, key: str, path: str, integer: bool, default=None):
    """A list of values or ``{start, stop, step}`` (ints) / ``{start, stop, num}`` (floats)."""
    v = d.get(key, default)
    p = f"{path}.{key}"
    if isinstance(v, list):
        kind = int if integer else (int, float)
        if not all(isinstance(x, kind) and not isinstance(x, bool) for x in v):
            _fail(p, f"expected a list of {'integers' if integer else 'numbers'}")
        if not v:
            _fail(p, "grid is empty")
        return list(v)
    if isinstance(v, dict):
        if integer:
            g = {"start": _int(v, "start", p), "stop": _int(v, "stop", p),
                 "step": _int(v, "step", p, 1, lo=1)}
        else:
            g = {"start": _float(v, "start", p), "stop": _float(v, "stop", p),
                 "num": _int(v, "num", p, lo=0)}
        if not expand_grid(g):
            _fail(p, "grid is empty")
        return g
    _fail(p, f"expected a list or a range mapping, got {v!r}")


def expand_grid(g) -> list:
    if isinstance(g, list):
        return list(g)
    if "step" in g:
        return list(range(g["start"], g["stop"] + 1, g["step"]))
    if g["num"] == 1:
        return [g["start"]]
    return [g["start"] + (g["stop"] - g["start"]) * k / (g["num"] - 1) for k in range(g["num"])]


def _amplitudes(d: dict, path: str, n: int | None):
    v = d.get("amplitudes")
    if v is None or v == "uniform" or v == "random":
        return v
    p = f"{path}.amplitudes"
    if not isinstance(v, list):
        _fail(p, "expected 'uniform', 'random' or a list of numbers / [re, im] pairs")
    amps = []
    for x in v:
        if isinstance(x, list) and len(x) == 2:
            amps.append([float(x[0]), float(x[1])])
        elif isinstance(x, (int, float)) and not isinstance(x, bool):
            amps.append([float(x), 0.0])
        else:
            _fail(p, f"bad amplitude {x!r}")
    if n is not None and len(amps) != n:
        _fail(p, f"expected {n} amplitudes, got {len(amps)}")
    norm = sum(a * a + b * b for a, b in amps)
    if abs(norm - 1) > 1e-9:
        _fail(p, f"amplitudes must be normalized, sum |c|^2 = {norm}")
    return amps


def _spin_section(d: dict, path: str, readout: bool = True) -> dict:
    out: dict[str, Any] = {"angles": _floats(d, "angles", path, [0.0, 1.0])}
    if len(out["angles"]) < 2:
        _fail(f"{path}.angles", "need at least two levels")
    if not readout:
        return out
    if "t_star" in d:
        out["t_star"] = _float(d, "t_star", path)
    else:
        out["p_up"] = _float(d, "p_up", path, 0.9)
        if not 0 < out["p_up"] <= 1:
            _fail(f"{path}.p_up", "must lie in (0, 1]")
    return out


def _simulate(d: dict, path: str) -> dict:
    model = _choice(d, "model", path, ("random", "coleman-hepp"), "random")
    out: dict[str, Any] = {"model": model}
    if model == "random":
        out["n"] = _int(d, "n", path, 2, lo=2)
        out["dim_k"] = _int(d, "dim_k", path, 4, lo=1)
        out["nu"] = _int(d, "nu", path, out["n"], lo=1)
        if out["nu"] > out["dim_k"]:
            _fail(f"{path}.nu", "cannot exceed dim_k")
        out["coupling_scale"] = _float(d, "coupling_scale", path, 1.0)
        n = out["n"]
        out["energies"] = _floats(d, "energies", path, length=n) if "energies" in d else None
    else:
        out["n_spins"] = _int(d, "n_spins", path, lo=1)
        out.update(_spin_section(d, path, readout=False))
        n = len(out["angles"])
        out["energies"] = _floats(d, "energies", path, [0.0] * n, length=n)
    out["amplitudes"] = _amplitudes(d, path, n) or ("random" if model == "random" else "uniform")
    out["observable"] = _choice(d, "observable", path, ("random", "sigma_x"), "random")
    if out["observable"] == "sigma_x" and n != 2:
        _fail(f"{path}.observable", "sigma_x needs a two-level system")
    out["times"] = _grid(d, "times", path, integer=False)
    return out


def _ch_sweep(d: dict, path: str) -> dict:
    out = {"n_spins": _grid(d, "n_spins", path, integer=True), **_spin_section(d, path)}
    if min(expand_grid(out["n_spins"])) < 1:
        _fail(f"{path}.n_spins", "spin counts must be >= 1")
    out["energies"] = _floats(d, "energies", path, [0.0] * len(out["angles"]),
                              length=len(out["angles"]))
    return out


def _reliability(d: dict, path: str) -> dict:
    pairs = d.get("pairs")
    p = f"{path}.pairs"
    if not isinstance(pairs, list) or not pairs:
        _fail(p, "expected a non-empty list of [N, n] pairs")
    for x in pairs:
        if not (isinstance(x, list) and len(x) == 2 and all(
                isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in x)):
            _fail(p, f"bad pair {x!r}; expected [N, n] with positive integers")
    out = {"pairs": [list(x) for x in pairs]}
    if d.get("p") is not None:
        out["p"] = _float(d, "p", path)
    return out


def _approximant(d: dict, path: str) -> dict:
    rng = _floats(d, "range", path, [0.0, 1.0], length=2)
    if rng[1] <= rng[0]:
        _fail(f"{path}.range", "need lower < upper")
    out = {"range": rng, "epsilon": _float(d, "epsilon", path),
           "rule": _choice(d, "rule", path, ("midpoint", "left"), "midpoint"),
           "proxy": _choice(d, "proxy", path, ("position", "random"), "position"),
           "grid_dim": _int(d, "grid_dim", path, 64, lo=1),
           "max_denominator": _int(d, "max_denominator", path, 64, lo=1),
           "apparatus_size": _int(d, "apparatus_size", path, 10 ** 6, lo=1)}
    if out["epsilon"] <= 0:
        _fail(f"{path}.epsilon", "must be positive")
    return out


def _verify(d: dict, path: str) -> dict:
    model = _choice(d, "model", path, ("random", "coleman-hepp", "ideal"), "random")
    out: dict[str, Any] = {"model": model,
                           "fault": _choice(d, "fault", path, ("none", "sum-rule", "hermitian"), "none"),
                           "t": _float(d, "t", path, 1.0)}
    if model == "random":
        out["n"] = _int(d, "n", path, 2, lo=2)
        out["dim_k"] = _int(d, "dim_k", path, 4, lo=1)
        out["nu"] = _int(d, "nu", path, out["n"], lo=1)
        if out["nu"] > out["dim_k"]:
            _fail(f"{path}.nu", "cannot exceed dim_k")
        n = out["n"]
    elif model == "coleman-hepp":
        out["n_spins"] = _int(d, "n_spins", path, 8, lo=1)
        out.update(_spin_section(d, path))
        if out["n_spins"] > 12:
            _fail(f"{path}.n_spins", "dense comparison limited to 12 spins")
        out.pop("t")
        n = len(out["angles"])
    else:
        out["n"] = _int(d, "n", path, 2, lo=2)
        out.pop("t")
        n = out["n"]
    out["amplitudes"] = _amplitudes(d, path, n) or "uniform"
    return out


SECTIONS = {"simulate": _simulate, "ch-sweep": _ch_sweep, "reliability": _reliability,
            "approximant": _approximant, "verify": _verify}


@dataclass
class ExperimentConfig:
    kind: str
    params: dict
    seed: int = 0
    threads: int = 1
    output: str = "results"
    schema: str = SCHEMA
    source: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {"schema": self.schema, "kind": self.kind, "seed": self.seed,
                "threads": self.threads, "output": self.output, self.kind: self.params}

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def config_from_dict(raw: Any, kind: str | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        _fail("<root>", "config must be a mapping")
    schema = raw.get("schema", SCHEMA)
    if schema != SCHEMA:
        _fail("schema", f"unsupported schema {schema!r}, expected {SCHEMA!r}")
    k = raw.get("kind", kind)
    if kind is not None and k != kind:
        _fail("kind", f"config is for {k!r} but subcommand is {kind!r}")
    if k not in KINDS:
        _fail("kind", f"expected one of {list(KINDS)}, got {k!r}")
    section = raw.get(k, {})
    if not isinstance(section, dict):
        _fail(k, "section must be a mapping")
    params = SECTIONS[k](section, k)
    seed = _int(raw, "seed", "<root>", 0, lo=0)
    if seed >= 2 ** 64:
        _fail("seed", "must fit in 64 bits")
    threads = _int(raw, "threads", "<root>", 1, lo=1)
    output = raw.get("output", "results")
    if not isinstance(output, str):
        _fail("output", "expected a path string")
    return ExperimentConfig(k, params, seed, threads, output)


def loads(text: str, kind: str | None = None, source: str | None = None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{source or '<config>'}: YAML error at {where}: "
                          f"{getattr(exc, 'problem', exc)}") from exc
    cfg = config_from_dict(raw if raw is not None else {}, kind)
    cfg.source = source
    return cfg


def load(path: str | Path, kind: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        return loads(text, kind, str(path))
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(str(path)) else f"{path}: {msg}") from None
