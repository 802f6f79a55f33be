"""Case configuration: a flat ``key = value`` text format plus overrides.

Grammar: one ``key = value`` per line; ``#`` starts a comment; blank lines
are ignored; keys are case-sensitive and may appear once.  Lists (``levels``)
are comma-separated.  Command-line overrides ``--key value`` use the same
keys and win over the file.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError, IOFailure

CASES = ("oseen-conv", "ldc", "tgv2d", "tgv3d")
OUTPUT_ENV = "VMSFLOW_OUTPUT_DIR"


@dataclass(frozen=True)
class CaseConfig:
    case: str
    k_prime: int = 1
    n_elements: Optional[int] = None
    nu: Optional[float] = None
    Re: Optional[float] = None
    scheme: str = "midpoint"
    model: Optional[str] = None
    dt: Optional[float] = None
    dt_ref: Optional[float] = None
    T: Optional[float] = None
    C_inv: float = 36.0
    tau_C_rule: str = "standard"
    refinement: int = 0
    levels: Optional[tuple] = None
    regime: str = "advective"
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    max_iters: int = 20
    relaxation: float = 1.0
    sample_points: int = 0
    output_dir: str = "results"
    checkpoint: Optional[str] = None
    restart: Optional[str] = None

    @property
    def viscosity(self) -> float:
        """``nu``, or ``U L / Re`` with unit velocity and length scales."""
        if self.nu is None and self.Re is None:
            raise ConfigError(f"case {self.case!r} needs 'nu' or 'Re'")
        return self.nu if self.nu is not None else 1.0 / self.Re

    @property
    def output_path(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


_DEFAULTS = {
    "ldc": dict(n_elements=16, Re=100.0, model="quasi-static", levels=(8, 16, 32, 64)),
    "tgv2d": dict(n_elements=16, nu=0.01, model="dynamic", dt_ref=0.1, T=1.0, levels=(8, 16, 32)),
    "tgv3d": dict(n_elements=16, Re=1600.0, model="quasi-static", dt=0.05, T=10.0),
    "oseen-conv": dict(n_elements=16, model="quasi-static", levels=(8, 16, 32, 64)),
}

_TYPES = {f.name: f.type for f in fields(CaseConfig)}


def _convert(key, raw):
    t = _TYPES[key]
    raw = raw.strip()
    try:
        if key == "levels":
            vals = tuple(int(v) for v in raw.split(",") if v.strip())
            if not vals:
                raise ValueError
            return vals
        if "int" in t:
            v = float(raw)
            if v != int(v):
                raise ValueError
            return int(v)
        if "float" in t:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for key {key!r}") from None


def parse_text(text, source="<config>"):
    """Parse the flat format into a dict of raw strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_overrides(args):
    """``["--key", "value", ...]`` into a dict."""
    out = {}
    it = iter(args)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"expected --key, got {tok!r}")
        key = tok[2:]
        if key not in _TYPES:
            key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        try:
            out[key] = next(it)
        except StopIteration:
            raise ConfigError(f"missing value for --{key}") from None
    return out


def parse_config(path=None, overrides=None, text=None) -> CaseConfig:
    """Read, merge overrides, fill case defaults and validate."""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IOFailure(f"cannot read config {path}: {exc}") from exc
    if text is not None:
        raw = parse_text(text, str(path or "<config>"))
    raw.update(overrides or {})
    if "case" not in raw:
        raise ConfigError("missing required key 'case'")
    values = {k: _convert(k, v) for k, v in raw.items()}
    return validate(values)


def validate(values) -> CaseConfig:
    case = values.get("case")
    if case not in CASES:
        raise ConfigError(f"key 'case': must be one of {CASES}, got {case!r}")
    if values.get("nu") is not None and values.get("Re") is not None:
        raise ConfigError("keys 'nu' and 'Re': give one, not both")
    merged = dict(_DEFAULTS[case])
    if "nu" in values:
        merged.pop("Re", None)
    if "Re" in values:
        merged.pop("nu", None)
    merged.update(values)
    cfg = CaseConfig(**merged)
    _check(cfg)
    return cfg


def _check(cfg: CaseConfig):
    for key in ("nu", "Re", "dt", "dt_ref", "T", "C_inv", "rel_tol", "abs_tol"):
        v = getattr(cfg, key)
        if v is not None and not v > 0:
            raise ConfigError(f"key {key!r} must be positive, got {v}")
    if cfg.k_prime not in (1, 2):
        raise ConfigError(f"key 'k_prime' must be 1 or 2, got {cfg.k_prime}")
    if cfg.n_elements is not None and cfg.n_elements < 1:
        raise ConfigError("key 'n_elements' must be positive")
    if cfg.scheme not in ("backward-euler", "midpoint"):
        raise ConfigError(f"key 'scheme' must be backward-euler or midpoint, got {cfg.scheme!r}")
    if cfg.model not in ("dynamic", "quasi-static", "none"):
        raise ConfigError(f"key 'model' must be dynamic, quasi-static or none, got {cfg.model!r}")
    if cfg.tau_C_rule not in ("standard", "zero"):
        raise ConfigError(f"key 'tau_C_rule' must be standard or zero, got {cfg.tau_C_rule!r}")
    if cfg.regime not in ("advective", "diffusive"):
        raise ConfigError(f"key 'regime' must be advective or diffusive, got {cfg.regime!r}")
    if cfg.refinement < 0:
        raise ConfigError("key 'refinement' must be >= 0")
    if cfg.max_iters < 1:
        raise ConfigError("key 'max_iters' must be >= 1")
    if not 0 < cfg.relaxation <= 1:
        raise ConfigError("key 'relaxation' must lie in (0, 1]")
    if cfg.levels is not None and any(n < 1 for n in cfg.levels):
        raise ConfigError("key 'levels' must list positive element counts")
    if cfg.T is not None and cfg.dt is not None and cfg.T < cfg.dt:
        raise ConfigError("key 'T' must be at least dt")


def with_overrides(cfg: CaseConfig, **kw) -> CaseConfig:
    new = replace(cfg, **kw)
    _check(new)
    return new
