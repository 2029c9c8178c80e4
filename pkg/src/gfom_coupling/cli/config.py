"""Flat ``key = value`` experiment configuration with a typed schema and presets.

Values are plain scalars, comma-separated lists, or JSON (for function and
matrix fields).  Lines starting with ``#`` are comments.  A ``[section]``
header is optional and ignored.
"""
from __future__ import annotations

import configparser
import json
import os
from dataclasses import asdict, dataclass, fields, replace

from ..errors import ConfigInvalid

__all__ = ["ExperimentConfig", "PRESETS", "SCHEMA", "load_config", "parse_config_text",
           "build_config", "with_overrides", "ENV_THREADS", "ENV_OUT"]

ENV_THREADS = "GFOM_COUPLING_THREADS"
ENV_OUT = "GFOM_COUPLING_OUT"

KINDS = ("amp-tanh", "linear", "custom", "oracle")
SE_SOURCES = ("monte_carlo", "closed_form", "explicit")
DESIGNS = ("orthonormal", "gaussian")
MAX_SEED = 2 ** 64


def _int(v):
    return int(str(v).strip())


def _float(v):
    return float(str(v).strip())


def _int_list(v):
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(";", ",").split(",") if x.strip())


def _float_list(v):
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).replace(";", ",").split(",") if x.strip())


def _json(v):
    return json.loads(v) if isinstance(v, str) else v


def _str(v):
    return str(v).strip()


# key -> (parser, unit / meaning)
SCHEMA = {
    "preset": (_str, "name of the preset the config started from"),
    "kind": (_str, f"system family, one of {', '.join(KINDS)}"),
    "n": (_int_list, "dimensions (comma-separated integers)"),
    "T": (_int, "number of iterations (steps)"),
    "trials": (_int, "independent coupled runs per (n, sigma_scale) group"),
    "r_grid": (_float_list, "tail parameters r (dimensionless, comma-separated)"),
    "K": (_int, "state-evolution Monte Carlo replicates"),
    "psi_K": (_int, "replicates for the population psi terms (0 disables)"),
    "seed": (_int, "base seed, unsigned 64-bit"),
    "se_source": (_str, f"one of {', '.join(SE_SOURCES)}"),
    "sigma_scale": (_float_list, "multipliers applied to Sigma (1 = matched)"),
    "lam": (_float, "autoregressive coefficient on the first superdiagonal of Lambda"),
    "design": (_str, f"constant design for the linear kind, one of {', '.join(DESIGNS)}"),
    "f": (_json, "JSON list of function specs (custom kind)"),
    "g": (_json, "JSON list of function specs (custom kind)"),
    "sigma": (_json, "JSON T x T covariance (explicit se_source)"),
    "b": (_json, "JSON T x T debiasing matrix (explicit se_source)"),
    "threads": (_int, "worker threads"),
    "out": (_str, "output directory"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    n: tuple
    T: int
    trials: int
    seed: int | None
    preset: str = ""
    r_grid: tuple = (1.0, 2.0, 3.0)
    K: int = 5000
    psi_K: int = 0
    se_source: str = "monte_carlo"
    sigma_scale: tuple = (1.0,)
    lam: float = 0.5
    design: str = "gaussian"
    f: list | None = None
    g: list | None = None
    sigma: list | None = None
    b: list | None = None
    threads: int = 1
    out: str = "gfom-out"

    def validate(self) -> "ExperimentConfig":
        errs = []
        if self.kind not in KINDS:
            errs.append(("kind", f"unknown kind {self.kind!r}"))
        if self.seed is None:
            errs.append(("seed", "a seed is required (no wall-clock seeding)"))
        elif not 0 <= self.seed < MAX_SEED:
            errs.append(("seed", "must be an unsigned 64-bit integer"))
        if self.T < 1:
            errs.append(("T", "must be at least 1"))
        if self.trials < 1:
            errs.append(("trials", "must be at least 1"))
        if not self.n:
            errs.append(("n", "at least one dimension is required"))
        for n in self.n:
            if n < max(self.T, 1):
                errs.append(("n", f"dimension {n} is smaller than T={self.T}"))
        if self.K < 100:
            errs.append(("K", "need at least 100 replicates"))
        if self.psi_K and self.psi_K < 100:
            errs.append(("psi_K", "need 0 or at least 100 replicates"))
        for r in self.r_grid:
            if r < 0 or (self.n and r > min(self.n)):
                errs.append(("r_grid", f"r={r} outside [0, n]"))
        if not self.sigma_scale or any(s <= 0 for s in self.sigma_scale):
            errs.append(("sigma_scale", "multipliers must be positive"))
        if self.se_source not in SE_SOURCES:
            errs.append(("se_source", f"unknown source {self.se_source!r}"))
        if self.design not in DESIGNS:
            errs.append(("design", f"unknown design {self.design!r}"))
        if self.threads < 1:
            errs.append(("threads", "must be at least 1"))
        if self.kind == "custom":
            for key in ("f", "g"):
                val = getattr(self, key)
                if not isinstance(val, list) or len(val) != self.T:
                    errs.append((key, f"need a JSON list of {self.T} function specs"))
            if self.se_source == "closed_form":
                errs.append(("se_source", "closed_form applies to the linear kind only"))
            if self.se_source == "explicit":
                for key in ("sigma", "b"):
                    val = getattr(self, key)
                    if not (isinstance(val, list) and len(val) == self.T
                            and all(isinstance(row, list) and len(row) == self.T for row in val)):
                        errs.append((key, f"need a JSON {self.T}x{self.T} matrix"))
        if errs:
            raise ConfigInvalid(errs)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


_BASE = dict(r_grid=(1.0, 2.0, 3.0), K=5000, psi_K=0, seed=20240601, threads=1)

PRESETS = {
    "matched-amp-tanh": dict(_BASE, kind="amp-tanh", n=(250, 1000, 4000), T=4, trials=100,
                             K=2000),
    "mismatch-sweep": dict(_BASE, kind="amp-tanh", n=(500,), T=4, trials=50, K=2000,
                           psi_K=1000, sigma_scale=(0.5, 0.8, 1.0, 1.25, 2.0)),
    "linear-ar": dict(_BASE, kind="linear", design="orthonormal", lam=0.5, n=(500,), T=4,
                      trials=200, se_source="closed_form"),
    "tail-check": dict(_BASE, kind="linear", design="gaussian", lam=0.5, n=(500,), T=3,
                       trials=500, se_source="closed_form"),
    "oracle-suite": dict(_BASE, kind="oracle", n=(200,), T=3, trials=1),
}


def parse_config_text(text: str) -> dict:
    """Raw ``{key: value-string}`` from flat config text."""
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=None)
    parser.optionxform = str
    if not text.lstrip().startswith("["):
        text = "[experiment]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid([("config", str(exc).splitlines()[0])]) from exc
    raw = {}
    for section in parser.sections():
        raw.update(parser[section])
    return raw


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _coerce(raw: dict) -> tuple:
    values, errs = {}, []
    for key, val in raw.items():
        if key not in SCHEMA:
            errs.append((key, "unknown key"))
            continue
        try:
            values[key] = SCHEMA[key][0](val)
        except (ValueError, TypeError) as exc:
            errs.append((key, f"cannot parse {val!r}: {exc}"))
    return values, errs


def build_config(raw: dict | None = None, preset: str | None = None, overrides: dict | None = None,
                 env: dict | None = None) -> ExperimentConfig:
    """Merge preset < config file < environment (threads/out only) < explicit overrides."""
    env = os.environ if env is None else env
    raw = dict(raw or {})
    values, errs = _coerce(raw)
    preset = preset or values.get("preset")
    merged = {}
    if preset:
        if preset not in PRESETS:
            errs.append(("preset", f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}"))
        else:
            merged.update(PRESETS[preset])
            merged["preset"] = preset
    merged.update(values)
    if ENV_THREADS in env:
        try:
            merged["threads"] = int(env[ENV_THREADS])
        except ValueError:
            errs.append(("threads", f"{ENV_THREADS} is not an integer"))
    if ENV_OUT in env:
        merged["out"] = env[ENV_OUT]
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = val
    for key in ("kind", "n", "T", "trials"):
        if key not in merged:
            errs.append((key, "missing (set it or pick a preset)"))
    if errs:
        raise ConfigInvalid(errs)
    merged.setdefault("seed", None)
    names = {f.name for f in fields(ExperimentConfig)}
    cfg = ExperimentConfig(**{k: v for k, v in merged.items() if k in names})
    return cfg.validate()


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw).validate()
