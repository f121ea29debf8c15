"""Flat ``key = value`` experiment configuration with command-line overrides."""
from __future__ import annotations

import hashlib
import json
import os
import typing
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from gadlab import labeltok as lt
from gadlab import trainer as tr
from gadlab.errors import ConfigError
from gadlab.runner.pipeline import ExperimentConfig

ALIASES = {"lambda": "lam", "λ": "lam", "gad_variant": "variant", "seed": "seeds"}
LOWER = {"mode", "variant", "unify", "strategy", "vocab_mode", "cls_source"}
CHOICES = {
    "mode": [m.value for m in tr.Mode],
    "variant": [v.value for v in tr.Variant],
    "unify": [u.value for u in tr.Unify],
    "strategy": [s.value for s in lt.Strategy],
    "vocab_mode": ["word", "char-chunk"],
    "cls_source": ["cls", "last_visual"],
    "dtype": ["float32", "float64"],
    "pooling": ["cls", "mean", "max", "first", "last"],
    "command": ["synth", "train", "eval", "bench", "tokreport", "export-embeddings", "compare"],
}
OUTPUT_ROOT_ENV = "GADLAB_OUTPUT_ROOT"

_HINTS = typing.get_type_hints(ExperimentConfig)
_FIELDS = {f.name for f in fields(ExperimentConfig)}


def canonical_key(key: str) -> str:
    k = key.strip().lstrip("-").replace("-", "_").lower()
    return ALIASES.get(k, k)


def convert(key: str, raw: str):
    """Typed value for ``key``; raises ConfigError on a malformed value."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown key {key!r}")
    hint = _HINTS[key]
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if typing.get_origin(hint) is tuple:
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"malformed value {raw!r} for {key}") from None
    value = raw.lower() if key in LOWER else raw
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"invalid {key} {raw!r}; expected one of {', '.join(CHOICES[key])}")
    return value


def parse_lines(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line.strip()!r}")
        k, v = body.split("=", 1)
        key = canonical_key(k)
        try:
            out[key] = convert(key, v)
        except ConfigError as e:
            raise ConfigError(f"{source}:{n}: {e} (line: {line.strip()!r})") from None
    return out


def parse_flags(flags: Sequence[str]) -> dict:
    out = {}
    i = 0
    flags = list(flags)
    while i < len(flags):
        f = flags[i]
        if not f.startswith("--"):
            raise ConfigError(f"unexpected argument {f!r}")
        if "=" in f:
            k, v = f[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(flags):
                raise ConfigError(f"flag {f} needs a value")
            k, v = f[2:], flags[i + 1]
            i += 2
        key = canonical_key(k)
        try:
            out[key] = convert(key, v)
        except ConfigError as e:
            raise ConfigError(f"flag --{k}: {e}") from None
    return out


def parse_config(path: str | Path | None = None, flags: Sequence[str] = (), **extra) -> ExperimentConfig:
    """File values first, then flags; unset keys keep their defaults."""
    values = {}
    if path is not None:
        p = Path(path)
        values.update(parse_lines(p.read_text(), str(p)))
    values.update(parse_flags(flags))
    values.update(extra)
    return ExperimentConfig(**values)


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    for k in ("command", "output_dir", "name", "sweep", "pooling", "bench_samples", "mask_decode"):
        d.pop(k, None)
    d["seeds"] = list(d["seeds"])
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def output_dir(cfg: ExperimentConfig, tag: str | None = None) -> Path:
    """Explicit ``output_dir`` or ``$GADLAB_OUTPUT_ROOT/<tag>-<config hash>``."""
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    tag = tag or cfg.name or f"{cfg.mode}-{cfg.strategy}"
    return root / f"{tag}-{config_hash(cfg)}"
