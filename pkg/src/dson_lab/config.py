"""Experiment configuration in a flat ``key = value`` text format.

Lines starting with ``#`` are comments, lists are comma-separated, and
``seeds`` also accepts an inclusive range such as ``0..4``.  Serializing a
parsed config and parsing it again gives back the same object.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .norm import VARIANTS

OUT_ENV = "DSON_LAB_OUT"
DEFAULT_OUT = "dson_out"
EXTRA_VARIANTS = ("dson-agnostic",)


class ConfigError(ValueError):
    pass


def default_out() -> str:
    return os.environ.get(OUT_ENV, DEFAULT_OUT)


@dataclass
class ExperimentConfig:
    variant: str = "dson"
    domains: list = field(default_factory=lambda: [0, 1, 2, 3])
    target: str = "all"
    iters: int = 1000
    batch_size: int = 16
    eta0: float = 0.02
    alpha: float = 10.0
    decay_beta: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 0.0
    noise: float = 0.0
    seeds: list = field(default_factory=lambda: [0])
    domain_specific_weights: bool = True
    freeze_bn: bool = False
    val_every: int = 100
    data_seed: int = 0
    num_classes: int = 5
    out: str = field(default_factory=default_out)
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS + EXTRA_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if len(set(self.domains)) != len(self.domains) or not self.domains:
            raise ConfigError("domains must be a non-empty list of distinct ids")
        if self.target != "all":
            try:
                t = int(self.target)
            except ValueError:
                raise ConfigError(f"target must be 'all' or a domain id, got {self.target!r}") from None
            if t not in self.domains:
                raise ConfigError(f"target {t} is not among domains {self.domains}")
            self.target = str(t)
        if self.iters < 0 or self.batch_size < 1 or self.jobs < 1:
            raise ConfigError("iters must be >= 0, batch_size and jobs >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError("noise must lie in [0, 1]")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")

    def targets(self) -> list[int]:
        return list(self.domains) if self.target == "all" else [int(self.target)]

    def sources(self, target: int) -> list[int]:
        return [d for d in self.domains if d != target]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _parse_value(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is list:
            return parse_int_list(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_int_list(raw: str) -> list[int]:
    """``"0,1,3"`` or ``"0..4"`` (inclusive) into a list of ints."""
    raw = raw.strip()
    if ".." in raw:
        lo, hi = raw.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValueError(f"empty range {raw!r}")
        return list(range(lo, hi + 1))
    return [int(v) for v in raw.split(",") if v.strip()]


_KINDS = {"variant": str, "domains": list, "target": str, "iters": int, "batch_size": int,
          "eta0": float, "alpha": float, "decay_beta": float, "momentum": float,
          "weight_decay": float, "noise": float, "seeds": list,
          "domain_specific_weights": bool, "freeze_bn": bool, "val_every": int,
          "data_seed": int, "num_classes": int, "out": str, "jobs": int}


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _KINDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(_KINDS[key], raw, key)
    if base is None:
        return ExperimentConfig(**values)
    return base.replace(**values)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, list):
            s = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
