"""Plain-text experiment configuration.

Configs are INI files read with :mod:`configparser`.  Every key lives in a
section and can be overridden as ``section.key=value``.  The output root
comes from, in order: an explicit argument, ``$LABELDELIVERY_OUTPUT_ROOT``,
the ``[experiment] output_root`` key, and finally ``./results``.

Example::

    [experiment]
    kind = main
    seeds = 0, 1, 2, 3, 4
    methods = soft, sls

    [data]
    n = 2000
    C = 10

    [train]
    epochs = 60

    [delivery]
    hold_period = 1
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..delivery import HARD_METHODS, METHODS
from ..errors import ConfigurationError
from ..train import TrainConfig

OUTPUT_ROOT_ENV = "LABELDELIVERY_OUTPUT_ROOT"
KINDS = ("main", "family", "sweep", "resample_probe", "geometry", "ood", "prop1")

DEFAULT_METHODS = {
    "main": ("soft", "sls", "majority", "label_smoothing", "mixup"),
    "family": ("soft", "sls", "multipass", "deterministic_control", "shuffled_sls", "majority"),
    "sweep": ("soft", "multipass", "deterministic_control", "sls"),
    "resample_probe": ("sls",),
    "geometry": ("soft", "sls"),
    "ood": ("soft", "sls"),
    "prop1": (),
}
MAIN_METHODS = frozenset({"soft", "sls", "majority", "label_smoothing", "mixup"})
COUNT_METHODS = frozenset({"soft", "multipass", "deterministic_control", "sls", "majority"})


@dataclass(frozen=True)
class DataConfig:
    n: int = 2000
    C: int = 10
    d: int = 10
    overlap: float = 1.0
    separation: float = 2.5
    votes_per_example: int = 50
    data_seed: int = 7
    path: str = ""


@dataclass(frozen=True)
class GeometryConfig:
    power_iters: int = 500
    power_tol: float = 1e-5
    trace_probes: int = 100
    grad_draws: int = 200
    high_quantile: float = 0.25
    partner_init_index: int = 1


@dataclass(frozen=True)
class OODConfig:
    scores: tuple[str, ...] = ("msp", "energy", "entropy", "margin", "odin", "knn")
    knn_k: int = 50
    odin_T: float = 1000.0
    odin_eps: float = 0.0014
    energy_T: float = 1.0
    shift_sigma: float = 10.0


@dataclass(frozen=True)
class SweepConfig:
    K_values: tuple[int, ...] = (5, 10, 25, 50)
    n_bins: int = 5
    hold_periods: tuple[int, ...] = (1, 5, 10, 50)
    include_hold_epochs: bool = True


@dataclass(frozen=True)
class Prop1Config:
    C: int = 6
    draws: int = 200_000
    cov_draws: int = 1_000_000
    trials: int = 5
    z_tol: float = 4.0
    frob_tol: float = 0.05


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "main"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    methods: tuple[str, ...] = ()
    workers: int = 1
    output_root: str = ""
    plots: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    ood: OODConfig = field(default_factory=OODConfig)
    prop1: Prop1Config = field(default_factory=Prop1Config)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if not self.methods:
            object.__setattr__(self, "methods", DEFAULT_METHODS[self.kind])
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}")
        if self.kind == "main" and not set(self.methods) <= MAIN_METHODS:
            raise ConfigurationError(f"main comparison accepts only {sorted(MAIN_METHODS)}")
        if self.kind == "sweep":
            if not self.sweep.K_values:
                raise ConfigurationError("sweep needs at least one K value")
            if not set(self.methods) <= COUNT_METHODS:
                raise ConfigurationError(f"sweep needs counts-capable methods {sorted(COUNT_METHODS)}")
            if "soft" not in self.methods or not set(self.methods) & set(HARD_METHODS):
                raise ConfigurationError("sweep compares soft against at least one hard method")
        if self.kind == "geometry" and len(self.methods) < 2:
            raise ConfigurationError("geometry needs two methods for barriers and CKA")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")

    def output_dir(self, root: str | os.PathLike | None = None) -> Path:
        base = root or os.environ.get(OUTPUT_ROOT_ENV) or self.output_root or "results"
        return Path(base) / self.kind


SECTIONS = {
    "data": DataConfig,
    "train": TrainConfig,
    "sweep": SweepConfig,
    "geometry": GeometryConfig,
    "ood": OODConfig,
    "prop1": Prop1Config,
}
# keys of TrainConfig that the [delivery] section owns
DELIVERY_KEYS = ("method", "hold_period", "smoothing_alpha", "mixup_alpha")


def _coerce(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigurationError(f"bad value {raw!r} for {name}") from None


def _build(cls, values: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigurationError(f"unknown key {section}.{key}")
        kwargs[key] = _coerce(raw, getattr(defaults, key), f"{section}.{key}")
    return cls(**kwargs)


def parse_overrides(pairs) -> dict[tuple[str, str], str]:
    out = {}
    for item in pairs or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        out[(section, key)] = value
    return out


def load_config(path=None, overrides=None, kind: str | None = None) -> ExperimentConfig:
    """Read an INI config, apply ``section.key=value`` overrides, then ``kind``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case ("C")
    if path is not None:
        if not parser.read(path):
            raise ConfigurationError(f"cannot read config file {path}")
    for (section, key), value in parse_overrides(overrides).items():
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)
    if kind is not None:
        if not parser.has_section("experiment"):
            parser.add_section("experiment")
        parser.set("experiment", "kind", kind)

    unknown = set(parser.sections()) - set(SECTIONS) - {"experiment", "delivery"}
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    sub = {}
    for name, cls in SECTIONS.items():
        values = dict(parser.items(name)) if parser.has_section(name) else {}
        if name == "train" and parser.has_section("delivery"):
            for key, raw in parser.items("delivery"):
                if key not in DELIVERY_KEYS:
                    raise ConfigurationError(f"unknown key delivery.{key}")
                values[key] = raw
        sub[name] = _build(cls, values, name)
    exp_values = dict(parser.items("experiment")) if parser.has_section("experiment") else {}
    exp_fields = {f.name for f in fields(ExperimentConfig)} - set(SECTIONS)
    for key in exp_values:
        if key not in exp_fields:
            raise ConfigurationError(f"unknown key experiment.{key}")
    proto = {"kind": "main", "seeds": (0,), "methods": ("",), "workers": 1, "output_root": "", "plots": False}
    kwargs = {k: _coerce(v, proto[k], f"experiment.{k}") for k, v in exp_values.items()}
    return ExperimentConfig(**kwargs, **sub)


def config_text(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` back to INI text (every key, defaults included)."""

    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)

    lines = ["[experiment]"]
    for key in ("kind", "seeds", "methods", "workers", "output_root", "plots"):
        lines.append(f"{key} = {fmt(getattr(cfg, key))}")
    for name in SECTIONS:
        obj = getattr(cfg, name)
        lines.append("")
        lines.append(f"[{name}]")
        for f in fields(obj):
            if name == "train" and f.name in DELIVERY_KEYS:
                continue
            lines.append(f"{f.name} = {fmt(getattr(obj, f.name))}")
    lines.append("")
    lines.append("[delivery]")
    for key in DELIVERY_KEYS:
        lines.append(f"{key} = {fmt(getattr(cfg.train, key))}")
    return "\n".join(lines) + "\n"
