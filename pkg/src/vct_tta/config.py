"""Run configuration: a sectioned INI file layered over typed defaults.

Precedence is command-line override, then file, then default.  Unknown
sections or keys are rejected so that a typo never silently falls back to a
default.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .loss import LossConfig
from .stream import CORRUPTION_KINDS, PROTOCOLS, Corruption, DatasetSpec
from .train import TrainConfig
from .vct import DEFAULT_ETA_L, DEFAULT_ETA_S, AdaptMode
from .vit import ViTConfig

OUTPUT_ROOT_ENV = "VCT_TTA_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
# The training shuffle seed always follows the master seed ``run.seed``.
HIDDEN_KEYS = {("train", "seed")}


class RunConfigError(ValueError):
    """Bad configuration file, key or value."""


@dataclass(frozen=True)
class StreamSettings:
    """Test stream: comma-separated ``kind:severity`` entries, one domain each."""

    corruptions: str = "gaussian_noise:4"
    protocol: str = "normal"
    batch_size: int = 64
    num_batches: int = 50

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise RunConfigError(f"stream.protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.batch_size <= 0:
            raise RunConfigError("stream.batch_size must be positive")
        if self.num_batches < 0:
            raise RunConfigError("stream.num_batches must be >= 0 (0 means the whole test split)")
        parse_corruptions(self.corruptions, 0)

    def corruption_list(self, seed: int) -> list[Corruption]:
        return parse_corruptions(self.corruptions, seed)


@dataclass(frozen=True)
class AdaptSettings:
    mode: str = AdaptMode.FULL.value
    eta_l: float = DEFAULT_ETA_L
    eta_s: float = DEFAULT_ETA_S

    def __post_init__(self):
        try:
            AdaptMode(self.mode)
        except ValueError:
            raise RunConfigError(
                f"adapt.mode must be one of {[m.value for m in AdaptMode]}, got {self.mode!r}") from None
        if self.eta_l < 0 or self.eta_s < 0:
            raise RunConfigError("adapt.eta_l and adapt.eta_s must be >= 0")


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    out_dir: str = ""
    checkpoint: str = ""


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stream: StreamSettings = field(default_factory=StreamSettings)
    adapt: AdaptSettings = field(default_factory=AdaptSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def __post_init__(self):
        if self.data.num_classes != self.model.num_classes:
            raise RunConfigError(
                f"data.num_classes={self.data.num_classes} differs from model.num_classes={self.model.num_classes}")
        if (self.data.image_size, self.data.channels) != (self.model.image_size, self.model.channels):
            raise RunConfigError("data.image_size/channels must match model.image_size/channels")

    @property
    def mode(self) -> AdaptMode:
        return AdaptMode(self.adapt.mode)

    def output_dir(self) -> Path:
        if self.run.out_dir:
            return Path(self.run.out_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / f"seed{self.run.seed}"

    def with_overrides(self, overrides: Mapping[str, Any]) -> RunConfig:
        """Apply ``{"section.key": value}`` overrides; values may be strings."""
        return _build(self, _nest(overrides))


def parse_corruptions(text: str, seed: int) -> list[Corruption]:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        kind, _, sev = item.partition(":")
        if kind not in CORRUPTION_KINDS:
            raise RunConfigError(f"stream.corruptions: unknown kind {kind!r}; expected one of {CORRUPTION_KINDS}")
        try:
            severity = int(sev) if sev else 0
        except ValueError:
            raise RunConfigError(f"stream.corruptions: bad severity in {item!r}") from None
        if not 0 <= severity <= 5:
            raise RunConfigError(f"stream.corruptions: severity {severity} outside 0..5 in {item!r}")
        out.append(Corruption(kind, severity, seed))
    if not out:
        raise RunConfigError("stream.corruptions is empty")
    return out


def domain_name(c: Corruption) -> str:
    return f"{c.kind}-{c.severity}"


_SECTIONS = [f.name for f in fields(RunConfig)]


def _coerce(section: str, f: dataclasses.Field, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float | None"):
            return None if raw.strip().lower() in ("", "none") else float(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise RunConfigError(f"{section}.{f.name}: cannot parse {raw!r} as {kind}") from None
    return raw


def _nest(flat: Mapping[str, Any]) -> dict[str, dict[str, Any]]:
    nested: dict[str, dict[str, Any]] = {}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if not name:
            raise RunConfigError(f"override {key!r} must look like section.key")
        nested.setdefault(section, {})[name] = value
    return nested


def _build(base: RunConfig, nested: Mapping[str, Mapping[str, Any]]) -> RunConfig:
    parts = {}
    for section, values in nested.items():
        if section not in _SECTIONS:
            raise RunConfigError(f"unknown config section [{section}]; expected one of {_SECTIONS}")
        current = getattr(base, section)
        known = {f.name: f for f in fields(current)}
        updates = {}
        for key, raw in values.items():
            if (section, key) in HIDDEN_KEYS:
                raise RunConfigError(f"{section}.{key} is derived from run.seed; set run.seed instead")
            if key not in known:
                raise RunConfigError(f"unknown key {key!r} in [{section}]; expected one of {sorted(known)}")
            updates[key] = _coerce(section, known[key], raw)
        try:
            parts[section] = replace(current, **updates)
        except RunConfigError:
            raise
        except ValueError as exc:
            raise RunConfigError(f"[{section}] {exc}") from exc
    return replace(base, **parts)


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise RunConfigError(f"config file {path} not found") from None
        except configparser.Error as exc:
            raise RunConfigError(f"config file {path}: {exc}") from exc
        cfg = _build(cfg, {s: dict(parser.items(s)) for s in parser.sections()})
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def config_text(cfg: RunConfig) -> str:
    """INI text that ``load_config`` reads back to an equal ``RunConfig``."""
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        part = getattr(cfg, section)
        for f in fields(part):
            if (section, f.name) in HIDDEN_KEYS:
                continue
            value = getattr(part, f.name)
            lines.append(f"{f.name} = {'none' if value is None else value}")
        lines.append("")
    return "\n".join(lines)
