"""Pipeline configuration: flat ``key = value`` INI text, one section per stage.

Every section maps onto a dataclass whose defaults are the module defaults,
so an empty config file reproduces the library behaviour.  Unknown sections
and keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError
from .ingest import Padding, TraceFormat
from .svdd import TrainConfig
from .synth import CorpusConfig

THREADS_ENV = "LIGHT_HIDS_THREADS"


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus: str = ""  # existing corpus directory with manifest.tsv; empty -> synthesize
    trace_format: TraceFormat = TraceFormat.PLAIN_NAMES
    quantize: bool = True
    threads: int = 1


@dataclass
class IngestSection:
    window: int = 64
    train_stride: int = 64
    detect_stride: int = 16
    padding: Padding = Padding.DROP_TAIL
    train_frac: float = 0.7
    val_frac: float = 0.15


@dataclass
class ModelSection:
    embed_dim: int = 32
    channels: tuple[int, ...] = (32, 64, 64)
    kernel_width: int = 3
    pools: tuple[int, ...] = (2, 2, 2)
    feature_dim: int = 16


@dataclass
class ForestSection:
    trees: int = 100
    psi: int = 256


@dataclass
class CalibrateSection:
    k: float = 2.0


@dataclass
class BenchSection:
    repetitions: int = 5
    windows: int = 200


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    synth: CorpusConfig = field(default_factory=CorpusConfig)
    ingest: IngestSection = field(default_factory=IngestSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    forest: ForestSection = field(default_factory=ForestSection)
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    bench: BenchSection = field(default_factory=BenchSection)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    def workers(self) -> int:
        """Worker cap for parallel stages; the environment variable wins."""
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                return max(1, int(env))
            except ValueError as exc:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
        return max(1, self.run.threads)

    def with_seed(self, seed: int) -> "PipelineConfig":
        cfg = dataclasses.replace(self)
        cfg.run = dataclasses.replace(self.run, seed=seed)
        cfg.synth = dataclasses.replace(self.synth, seed=seed)
        cfg.train = dataclasses.replace(self.train, seed=seed)
        return cfg

    def validate(self):
        ing = self.ingest
        if not (ing.train_frac > 0 and ing.val_frac > 0 and ing.train_frac + ing.val_frac < 1):
            raise ConfigError(
                f"split_dataset: train_frac={ing.train_frac} and val_frac={ing.val_frac} "
                "must be positive with train_frac + val_frac < 1"
            )
        if ing.window < 1 or ing.train_stride < 1 or ing.detect_stride < 1:
            raise ConfigError("ingest: window and strides must be >= 1")
        if len(self.model.channels) != len(self.model.pools):
            raise ConfigError("model: channels and pools must have the same number of entries")
        pool_product = 1
        for p in self.model.pools:
            pool_product *= p
        if ing.window % pool_product:
            raise ConfigError(f"model: pools multiply to {pool_product}, which does not divide window {ing.window}")
        if self.forest.trees < 1 or self.forest.psi < 2:
            raise ConfigError("forest: need trees >= 1 and psi >= 2")
        if self.bench.repetitions < 1 or self.bench.windows < 1:
            raise ConfigError("bench: repetitions and windows must be >= 1")


SECTIONS = {f.name: f for f in dataclasses.fields(PipelineConfig)}

# train.seed and synth.seed follow run.seed unless set explicitly
_SEED_FOLLOWERS = ("synth", "train")


def _coerce(section: str, key: str, raw: str, typ):
    text = raw.strip()
    try:
        if typ is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if isinstance(typ, type) and issubclass(typ, enum.Enum):
            return typ(text)
        if getattr(typ, "__origin__", None) is tuple:
            return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc
    raise ConfigError(f"[{section}] {key}: unsupported type {typ}")


def _format(value) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from exc
    cfg = PipelineConfig()
    explicit_seed = set()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; expected one of {sorted(SECTIONS)}")
        target = getattr(cfg, section)
        hints = get_type_hints(type(target))
        values = {}
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of {sorted(hints)}")
            values[key] = _coerce(section, key, raw, hints[key])
        if "seed" in values:
            explicit_seed.add(section)
        try:
            setattr(cfg, section, dataclasses.replace(target, **values))
        except Exception as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    for section in _SEED_FOLLOWERS:
        if section not in explicit_seed:
            setattr(cfg, section, dataclasses.replace(getattr(cfg, section), seed=cfg.run.seed))
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
        cfg.validate()
        return cfg
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)
