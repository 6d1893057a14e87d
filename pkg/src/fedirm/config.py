"""Experiment configuration: INI file with one section per concern, unknown keys rejected."""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .training import LocalConfig

MODES = ("fedirm", "fed_consistency", "fedavg_labeled_only", "fedavg_all_labeled")


@dataclass
class DataConfig:
    source: str = "blobs"  # "blobs" | "idx"
    n_classes: int = 5
    per_class: int = 286
    dim: int = 16
    spread: float = 2.0
    separation: float = 3.0
    images: str | None = None
    labels: str | None = None
    standardize: bool = False
    seed: int | None = None  # None: follow the experiment seed


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    dropout: float = 0.3


@dataclass
class ExperimentConfig:
    mode: str = "fedirm"
    seed: int = 0
    clients: int = 10
    labeled: int = 2
    unlabeled: int | None = None  # None: every non-labeled shard joins
    rounds: int = 100
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    local: LocalConfig = field(default_factory=lambda: LocalConfig(batch_size=0))

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    @property
    def effective_labeled(self) -> int:
        return self.clients if self.mode == "fedavg_all_labeled" else self.labeled

    @property
    def effective_unlabeled(self) -> int:
        if self.mode == "fedavg_all_labeled":
            return 0
        return self.clients - self.labeled if self.unlabeled is None else self.unlabeled

    def resolved(self) -> ExperimentConfig:
        """Copy with data-dependent defaults filled in, validated."""
        cfg = dataclasses.replace(
            self,
            data=dataclasses.replace(self.data),
            model=dataclasses.replace(self.model),
            local=dataclasses.replace(self.local),
        )
        if cfg.local.batch_size == 0:
            # 48 does not fit a 100-sample synthetic shard well; images keep 48.
            cfg.local.batch_size = 16 if cfg.data.source == "blobs" else 48
        if cfg.mode == "fedavg_all_labeled":
            cfg.labeled = cfg.clients
            cfg.unlabeled = 0
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"experiment.mode must be one of {MODES}, got {self.mode!r}")
        if not 1 <= self.labeled <= self.clients:
            raise ConfigError(f"need 1 <= labeled <= clients, got {self.labeled}/{self.clients}")
        if self.unlabeled is not None and not 0 <= self.unlabeled <= self.clients - self.labeled:
            raise ConfigError(f"unlabeled={self.unlabeled} does not fit {self.clients} clients")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.data.source not in ("blobs", "idx"):
            raise ConfigError(f"data.source must be blobs or idx, got {self.data.source!r}")
        if self.data.source == "idx" and not (self.data.images and self.data.labels):
            raise ConfigError("data.images and data.labels are required for idx data")
        if not 0.0 < self.model.dropout < 1.0:
            raise ConfigError("model.dropout must lie in (0, 1)")
        try:
            self.local.validate()
        except ValueError as exc:
            raise ConfigError(f"local: {exc}") from exc


_SECTIONS = {"experiment": None, "data": "data", "model": "model", "local": "local"}


def _convert(raw: str, type_name: str, key: str):
    raw = raw.strip()
    optional = "None" in type_name
    if optional and raw.lower() in ("", "none"):
        return None
    base = type_name.replace("| None", "").strip()
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            # allow ln2-style constants commonly used for the entropy threshold
            return math.log(2.0) if raw.lower() in ("ln2", "log2") else float(raw)
        if base == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if base == "str":
            return raw
        if base.startswith("tuple"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base}") from None
    raise ConfigError(f"{key}: unsupported field type {type_name}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _target(cfg: ExperimentConfig, section: str):
    attr = _SECTIONS[section]
    return cfg if attr is None else getattr(cfg, attr)


def _scalar_fields(obj) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(obj) if f.name not in ("data", "model", "local")}


def config_from_text(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        target = _target(cfg, section)
        fields = _scalar_fields(target)
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            setattr(target, key, _convert(raw, str(fields[key].type), f"{section}.{key}"))
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return config_from_text(path.read_text(), str(path))


def config_to_text(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in _SECTIONS:
        target = _target(cfg, section)
        parser[section] = {name: _format(getattr(target, name)) for name in _scalar_fields(target)}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)
