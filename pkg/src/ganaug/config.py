"""Run configuration: TOML sections mapped strictly onto dataclasses."""

from __future__ import annotations

import dataclasses
import enum
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from ganaug.data import PhantomConfig, StrategyId
from ganaug.errors import ConfigError, GanAugError
from ganaug.evaluation import ClassifierConfig, ExperimentMatrixConfig
from ganaug.gan import GanTrainConfig
from ganaug.models import DiscriminatorSpec, GeneratorSpec


@dataclass(frozen=True)
class ModelsConfig:
    g_base_channels: int = 0  # 0 -> 1024 * S / 128
    d_base_channels: int = 0
    g_kernel_size: int = 4
    d_kernel_size: int = 5


@dataclass(frozen=True)
class MatrixConfig:
    k_values: tuple[int, ...] = (100, 250, 500, 750, 1000, 1300)
    imbalance_ratio: int = 10
    synthetic_multiplier: float = 1.5
    strategies: tuple[str, ...] = ("ORG", "AugORG", "GAN", "AugGAN")
    repetitions: int = 3
    split_fractions: tuple[float, float, float] = (0.60, 0.066, 0.334)
    master_seed: int = 0

    def __post_init__(self):
        valid = {s.value for s in StrategyId}
        bad = [s for s in self.strategies if s not in valid]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; choose from {sorted(valid)}")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = ""  # empty -> generate phantom data from [phantom]
    out_dir: str = "out"
    generator_checkpoint: str = ""


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    matrix: MatrixConfig = field(default_factory=MatrixConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def generator_spec(self, image_size: int) -> GeneratorSpec:
        return GeneratorSpec(
            image_size=image_size,
            latent_dim=self.gan.latent.dim,
            base_channels=self.models.g_base_channels,
            kernel_size=self.models.g_kernel_size,
        )

    def discriminator_spec(self, image_size: int) -> DiscriminatorSpec:
        return DiscriminatorSpec(
            image_size=image_size,
            base_channels=self.models.d_base_channels,
            kernel_size=self.models.d_kernel_size,
        )

    def experiment(self) -> ExperimentMatrixConfig:
        m = self.matrix
        return ExperimentMatrixConfig(
            k_values=m.k_values,
            imbalance_ratio=m.imbalance_ratio,
            synthetic_multiplier=m.synthetic_multiplier,
            strategies=tuple(StrategyId(s) for s in m.strategies),
            repetitions=m.repetitions,
            split_fractions=m.split_fractions,
            master_seed=m.master_seed,
            classifier=self.classifier,
            gan=self.gan,
            g_base_channels=self.models.g_base_channels,
            d_base_channels=self.models.d_base_channels,
            g_kernel_size=self.models.g_kernel_size,
            d_kernel_size=self.models.d_kernel_size,
        )


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return from_mapping(hint, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected an array")
        args = typing.get_args(hint)
        item = args[0] if args else typing.Any
        return tuple(_coerce(v, item, f"{where}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def from_mapping(cls, mapping: dict, where: str = ""):
    """Build dataclass ``cls`` from a nested dict, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where or 'root'}]: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in mapping.items()}
    try:
        return cls(**kwargs)
    except GanAugError as exc:
        raise ConfigError(f"[{where or 'root'}] {exc}") from exc


def to_mapping(obj) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, enum.Enum):
            return v.value
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    return conv(obj)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config not found: {p}")
    try:
        raw = tomli.loads(p.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return from_mapping(RunConfig, raw)


def override(cfg, section: str, **values):
    """Return ``cfg`` with non-None ``values`` replaced in ``section``."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    merged = {**to_mapping(getattr(cfg, section)), **to_mapping(values)}
    hint = typing.get_type_hints(RunConfig)[section]
    return dataclasses.replace(cfg, **{section: from_mapping(hint, merged, section)})


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_bytes(tomli_w.dumps(to_mapping(cfg)).encode("utf-8"))
