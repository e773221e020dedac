"""
Typed run configuration.

One YAML file holds optional ``simulate``, ``solver``, ``model`` and ``train``
sections plus top-level ``seed`` and ``data_dir``. Command-line flags are
merged on top with ``apply_overrides``; a flag left at ``None`` keeps the file
value.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .errors import ConfigError

log = logging.getLogger(__name__)

DEFAULT_SEED = 42

FFN_VARIANTS = ("full", "none", "no-dw", "pw-only")
DENOISERS = ("soft", "tv", "cmformer")
PRECISIONS = ("float32", "float64")

# stages -> (cdpr, bdpr): drop-path rates of encoder/decoder and bottleneck blocks
DROP_PATH_TABLE = {
    1: (0.0, 0.0),
    2: (0.1, 0.1),
    3: (0.1, 0.2),
    5: (0.1, 0.2),
    9: (0.0, 0.3),
    13: (0.1, 0.2),
}


class FrameworkKind(str, Enum):
    HQS = "hqs"
    ADMM = "admm"
    R2ADMM = "r2admm"
    GAP = "gap"
    PLAIN = "plain"

    @classmethod
    def parse(cls, value: Union[str, "FrameworkKind"]) -> "FrameworkKind":
        try:
            return cls(value.lower() if isinstance(value, str) else value)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown framework {value!r}; valid: {valid}") from None


def drop_path_rates(stages: int) -> tuple[float, float]:
    """(cdpr, bdpr) for a stage count; unlisted counts use the nearest lower row."""
    listed = [k for k in sorted(DROP_PATH_TABLE) if k <= max(stages, 1)]
    return DROP_PATH_TABLE[listed[-1]]


@dataclass
class SimulateConfig:
    noise_bits: Optional[int] = None
    gaussian_sigma: float = 0.0

    def validate(self) -> None:
        if self.noise_bits is not None and self.noise_bits < 1:
            raise ConfigError(f"noise_bits must be >= 1, got {self.noise_bits}")
        if self.gaussian_sigma < 0:
            raise ConfigError(f"gaussian_sigma must be >= 0, got {self.gaussian_sigma}")


@dataclass
class SolverConfig:
    framework: str = "r2admm"
    stages: int = 1
    denoiser: str = "cmformer"
    learn_alpha: bool = True
    learn_beta: bool = True
    learn_gamma: bool = True
    # fixed per-stage values; override the learned/estimated ones when set
    alpha: Optional[float] = None
    beta: Optional[float] = None
    gamma: Optional[float] = None
    # classical solver constants
    tau: float = 1.0
    lam: float = 0.01
    tv_iters: int = 20
    checkpoint: Optional[str] = None

    def validate(self) -> None:
        FrameworkKind.parse(self.framework)
        if self.stages < 0:
            raise ConfigError(f"stages must be >= 0, got {self.stages}")
        if self.denoiser not in DENOISERS:
            raise ConfigError(f"unknown denoiser {self.denoiser!r}; valid: {', '.join(DENOISERS)}")
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{name} must be > 0, got {value}")
        if self.tau <= 0 or self.lam < 0:
            raise ConfigError(f"need tau > 0 and lam >= 0, got tau={self.tau}, lam={self.lam}")
        if self.tv_iters < 1:
            raise ConfigError(f"tv_iters must be >= 1, got {self.tv_iters}")


@dataclass
class CMFormerConfig:
    channels: int = 28
    blocks: tuple = (1, 1, 3)
    kernel_size: int = 7
    # 4 puts the 1-stage, 28-channel network at ~0.745M parameters
    ffn_expansion: int = 4
    ffn_variant: str = "full"
    use_cmb: bool = True
    # false keeps only the embed/down/up/fuse/head skeleton; blocks is ignored
    use_cab: bool = True
    cdpr: float = 0.0
    bdpr: float = 0.0

    def __post_init__(self):
        self.blocks = tuple(self.blocks)

    def validate(self) -> None:
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if len(self.blocks) != 3 or any(b < 1 for b in self.blocks):
            raise ConfigError(f"blocks must be three counts >= 1, got {list(self.blocks)}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.ffn_expansion < 1:
            raise ConfigError(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")
        if self.ffn_variant not in FFN_VARIANTS:
            raise ConfigError(
                f"unknown ffn variant {self.ffn_variant!r}; valid: {', '.join(FFN_VARIANTS)}"
            )
        for name in ("cdpr", "bdpr"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must satisfy 0 <= rate < 1, got {rate}")


@dataclass
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    steps_per_epoch: int = 50
    batch_size: int = 1
    crop: int = 32
    precision: str = "float32"
    # None selects the stage-count row of DROP_PATH_TABLE
    drop_path: Optional[tuple] = None
    augment: bool = True

    def __post_init__(self):
        if self.drop_path is not None:
            self.drop_path = tuple(self.drop_path)

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must satisfy 0 <= value < 1, got {value}")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("need epochs >= 0, steps_per_epoch >= 1 and batch_size >= 1")
        if self.crop < 4 or self.crop % 4:
            raise ConfigError(f"crop must be a positive multiple of 4, got {self.crop}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.drop_path is not None and len(self.drop_path) != 2:
            raise ConfigError(f"drop_path must be a (cdpr, bdpr) pair, got {self.drop_path}")


@dataclass
class RunConfig:
    seed: int = DEFAULT_SEED
    data_dir: Optional[str] = None
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    model: CMFormerConfig = field(default_factory=CMFormerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        for section in (self.simulate, self.solver, self.model, self.train):
            section.validate()
        return self

    def to_dict(self) -> dict:
        def plain(value):
            if isinstance(value, tuple):
                return [plain(v) for v in value]
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            return value

        return plain(dataclasses.asdict(self))


_SECTIONS = {
    "simulate": SimulateConfig,
    "solver": SolverConfig,
    "model": CMFormerConfig,
    "train": TrainConfig,
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    valid = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(values) - set(valid))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; valid keys: {', '.join(valid)}")
    return cls(**values)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    sections = {name: _build(cls, raw.pop(name, None) or {}, name) for name, cls in _SECTIONS.items()}
    top = _build(RunConfig, raw, "config")
    return dataclasses.replace(top, **sections).validate()


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Read a YAML run config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    log.debug("loaded config %s", path)
    return config_from_dict(raw)


def apply_overrides(config: RunConfig, section: Optional[str] = None, **flags: Any) -> RunConfig:
    """Return ``config`` with every non-None flag applied (flags win over the file)."""
    given = {k: v for k, v in flags.items() if v is not None}
    if not given:
        return config
    if section is None:
        updated = dataclasses.replace(config, **given)
    else:
        target = getattr(config, section)
        updated = dataclasses.replace(config, **{section: _build(type(target), {
            **dataclasses.asdict(target), **given}, section)})
    return updated.validate()


def dump_config(config: RunConfig, path: Union[str, Path]) -> Path:
    """Write the resolved config next to an artifact."""
    path = Path(path)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path


def config_echo_path(artifact: Union[str, Path]) -> Path:
    """``best.hsc`` -> ``best.hsc.yaml``."""
    artifact = Path(artifact)
    return artifact.with_name(artifact.name + ".yaml")
