"""Configuration dataclasses, model presets, and run-config resolution.

Resolution order is built-in defaults, then a JSON config file, then command-line flags. Nested objects merge key by
key, so a config file may override a single field of a nested section.
"""

import copy
import dataclasses
import json

from dataclasses import dataclass, field
from json.decoder import JSONDecodeError
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

from emib._base import ConfigError
from emib._types import JsonDict
from emib.geometry import PatchGrid

log = getLogger(__name__)

T = TypeVar("T")

MODES = ("emib", "ae", "mae", "mae-single")
INJECTION_SOURCES = ("full_face", "self", "none")
POOL_SOURCES = ("encoder", "decoder")
FEATURE_MODES = ("bottleneck", "prepool")


def _from_dict(cls: Type[T], data: Mapping[str, Any]) -> T:
    """Build dataclass ``cls`` from ``data``, recursing into nested dataclass fields."""
    names = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError("Unknown %s fields: %s" % (cls.__name__, ", ".join(sorted(unknown))))

    kwargs = dict()
    for name, value in data.items():
        default = names[name].default_factory if names[name].default_factory is not dataclasses.MISSING else None
        nested = default() if default is not None else None
        if dataclasses.is_dataclass(nested) and isinstance(value, Mapping):
            kwargs[name] = _from_dict(type(nested), value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError("Invalid %s: %s" % (cls.__name__, e)) from e


class _Serializable:
    """Mixin giving dataclasses JSON-friendly ``to_dict`` / ``from_dict``."""

    def to_dict(self) -> JsonDict:
        """Return a JSON-serializable dictionary."""
        return json.loads(json.dumps(dataclasses.asdict(self)))  # type: ignore[call-overload]

    @classmethod
    def from_dict(cls: Type[T], data: Mapping[str, Any]) -> T:
        """Build from a dictionary produced by ``to_dict``."""
        return _from_dict(cls, data)


@dataclass(frozen=True)
class EncoderConfig(_Serializable):
    """Transformer encoder shape."""

    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        """Validate."""
        if self.dim % self.heads:
            raise ConfigError("Encoder dim %s is not divisible by %s heads" % (self.dim, self.heads))


@dataclass(frozen=True)
class DecoderConfig(_Serializable):
    """Transformer decoder shape."""

    depth: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        """Validate."""
        if self.dim % self.heads:
            raise ConfigError("Decoder dim %s is not divisible by %s heads" % (self.dim, self.heads))


@dataclass(frozen=True)
class BottleneckConfig(_Serializable):
    """Injection bottleneck width."""

    z_dim: int = 16


@dataclass(frozen=True)
class ModelConfig(_Serializable):
    """Complete EM-IB model description."""

    image_size: int = 64
    patch_size: int = 8
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    eye_rows: int = 2
    eye_cols: int = 2
    weight_sharing: bool = True
    pool_source: str = "encoder"
    injection: str = "full_face"

    def __post_init__(self) -> None:
        """Validate cross-field invariants."""
        grid = self.grid
        if not 1 <= self.bottleneck.z_dim <= self.encoder.dim:
            raise ConfigError("z_dim must be in [1, %s], got %s" % (self.encoder.dim, self.bottleneck.z_dim))
        if self.eye_rows > grid.rows or self.eye_cols > grid.cols:
            raise ConfigError(
                "Eye window %sx%s exceeds the %sx%s grid" % (self.eye_rows, self.eye_cols, grid.rows, grid.cols)
            )
        if self.pool_source not in POOL_SOURCES:
            raise ConfigError("pool_source must be one of %s, got `%s`" % (POOL_SOURCES, self.pool_source))
        if self.injection not in INJECTION_SOURCES:
            raise ConfigError("injection must be one of %s, got `%s`" % (INJECTION_SOURCES, self.injection))
        if self.encoder.dim % 4 or self.decoder.dim % 4:
            raise ConfigError("Encoder and decoder widths must be divisible by 4 for sin-cos positions")

    @property
    def grid(self) -> PatchGrid:
        """Patch grid of the model input."""
        return PatchGrid(self.image_size, self.patch_size)

    def replace(self, **changes: Any) -> "ModelConfig":
        """Return a copy with ``changes`` applied."""
        return dataclasses.replace(self, **changes)


MODEL_PRESETS: Dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "vit-tiny": ModelConfig(
        image_size=224,
        patch_size=16,
        encoder=EncoderConfig(depth=12, dim=192, heads=3),
        decoder=DecoderConfig(depth=4, dim=192, heads=3),
        eye_rows=3,
        eye_cols=4,
    ),
    "vit-base": ModelConfig(
        image_size=224,
        patch_size=16,
        encoder=EncoderConfig(depth=12, dim=768, heads=12),
        decoder=DecoderConfig(depth=4, dim=768, heads=6),
        eye_rows=3,
        eye_cols=4,
    ),
}


def model_preset(name: str) -> ModelConfig:
    """Return a registered model preset."""
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        raise ConfigError("Unknown model preset `%s`; known: %s" % (name, ", ".join(sorted(MODEL_PRESETS))))


@dataclass(frozen=True)
class LossConfig(_Serializable):
    """Weights of the pretraining objective."""

    lambda_contr: float = 0.01
    error_mode: str = "squared"
    distill_weight_schedule: Tuple[float, float, int] = (1.0, 0.1, 1000)

    def __post_init__(self) -> None:
        """Validate."""
        if self.lambda_contr < 0:
            raise ConfigError("lambda_contr must be >= 0, got %s" % self.lambda_contr)
        if self.error_mode not in ("squared", "absolute"):
            raise ConfigError("error_mode must be `squared` or `absolute`, got `%s`" % self.error_mode)
        start, end, steps = self.distill_weight_schedule
        if not start >= end >= 0 or steps < 1:
            raise ConfigError(
                "Distillation schedule needs start >= end >= 0 and steps >= 1, got %s"
                % (self.distill_weight_schedule,)
            )


@dataclass(frozen=True)
class TrainConfig(_Serializable):
    """Pretraining loop settings."""

    steps: int = 200
    batch_size: int = 32
    lr: float = 1.5e-4
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    seed: int = 0
    mode: str = "emib"
    mask_ratio: float = 0.75
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 0
    checkpoint_every: int = 0
    tz_name: Optional[str] = None

    def __post_init__(self) -> None:
        """Validate."""
        if self.mode not in MODES:
            raise ConfigError("mode must be one of %s, got `%s`" % (MODES, self.mode))
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1)")

    @property
    def effective_mask_ratio(self) -> float:
        """Reconstruction mask ratio implied by the mode (autoencoder mode masks everything)."""
        return 1.0 if self.mode == "ae" else self.mask_ratio

    @property
    def injection_source(self) -> str:
        """Where the injection token comes from in this mode."""
        return {"emib": "full_face", "ae": "full_face", "mae": "none", "mae-single": "self"}[self.mode]

    def replace(self, **changes: Any) -> "TrainConfig":
        """Return a copy with ``changes`` applied."""
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class StudentConfig(_Serializable):
    """Residual convolutional student ending in a z_dim head."""

    widths: Tuple[int, ...] = (16, 32, 64)
    blocks: Tuple[int, ...] = (1, 1, 1)
    z_dim: int = 16

    def __post_init__(self) -> None:
        """Validate."""
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ConfigError("Student widths and blocks must be non-empty and of equal length")


@dataclass(frozen=True)
class EvalConfig(_Serializable):
    """Probe protocol settings."""

    shots: Optional[int] = None
    repeats: int = 1
    head_pose: bool = False
    feature: str = "bottleneck"
    ridge: float = 1e-3

    def __post_init__(self) -> None:
        """Validate."""
        if self.feature not in FEATURE_MODES:
            raise ConfigError("feature must be one of %s, got `%s`" % (FEATURE_MODES, self.feature))
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")


@dataclass(frozen=True)
class SynthConfig(_Serializable):
    """Dataset generation settings of a run.

    ``params`` holds overrides of the renderer parameters, ``emib.synth.SynthParams``.
    """

    count: int = 5000
    subjects: int = 10
    train_fraction: float = 0.8
    params: JsonDict = field(default_factory=dict)


@dataclass(frozen=True)
class RunConfig(_Serializable):
    """Everything one command needs, echoed as ``resolved_config.json``."""

    preset: str = "desk"
    model: JsonDict = field(default_factory=dict)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run_dir: str = "runs"
    seed: int = 0

    def model_config(self) -> ModelConfig:
        """Return the preset with ``model`` overrides merged in."""
        base = model_preset(self.preset).to_dict()
        return ModelConfig.from_dict(deep_merge(base, self.model))


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> JsonDict:
    """Return ``base`` with ``override`` merged in, recursing into nested mappings."""
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config_file(path: Optional[str]) -> JsonDict:
    """Return the JSON object in ``path``, or an empty dict when no path is given."""
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError("Cannot read config file `%s`: %s" % (path, e)) from e
    except JSONDecodeError as e:
        raise ConfigError("Config file `%s` is not valid JSON: %s" % (path, e)) from e
    if not isinstance(data, dict):
        raise ConfigError("Config file `%s` must hold a JSON object" % path)
    return data


def resolve_run_config(file_config: Mapping[str, Any], flag_overrides: Mapping[str, Any]) -> RunConfig:
    """Return the run config: defaults < ``file_config`` < ``flag_overrides``."""
    resolved = deep_merge(deep_merge(RunConfig().to_dict(), file_config), flag_overrides)
    log.debug("Resolved config: %s", resolved)
    return RunConfig.from_dict(resolved)
