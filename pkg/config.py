"""
Configuration management for the anticipation toolkit
Handles environment variables, run configuration dataclasses, named presets
and the flat key-value config file format
"""

import logging
import os
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import load_dotenv

from errors import ValidationError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent / "configs"


class LossMode(str, Enum):
    """Training setting: next-action loss only, or all three losses"""
    NAIVE = "naive"
    ANTICIPATIVE = "anticipative"


class BackboneMode(str, Enum):
    """Which per-frame encoder produces z_t"""
    AVT_TINY = "avt-tiny"
    AVT_B = "avt-b"
    FIXED_FEATURES = "fixed-features"

    @property
    def uses_frames(self) -> bool:
        return self is not BackboneMode.FIXED_FEATURES


class FeatLoss(str, Enum):
    """Future-feature regression objective"""
    L2 = "l2"
    NCE = "nce"


class RenderMode(str, Enum):
    """How the synthetic generator renders each timestep"""
    FEATURES = "features"
    FRAMES = "frames"


@dataclass
class BackboneConfig:
    """Per-frame ViT-style encoder dimensions"""
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    model_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValidationError(
                f"backbone.image_size ({self.image_size}) must be divisible by backbone.patch_size ({self.patch_size})"
            )
        if self.model_dim % self.num_heads:
            raise ValidationError(
                f"backbone.model_dim ({self.model_dim}) must be divisible by backbone.num_heads ({self.num_heads})"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def tokens_per_frame(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def frame_shape(self):
        return (self.image_size, self.image_size, self.channels)


@dataclass
class HeadConfig:
    """Causal decoder dimensions"""
    head_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    max_T: int = 32

    def __post_init__(self):
        if self.head_dim % self.num_heads:
            raise ValidationError(
                f"head.head_dim ({self.head_dim}) must be divisible by head.num_heads ({self.num_heads})"
            )
        if self.max_T < 1:
            raise ValidationError("head.max_T must be at least 1")


@dataclass
class DataConfig:
    """Clip sampling window; stride 0 means 'same as tau_a'"""
    tau_o: int = 10
    tau_a: int = 1
    stride: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if self.tau_o <= 0 or self.tau_a <= 0:
            raise ValidationError("data.tau_o and data.tau_a must be positive")
        if self.stride < 0:
            raise ValidationError("data.stride must be non-negative")
        if self.tau_o % self.effective_stride:
            raise ValidationError(
                f"data.tau_o ({self.tau_o}) must be a multiple of the stride ({self.effective_stride})"
            )
        if self.batch_size < 1:
            raise ValidationError("data.batch_size must be at least 1")

    @property
    def effective_stride(self) -> int:
        return self.stride or self.tau_a

    @property
    def num_frames(self) -> int:
        return self.tau_o // self.effective_stride


@dataclass
class LossConfig:
    """Which loss terms contribute to the total and with what weight"""
    mode: LossMode = LossMode.ANTICIPATIVE
    cls_weight: float = 1.0
    feat_weight: float = 1.0
    feat_loss: FeatLoss = FeatLoss.L2
    nce_temperature: float = 0.1

    def __post_init__(self):
        if self.cls_weight < 0 or self.feat_weight < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.nce_temperature <= 0:
            raise ValidationError("loss.nce_temperature must be positive")


@dataclass
class OptimConfig:
    """SGD + momentum with warmup and cosine decay"""
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-6
    epochs: int = 30
    warmup: int = 12

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("optim.epochs must be at least 1")
        if not 0 <= self.warmup <= self.epochs:
            raise ValidationError("optim.warmup must lie in [0, optim.epochs]")


@dataclass
class SchemaConfig:
    """Parameters of the synthetic action-schema generator"""
    num_actions: int = 8
    num_verbs: int = 4
    order: int = 2
    feature_dim: int = 16
    sigma: float = 0.3
    duration_p: float = 0.5
    min_duration: int = 1
    max_duration: int = 4
    concentration: float = 0.3
    deterministic: bool = False
    gap_prob: float = 0.0
    n_videos: int = 100
    video_len: int = 60
    val_fraction: float = 0.2
    render: RenderMode = RenderMode.FEATURES


@dataclass
class RunConfig:
    """Everything a command needs to reproduce a run"""
    dataset: str = ""
    output_dir: str = ""
    seed: int = 0
    backbone_mode: BackboneMode = BackboneMode.AVT_TINY
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schema: SchemaConfig = field(default_factory=SchemaConfig)

    def to_dict(self) -> Dict[str, Any]:
        """Flatten to dotted keys with JSON/text friendly values"""
        flat: Dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if is_dataclass(value):
                for key, inner in asdict(value).items():
                    flat[f"{f.name}.{key}"] = _plain(inner)
            else:
                flat[f.name] = _plain(value)
        return flat

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """
        Build from dotted keys, coercing string values to field types

        Raises:
            ValidationError: Unknown key, empty value or uncoercible value (the message names the key)
        """
        hints = typing.get_type_hints(cls)
        top: Dict[str, Any] = {}
        sections: Dict[str, Dict[str, Any]] = {}
        for key, raw in data.items():
            section, _, name = key.partition(".")
            if name:
                section_type = hints.get(section)
                if section_type is None or not is_dataclass(section_type):
                    raise ValidationError(f"unknown config key: {key}")
                section_hints = typing.get_type_hints(section_type)
                if name not in section_hints:
                    raise ValidationError(f"unknown config key: {key}")
                sections.setdefault(section, {})[name] = _coerce(key, raw, section_hints[name])
            else:
                if key not in hints or is_dataclass(hints[key]):
                    raise ValidationError(f"unknown config key: {key}")
                top[key] = _coerce(key, raw, hints[key])

        for section, values in sections.items():
            top[section] = hints[section](**values)
        return cls(**top)

    def merged(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """New config with overrides applied on top of this one"""
        flat = self.to_dict()
        flat.update(overrides)
        return RunConfig.from_dict(flat)

    def to_text(self) -> str:
        """Render as a config file that from_text reproduces exactly"""
        lines = ["# resolved run configuration"]
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _plain(value: Any) -> Any:
    return value.value if isinstance(value, Enum) else value


_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _coerce(key: str, raw: Any, target: type) -> Any:
    """Convert a raw config value to the declared field type"""
    if isinstance(raw, str):
        raw = raw.strip()
        if raw == "" and target is not str:
            raise ValidationError(f"missing value for config field: {key}")
    try:
        if isinstance(target, type) and issubclass(target, Enum):
            return target(raw.value if isinstance(raw, Enum) else raw)
        if target is bool:
            if isinstance(raw, bool):
                return raw
            lowered = str(raw).lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"not an integer: {raw!r}")
            return int(raw)
        if target is float:
            return float(raw)
        if target is str:
            return "" if raw is None else str(raw)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"invalid value for config field {key}: {e}") from e
    raise ValidationError(f"unsupported type for config field {key}")


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """
    Parse the flat key-value grammar

    Grammar: one `key = value` per line; `#` starts a comment; blank lines
    are ignored; later duplicates override earlier ones.

    Args:
        text: File contents
        source: Name used in error messages

    Returns:
        Ordered mapping of key to raw string value
    """
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise ValidationError(f"{source}:{number}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def load_preset(name: str) -> Dict[str, str]:
    """Raw values of a named preset in configs/"""
    path = PRESET_DIR / f"{name}.cfg"
    if not path.exists():
        available = ", ".join(sorted(p.stem for p in PRESET_DIR.glob("*.cfg")))
        raise ValidationError(f"unknown preset {name!r}; available presets: {available}")
    return load_config_file(path)


def resolve_config(preset: Optional[str] = None, config_path: Optional[Union[str, Path]] = None,
                   overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Layer preset, config file and overrides (later layers win)

    Args:
        preset: Name of a file in configs/ (without .cfg)
        config_path: User config file
        overrides: Values from command-line flags

    Returns:
        Validated RunConfig
    """
    flat: Dict[str, Any] = {}
    if preset:
        flat.update(load_preset(preset))
    if config_path:
        flat.update(load_config_file(config_path))
    if overrides:
        flat.update({k: v for k, v in overrides.items() if v is not None})
    config = RunConfig().merged(flat)
    logger.debug(f"Resolved configuration with {len(flat)} explicit keys")
    return config


@dataclass
class EnvConfig:
    """Environment configuration"""
    output_root: Path = Path("runs")
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "EnvConfig":
        """Create configuration from environment variables"""
        output_root = Path(os.getenv("AVT_OUTPUT_ROOT", "runs"))
        log_level = os.getenv("LOG_LEVEL", "INFO").upper()
        return cls(output_root=output_root, log_level=log_level)


# Global environment configuration
env_config = EnvConfig.from_env()


# Constants
IGNORE_LABEL = -1
LAYER_NORM_EPS = 1e-5
INIT_STD = 0.02
MASK_FILL_FLOAT32 = -1e9
CONFIG_SNAPSHOT_NAME = "config.txt"
