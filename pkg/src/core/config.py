"""
Configuration for the S2AP pipeline.

Two layers: process settings read from the environment (`Settings`) and the
pipeline configuration tree loaded from the JSON file given with --config
(`PipelineConfig`).
"""

import json
import logging
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

# Import dotenv if available, but don't require it
try:
    from dotenv import load_dotenv

    # Load .env file if it exists
    load_dotenv()
except ImportError:
    # We'll just rely on OS environment variables being set manually
    pass

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.core.utils import InvalidInputError

logger = logging.getLogger(__name__)

# Version
VERSION = "0.1.0"

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings(BaseSettings):
    """Process-level settings, read from S2AP_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="S2AP_", env_file=".env", case_sensitive=True, extra="ignore")

    # Logging
    LOG_LEVEL: str = "INFO"

    # Thread pool size for scene- and row-parallel work
    WORKERS: int = 1

    # Default report directory
    OUTPUT_DIR: str = "out"

    # Version
    VERSION: str = VERSION

    @field_validator("LOG_LEVEL")
    def validate_log_level(cls, v: str) -> str:
        """Validate the log level name."""
        v = v.upper()
        if v not in LOG_LEVELS:
            raise ValueError(f"LOG_LEVEL must be one of {LOG_LEVELS}")
        return v

    @field_validator("WORKERS")
    def validate_workers(cls, v: int) -> int:
        """Validate the worker count."""
        if v < 1:
            raise ValueError("WORKERS must be at least 1")
        return v


# Create global settings instance
settings = Settings()


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ScaleMapConfig(_Frozen):
    """Face-size to scale-bin mapping parameters."""

    s_max: float = 1024.0
    num_bins: int = 60
    bins_per_octave: int = 10
    base_exponent: int = 4
    top_exponent: int = 10
    anchor_log2: float = 6.5

    @model_validator(mode="after")
    def check_consistency(self) -> "ScaleMapConfig":
        if self.s_max <= 0:
            raise ValueError("s_max must be positive")
        if self.bins_per_octave < 1:
            raise ValueError("bins_per_octave must be at least 1")
        if self.num_bins != self.bins_per_octave * (self.top_exponent - self.base_exponent):
            raise ValueError("num_bins must equal bins_per_octave * (top_exponent - base_exponent)")
        if not 6.0 <= self.anchor_log2 <= 7.0:
            raise ValueError("anchor_log2 must lie in [6, 7]")
        return self

    @property
    def m(self) -> int:
        return self.num_bins


class LabelConfig(_Frozen):
    """Ground-truth attention map rendering parameters."""

    n_s: int = 8
    neighborhood: int = 4
    spread_base: float = 0.5

    @model_validator(mode="after")
    def check_values(self) -> "LabelConfig":
        if self.n_s < 1:
            raise ValueError("n_s must be at least 1")
        if self.neighborhood < 0:
            raise ValueError("neighborhood must be non-negative")
        if not 0.0 < self.spread_base < 1.0:
            raise ValueError("spread_base must lie in (0, 1)")
        return self


class ConvSpec(_Frozen):
    """A square 2D convolution layer."""

    c_in: int
    c_out: int
    kernel: int = 3
    stride: int = 1
    padding: int

    @model_validator(mode="before")
    @classmethod
    def default_padding(cls, data):
        if isinstance(data, dict) and data.get("padding") is None:
            data = {**data, "padding": int(data.get("kernel", 3)) // 2}
        return data

    @model_validator(mode="after")
    def check_shape(self) -> "ConvSpec":
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd number")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        return self

    @property
    def columns(self) -> int:
        """Width of the unrolled patch matrix, c_in * K^2."""
        return self.c_in * self.kernel * self.kernel

    def output_dims(self, height: int, width: int) -> Tuple[int, int]:
        """Output spatial dims for an input of the given size."""
        h_out = (height + 2 * self.padding - self.kernel) // self.stride + 1
        w_out = (width + 2 * self.padding - self.kernel) // self.stride + 1
        return h_out, w_out


class LayerSpec(_Frozen):
    conv: ConvSpec
    activation: Literal["relu", "none"] = "relu"


def _default_layers(m: int = 60) -> List[LayerSpec]:
    return [
        LayerSpec(conv=ConvSpec(c_in=3, c_out=8, kernel=3, stride=2), activation="relu"),
        LayerSpec(conv=ConvSpec(c_in=8, c_out=16, kernel=3, stride=2), activation="relu"),
        LayerSpec(conv=ConvSpec(c_in=16, c_out=m, kernel=3, stride=1), activation="none"),
    ]


class NetworkSpec(_Frozen):
    """Fixed-topology attention network producing m-channel logit maps."""

    layers: List[LayerSpec] = Field(default_factory=_default_layers)
    head_channels: int = 60

    @model_validator(mode="after")
    def check_topology(self) -> "NetworkSpec":
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.conv.c_out != nxt.conv.c_in:
                raise ValueError("consecutive layers must agree on channel counts")
        head = self.layers[-1]
        if head.conv.c_out != self.head_channels:
            raise ValueError("final layer must output head_channels maps")
        if head.activation != "none":
            raise ValueError("final layer must emit logits (no activation)")
        return self

    @property
    def n_s(self) -> int:
        """Total stride of the network."""
        return math.prod(layer.conv.stride for layer in self.layers)

    @classmethod
    def default(cls, m: int = 60) -> "NetworkSpec":
        return cls(layers=_default_layers(m), head_channels=m)


class TrainConfig(_Frozen):
    """Plain SGD settings for the attention network."""

    learning_rate: float = 1.0
    iterations: int = 2000
    seed: int = 0
    batch_size: int = 1
    decay_rate: float = 0.1
    decay_steps: Optional[int] = None
    progress: bool = False

    @model_validator(mode="after")
    def check_values(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.decay_steps is not None and self.decay_steps < 1:
            raise ValueError("decay_steps must be at least 1")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ValueError("decay_rate must lie in (0, 1]")
        return self


def _default_thresholds() -> List[float]:
    return [round(0.05 * i, 2) for i in range(1, 21)]


class DecodeParams(_Frozen):
    """Scale-spatial decoding parameters."""

    smooth_window: int = 3
    nms_radius: int = 4
    neighborhood: int = 4
    threshold: float = 0.5
    thresholds: List[float] = Field(default_factory=_default_thresholds)
    n_d: int = 16
    context_stride: int = 16

    @model_validator(mode="after")
    def check_values(self) -> "DecodeParams":
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError("smooth_window must be a positive odd number")
        if self.nms_radius < 0 or self.neighborhood < 0:
            raise ValueError("nms_radius and neighborhood must be non-negative")
        if self.n_d < 1 or self.context_stride < 0:
            raise ValueError("n_d must be positive and context_stride non-negative")
        if not self.thresholds:
            raise ValueError("thresholds must not be empty")
        return self

    def with_threshold(self, threshold: float) -> "DecodeParams":
        return self.model_copy(update={"threshold": threshold})


class SceneConfig(_Frozen):
    """Synthetic scene generation parameters."""

    count: int = 10
    dims: Tuple[int, int] = (256, 256)
    faces_per_scene: Tuple[int, int] = (1, 3)
    size_range: Tuple[float, float] = (32.0, 96.0)
    bin_separation: bool = True
    max_retries: int = 200

    @model_validator(mode="after")
    def check_ranges(self) -> "SceneConfig":
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if min(self.dims) < 1:
            raise ValueError("dims must be positive")
        lo, hi = self.faces_per_scene
        if lo < 0 or hi < lo:
            raise ValueError("faces_per_scene must be a non-negative (min, max) pair")
        s_lo, s_hi = self.size_range
        if s_lo <= 0 or s_hi < s_lo:
            raise ValueError("size_range must be a positive (min, max) pair")
        return self


def _default_detector() -> List[ConvSpec]:
    return [
        ConvSpec(c_in=3, c_out=16, kernel=3, stride=2),
        ConvSpec(c_in=16, c_out=32, kernel=3, stride=2),
        ConvSpec(c_in=32, c_out=64, kernel=3, stride=2),
        ConvSpec(c_in=64, c_out=64, kernel=3, stride=2),
    ]


class BenchConfig(_Frozen):
    """Benchmark harness parameters."""

    predictor: Literal["oracle", "toynet", "noise"] = "oracle"
    detector: List[ConvSpec] = Field(default_factory=_default_detector)
    recall_target: float = 0.98
    cost_mode: Literal["scale", "spatial", "both"] = "both"
    baseline_long_side: float = 1414.0
    baseline_levels: int = 6
    include_attention_cost: bool = False
    attention_input: int = 448

    @model_validator(mode="after")
    def check_values(self) -> "BenchConfig":
        if not self.detector:
            raise ValueError("detector spec must not be empty")
        if not 0.0 <= self.recall_target <= 1.0:
            raise ValueError("recall_target must lie in [0, 1]")
        if self.baseline_levels < 1:
            raise ValueError("baseline_levels must be at least 1")
        return self


class PipelineConfig(_Frozen):
    """Complete configuration tree, as stored in the --config JSON file."""

    scalemap: ScaleMapConfig = Field(default_factory=ScaleMapConfig)
    labels: LabelConfig = Field(default_factory=LabelConfig)
    decode: DecodeParams = Field(default_factory=DecodeParams)
    network: NetworkSpec = Field(default_factory=NetworkSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    scenes: SceneConfig = Field(default_factory=SceneConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    mean_shape: Optional[List[Tuple[float, float]]] = None

    @model_validator(mode="after")
    def check_cross_fields(self) -> "PipelineConfig":
        if self.network.head_channels != self.scalemap.num_bins:
            raise ValueError("network head_channels must equal scalemap num_bins")
        if self.mean_shape is not None and len(self.mean_shape) != 5:
            raise ValueError("mean_shape must hold exactly 5 points")
        return self


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """
    Load the pipeline configuration.

    Args:
        path: JSON file to read; None returns the defaults

    Returns:
        Validated PipelineConfig

    Raises:
        InvalidInputError: If the file is unreadable or fails validation
    """
    if path is None:
        return PipelineConfig()

    logger.info(f"Loading pipeline config from {path}")
    try:
        text = Path(path).read_text(encoding="utf-8")
        return PipelineConfig.model_validate_json(text)
    except OSError as e:
        raise InvalidInputError(f"Cannot read config file {path}: {e}") from e
    except ValidationError as e:
        raise InvalidInputError(f"Invalid config file {path}", {"errors": json.loads(e.json())}) from e


def dump_config(config: PipelineConfig) -> str:
    """Serialize a configuration back to JSON."""
    return config.model_dump_json(indent=2)
