from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ModelKind(str, Enum):
    """Checkpoint tag: which classifier family a parameter set belongs to."""
    ONE_HOT = "one-hot"
    ECOC = "ecoc"


class BottomKind(str, Enum):
    """Shared-bottom layer stack."""
    CONV = "conv"           # 2 × (conv3x3 → relu → maxpool2x2), for image inputs
    DENSE = "dense"         # flatten → dense → relu, for synthetic vectors
    IDENTITY = "identity"   # flatten only, for the tiny linear oracle models


class LossKind(str, Enum):
    """Per-bit loss used while fine-tuning the ensemble branches."""
    LOGISTIC = "logistic"   # log(1 + exp(-t·z))
    HINGE = "hinge"         # max(0, 1 - t·z)


class BottomMode(str, Enum):
    """Whether fine-tuning keeps the shared bottom fixed or trains it with the branches."""
    FROZEN = "frozen"
    SHARED = "shared"


class Architecture(BaseModel):
    """
    Layer description shared by the one-hot baseline and the ECOC ensemble.

    head_width is the hidden width of the one-hot head and of every ensemble branch;
    0 makes them linear.
    """
    model_config = ConfigDict(frozen=True)

    input_shape: Tuple[int, ...]
    bottom: BottomKind = BottomKind.DENSE
    conv_channels: Tuple[int, int] = (8, 16)
    bottom_width: int = Field(default=64, ge=1)
    head_width: int = Field(default=32, ge=0)
    bits_per_branch: int = Field(default=1, ge=1)

    @field_validator("input_shape")
    @classmethod
    def _positive_extents(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v or any(n < 1 for n in v):
            raise ValueError(f"input_shape must have positive extents, got {v}")
        return v

    @model_validator(mode="after")
    def _conv_geometry(self) -> "Architecture":
        if self.bottom == BottomKind.CONV:
            if len(self.input_shape) != 3:
                raise ValueError("conv bottom needs (channels, height, width) inputs")
            _, h, w = self.input_shape
            if h % 4 or w % 4:
                raise ValueError("conv bottom needs height and width divisible by 4")
        return self

    @property
    def pixel_count(self) -> int:
        count = 1
        for n in self.input_shape:
            count *= n
        return count

    @property
    def feature_size(self) -> int:
        if self.bottom == BottomKind.CONV:
            _, h, w = self.input_shape
            return self.conv_channels[1] * (h // 4) * (w // 4)
        if self.bottom == BottomKind.DENSE:
            return self.bottom_width
        return self.pixel_count


class TrainConfig(BaseModel):
    """Minibatch gradient descent settings for base training and fine-tuning."""
    epochs: int = Field(default=10, ge=1)
    finetune_epochs: Optional[int] = Field(default=None, ge=1)  # defaults to epochs
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=0.05, gt=0)
    momentum: float = Field(default=0.0, ge=0, lt=1)
    seed: int = 0
    loss: LossKind = LossKind.LOGISTIC
    validation_fraction: float = Field(default=0.1, gt=0, lt=1)
    bottom_mode: BottomMode = BottomMode.FROZEN

    @property
    def effective_finetune_epochs(self) -> int:
        return self.finetune_epochs or self.epochs


_SYNTHETIC_KEYS = {"m": "num_classes", "dims": "dims", "sep": "separation",
                   "per_class": "per_class", "seed": "seed"}


class SyntheticSpec(BaseModel):
    """
    Parameters of a Gaussian-blob dataset; the text form `M=4,dims=16,sep=8` regenerates it.
    """
    model_config = ConfigDict(frozen=True)

    num_classes: int = Field(ge=2)
    dims: int = Field(ge=1)
    separation: float = Field(gt=0)
    per_class: int = Field(default=100, ge=0)
    seed: int = 0

    @classmethod
    def parse(cls, line: str, seed: Optional[int] = None) -> "SyntheticSpec":
        values: Dict[str, Any] = {}
        for part in filter(None, (p.strip() for p in line.split(","))):
            key, sep, raw = part.partition("=")
            if not sep:
                raise ValueError(f"Expected key=value in synthetic spec, got '{part}'")
            field_name = _SYNTHETIC_KEYS.get(key.strip().lower())
            if field_name is None:
                raise ValueError(f"Unknown synthetic spec key '{key.strip()}'")
            values[field_name] = raw.strip()
        if seed is not None and "seed" not in values:
            values["seed"] = seed
        return cls(**values)

    def to_line(self) -> str:
        return (f"M={self.num_classes},dims={self.dims},sep={self.separation:g},"
                f"per_class={self.per_class},seed={self.seed}")


class RunManifest(BaseModel):
    """Everything needed to re-run a CLI command and check its artifacts."""
    command: str
    argv: List[str]
    config: Dict[str, Any] = {}
    seeds: Dict[str, int] = {}
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str] = {}
    checksums: Dict[str, str] = {}   # output name -> sha256 hex
    exit_code: int = 0
    timestamp: str = Field(default_factory=lambda: datetime.now().isoformat())
