from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Deletion/insertion replace 224 x 8 pixels of a 224 x 224 image per step
DEFAULT_STEP_FRACTION = (224 * 8) / (224 * 224)

CLASS_NAMES: Tuple[str, ...] = ("square", "circle")


class SaliencyMethod(str, Enum):
    GROUPCAM = "groupcam"
    GRADCAM = "gradcam"


class RandomizationMode(str, Enum):
    CASCADE = "cascade"
    INDEPENDENT = "independent"


class MetricKind(str, Enum):
    AUC = "auc"
    POINTING = "pointing"
    SANITY = "sanity"


class GroupCamConfig(BaseModel):
    groups: int = Field(default=32, ge=1, description="Number of channel groups G")
    theta: float = Field(default=70.0, ge=0.0, le=100.0, description="De-noise percentile")
    ksize: int = Field(default=51, ge=1, description="Gaussian blur kernel size (odd)")
    sigma: float = Field(default=50.0, gt=0.0, description="Gaussian blur sigma")
    layer_id: Optional[str] = Field(default=None, description="Target layer, deepest conv if unset")
    denoise: bool = True

    @field_validator("ksize")
    @classmethod
    def _odd_ksize(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("ksize must be odd")
        return value


class AugmentConfig(BaseModel):
    groups: int = Field(default=16, ge=1)
    ksize: int = Field(default=51, ge=1)
    sigma: float = Field(default=50.0, gt=0.0)
    apply_probability: float = Field(default=1.0, ge=0.0, le=1.0)
    layer_id: Optional[str] = None

    @field_validator("ksize")
    @classmethod
    def _odd_ksize(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("ksize must be odd")
        return value


class BoundingBox(BaseModel):
    """Pixel box, origin top-left, COCO order [x, y, w, h]"""
    x: int = Field(ge=0)
    y: int = Field(ge=0)
    w: int = Field(ge=1)
    h: int = Field(ge=1)

    def as_list(self) -> List[int]:
        return [self.x, self.y, self.w, self.h]

    def contains(self, px: int, py: int) -> bool:
        # inclusive on both edges
        return self.x <= px <= self.x + self.w and self.y <= py <= self.y + self.h

    @classmethod
    def from_list(cls, values: List[int]) -> "BoundingBox":
        x, y, w, h = (int(v) for v in values)
        return cls(x=x, y=y, w=w, h=h)


class FixtureDatasetSpec(BaseModel):
    image_size: int = Field(default=64, ge=8)
    channels: int = Field(default=3, ge=1)
    class_names: Tuple[str, ...] = CLASS_NAMES
    seed: int = 0
    start_index: int = Field(default=0, ge=0)
    min_shape_size: int = Field(default=14, ge=2)
    max_shape_size: int = Field(default=26, ge=2)

    @model_validator(mode="after")
    def _shape_fits(self) -> "FixtureDatasetSpec":
        if self.min_shape_size > self.max_shape_size:
            raise ValueError("min_shape_size exceeds max_shape_size")
        if self.max_shape_size > self.image_size:
            raise ValueError("max_shape_size exceeds image_size")
        return self


class FixtureSample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sample_id: str
    image: np.ndarray
    label: int = Field(ge=0)
    category: str
    bbox: BoundingBox


class ActivationBundle(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    activations: np.ndarray
    gradients: np.ndarray
    class_index: int = Field(ge=0)
    layer_id: str

    @model_validator(mode="after")
    def _matching_shapes(self) -> "ActivationBundle":
        if self.activations.ndim != 3:
            raise ValueError(f"activations must be K x h x w, got {self.activations.shape}")
        if self.activations.shape != self.gradients.shape:
            raise ValueError(
                f"activation/gradient shapes differ: {self.activations.shape} vs {self.gradients.shape}"
            )
        return self

    @property
    def num_channels(self) -> int:
        return int(self.activations.shape[0])

    @property
    def z(self) -> int:
        return int(self.activations.shape[1] * self.activations.shape[2])


class SaliencyMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    class_index: int = Field(ge=0)
    method: SaliencyMethod

    @field_validator("data")
    @classmethod
    def _unit_range(cls, value: np.ndarray) -> np.ndarray:
        if value.ndim != 2:
            raise ValueError(f"saliency must be H x W, got {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError("saliency contains non-finite values")
        if value.size and (value.min() < 0.0 or value.max() > 1.0):
            raise ValueError("saliency values must lie in [0, 1]")
        return value

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.data.shape[0]), int(self.data.shape[1])


class GroupScore(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    group_index: int = Field(ge=0)
    alpha: float
    mask: np.ndarray


class CurveResult(BaseModel):
    fractions: List[float]
    scores: List[float]
    auc: float

    @model_validator(mode="after")
    def _well_formed(self) -> "CurveResult":
        if len(self.fractions) != len(self.scores):
            raise ValueError("fractions and scores differ in length")
        if len(self.fractions) < 2 or self.fractions[0] != 0.0 or self.fractions[-1] != 1.0:
            raise ValueError("fractions must start at 0 and end at 1")
        return self


class CurveRow(BaseModel):
    image_id: str
    method: SaliencyMethod
    insertion_auc: float
    deletion_auc: float
    overall: float


class AblationRow(BaseModel):
    groups: int
    theta: float
    insertion_auc: float
    deletion_auc: float
    overall: float


class PointingResult(BaseModel):
    hits: Dict[str, int] = Field(default_factory=dict)
    misses: Dict[str, int] = Field(default_factory=dict)

    def record(self, category: str, hit: bool) -> None:
        self.hits.setdefault(category, 0)
        self.misses.setdefault(category, 0)
        if hit:
            self.hits[category] += 1
        else:
            self.misses[category] += 1

    def merge(self, other: "PointingResult") -> "PointingResult":
        merged = PointingResult(hits=dict(self.hits), misses=dict(self.misses))
        for category in sorted(set(other.hits) | set(other.misses)):
            merged.hits[category] = merged.hits.get(category, 0) + other.hits.get(category, 0)
            merged.misses[category] = merged.misses.get(category, 0) + other.misses.get(category, 0)
        return merged

    @property
    def categories(self) -> List[str]:
        return sorted(set(self.hits) | set(self.misses))

    def accuracy(self, category: str) -> float:
        hits = self.hits.get(category, 0)
        total = hits + self.misses.get(category, 0)
        if total == 0:
            raise ValueError(f"no samples for category {category!r}")
        return hits / total

    @property
    def mean_accuracy(self) -> float:
        counted = [c for c in self.categories if self.hits.get(c, 0) + self.misses.get(c, 0) > 0]
        if not counted:
            return 0.0
        return float(np.mean([self.accuracy(c) for c in counted]))


class SanityLayerScore(BaseModel):
    layer_id: str
    similarity: float = Field(ge=-1.0, le=1.0)


class SanityReport(BaseModel):
    mode: RandomizationMode
    layers: List[SanityLayerScore] = Field(default_factory=list)


class GradientCheckReport(BaseModel):
    layer_id: str
    n_cells: int
    eps: float
    pass_fraction: float = Field(ge=0.0, le=1.0)
    max_relative_error: float


class TrainingReport(BaseModel):
    seed: int
    epochs: int
    train_size: int
    held_out_size: int
    epoch_losses: List[float] = Field(default_factory=list)
    held_out_accuracy: float
    gradient_check: Optional[GradientCheckReport] = None


class EpochRecord(BaseModel):
    epoch: int = Field(ge=0)
    train_loss: Optional[float] = None
    accuracy: float = Field(ge=0.0, le=1.0)


class FinetuneReport(BaseModel):
    seed: int
    epochs: int = Field(ge=0)
    learning_rate: float
    initial_accuracy: float
    config: AugmentConfig
    augmented: List[EpochRecord] = Field(default_factory=list)
    control: List[EpochRecord] = Field(default_factory=list)
    mask_change: List[float] = Field(default_factory=list)


class EvaluationResult(BaseModel):
    rows: List[CurveRow] = Field(default_factory=list)
    pointing: Optional[PointingResult] = None
    sanity: Dict[str, SanityReport] = Field(default_factory=dict)


class RunConfig(BaseModel):
    command: str
    seed: int = 0
    groupcam: GroupCamConfig = Field(default_factory=GroupCamConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    method: SaliencyMethod = SaliencyMethod.GROUPCAM
    metrics: List[MetricKind] = Field(default_factory=lambda: [MetricKind.AUC, MetricKind.POINTING])
    step_fraction: float = Field(default=DEFAULT_STEP_FRACTION, gt=0.0, le=1.0)
    jobs: int = Field(default=1, ge=1)
    epochs: int = Field(default=5, ge=0)
    n: int = Field(default=800, ge=1)
    alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    class_index: Optional[int] = None
    paths: Dict[str, str] = Field(default_factory=dict)
    extra: Dict[str, Any] = Field(default_factory=dict)
