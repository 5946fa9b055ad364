"""Pydantic models for all data structures used across the pipeline.

Everything here is frozen after construction so records can be shared
between worker threads without copying.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

NETWORK_INPUT_SIZE = 512
UNET_LAYER_COUNT = 16


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True)


class _FrozenArrays(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

class Point(_Frozen):
    """A location in normalized image coordinates.

    x grows rightward, y downward, origin at the top-left corner, both
    divided by the width/height of the raster the point indexes.
    """

    x: float = Field(ge=0.0, le=1.0)
    y: float = Field(ge=0.0, le=1.0)

    @classmethod
    def from_pixels(cls, px: float, py: float, width: int, height: int) -> Point:
        return cls(x=px / width, y=py / height)

    def to_pixels(self, width: int, height: int) -> tuple[float, float]:
        return self.x * width, self.y * height

    def as_tuple(self) -> tuple[float, float]:
        return self.x, self.y


class BBox(_Frozen):
    """Axis-aligned rectangle in normalized coordinates."""

    x1: float = Field(ge=0.0, le=1.0)
    y1: float = Field(ge=0.0, le=1.0)
    x2: float = Field(ge=0.0, le=1.0)
    y2: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self) -> BBox:
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError("bbox corners out of order")
        return self

    @classmethod
    def from_pixels(
        cls, x1: float, y1: float, x2: float, y2: float, width: int, height: int,
    ) -> BBox:
        return cls(
            x1=min(max(x1 / width, 0.0), 1.0),
            y1=min(max(y1 / height, 0.0), 1.0),
            x2=min(max(x2 / width, 0.0), 1.0),
            y2=min(max(y2 / height, 0.0), 1.0),
        )

    @classmethod
    def around(cls, points: list[Point]) -> BBox:
        """Tight box around a set of points."""
        xs = [p.x for p in points]
        ys = [p.y for p in points]
        return cls(x1=min(xs), y1=min(ys), x2=max(xs), y2=max(ys))

    def size_pixels(self, width: int, height: int) -> tuple[float, float]:
        """(height, width) of the box in pixels of a width x height raster."""
        return (self.y2 - self.y1) * height, (self.x2 - self.x1) * width


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

class ImageRecord(_FrozenArrays):
    """An RGB image, either held in memory or referenced by path.

    ``pixels`` is H x W x 3 float32 in [0, 1] when present. Records built by
    dataset loaders carry only ``path`` and the annotated ``original_size``;
    ``images.load_rgb`` decodes on demand.
    """

    id: str
    original_size: tuple[int, int] = Field(description="(height, width) in pixels")
    pixels: np.ndarray | None = None
    path: Path | None = None

    @field_validator("original_size")
    @classmethod
    def _positive_size(cls, v: tuple[int, int]) -> tuple[int, int]:
        if v[0] < 1 or v[1] < 1:
            raise ValueError("original_size dims must be >= 1")
        return v

    @model_validator(mode="after")
    def _pixels_or_path(self) -> ImageRecord:
        if self.pixels is None and self.path is None:
            raise ValueError("ImageRecord needs pixels or a path")
        if self.pixels is not None:
            px = self.pixels
            if px.ndim != 3 or px.shape[2] != 3:
                raise ValueError(f"pixels must be H x W x 3, got {px.shape}")
            if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
                raise ValueError("pixels must be finite and within [0, 1]")
        return self

    @property
    def height(self) -> int:
        return self.original_size[0]

    @property
    def width(self) -> int:
        return self.original_size[1]


# ---------------------------------------------------------------------------
# Hyperparameters
# ---------------------------------------------------------------------------

class HyperParams(_Frozen):
    """Every knob of embedding optimisation and inference."""

    layers: tuple[int, ...] = (7, 8, 9, 10)
    learning_rate: float = Field(default=2.37e-3, gt=0.0)
    sigma: float = Field(default=27.98, gt=0.0, description="px of the 512 frame")
    timestep: int = 8
    total_steps: int = Field(default=50, ge=1)
    opt_steps: int = Field(default=129, ge=1)
    crop_fraction: float = Field(default=0.9317, gt=0.0, le=1.0)
    n_embeddings: int = Field(default=10, ge=1)
    n_inference_crops: int = Field(default=30, ge=1)
    loss_resolution: tuple[int, int] = (64, 64)
    token_index: int = Field(default=1, ge=1)

    @field_validator("layers")
    @classmethod
    def _layers_in_range(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v:
            raise ValueError("layers out of range: empty layer set")
        if len(set(v)) != len(v):
            raise ValueError("layers out of range: duplicate layer index")
        bad = [i for i in v if i < 0 or i >= UNET_LAYER_COUNT]
        if bad:
            raise ValueError(f"layers out of range: {bad} not in 0..{UNET_LAYER_COUNT - 1}")
        return v

    @field_validator("loss_resolution")
    @classmethod
    def _positive_resolution(cls, v: tuple[int, int]) -> tuple[int, int]:
        if v[0] < 2 or v[1] < 2:
            raise ValueError("loss_resolution out of range: both dims must be >= 2")
        return v

    @model_validator(mode="after")
    def _timestep_in_schedule(self) -> HyperParams:
        if not 1 <= self.timestep <= self.total_steps:
            raise ValueError(
                f"timestep out of range: {self.timestep} not in 1..{self.total_steps}"
            )
        return self


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

class Provenance(_Frozen):
    source_image_id: str
    query: Point
    seed: int
    hp_digest: str


class PromptEmbedding(_FrozenArrays):
    """An optimised P x D conditioning matrix."""

    matrix: np.ndarray
    token_index: int = 1
    provenance: Provenance
    loss_trace: tuple[float, ...] = ()

    @model_validator(mode="after")
    def _check(self) -> PromptEmbedding:
        m = self.matrix
        if m.ndim != 2:
            raise ValueError(f"embedding must be P x D, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("embedding has non-finite entries")
        if not 0 < self.token_index < m.shape[0] - 1:
            raise ValueError(
                f"token_index {self.token_index} selects a special token (P={m.shape[0]})"
            )
        return self

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape[0], self.matrix.shape[1]

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else math.nan


class EmbeddingEnsemble(_FrozenArrays):
    """R independently optimised embeddings for one (image, query)."""

    members: tuple[PromptEmbedding, ...]

    @model_validator(mode="after")
    def _consistent(self) -> EmbeddingEnsemble:
        if not self.members:
            raise ValueError("ensemble must have at least one member")
        first = self.members[0]
        for i, m in enumerate(self.members[1:], start=1):
            if m.shape != first.shape or m.token_index != first.token_index:
                raise ValueError(f"ensemble member {i} geometry differs from member 0")
        return self

    @property
    def provenance(self) -> Provenance:
        return self.members[0].provenance

    def __len__(self) -> int:
        return len(self.members)


# ---------------------------------------------------------------------------
# Crops
# ---------------------------------------------------------------------------

class CropParams(_Frozen):
    """Square crop [dx, dx+scale] x [dy, dy+scale] in normalized coordinates."""

    scale: float = Field(gt=0.0, le=1.0)
    dx: float = Field(default=0.0, ge=0.0)
    dy: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _inside_image(self) -> CropParams:
        limit = 1.0 - self.scale + 1e-9
        if self.dx > limit or self.dy > limit:
            raise ValueError(
                f"crop offset ({self.dx}, {self.dy}) exceeds {1.0 - self.scale}"
            )
        return self

    @classmethod
    def identity(cls) -> CropParams:
        return cls(scale=1.0, dx=0.0, dy=0.0)

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.dx == 0.0 and self.dy == 0.0


# ---------------------------------------------------------------------------
# Matching and datasets
# ---------------------------------------------------------------------------

class MatchResult(_FrozenArrays):
    """One localised correspondence in a target image."""

    source_id: str
    target_id: str
    query: Point
    predicted: Point
    peak_value: float
    degenerate: bool = False
    heatmap: np.ndarray | None = Field(default=None, exclude=True)

    @property
    def flags(self) -> str:
        return "degenerate" if self.degenerate else "ok"


class KeypointMatch(_Frozen):
    source: Point
    target: Point
    kp_id: str


class CorrespondencePair(_Frozen):
    """Annotated source/target images with index-aligned keypoints."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    pair_id: str
    source: ImageRecord
    target: ImageRecord
    keypoints: tuple[KeypointMatch, ...]
    class_name: str
    bbox_src: BBox | None = None
    bbox_tgt: BBox | None = None
    split: Literal["trn", "val", "test"] = "test"

    @field_validator("split", mode="before")
    @classmethod
    def _split_alias(cls, v: object) -> object:
        return "trn" if v == "train" else v

    @property
    def source_points(self) -> list[Point]:
        return [k.source for k in self.keypoints]

    @property
    def target_points(self) -> list[Point]:
        return [k.target for k in self.keypoints]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

class PckEntry(_Frozen):
    class_name: str
    alpha: float
    correct: int
    total: int

    @property
    def pck(self) -> float:
        return self.correct / self.total if self.total else 0.0


class PckReport(_Frozen):
    """Per-class, per-alpha correctness plus the per-pair histogram at 0.1."""

    dataset: str = ""
    reference: Literal["bbox", "image"] = "bbox"
    entries: tuple[PckEntry, ...] = ()
    histogram: tuple[int, ...] = (0,) * 10
    n_pairs: int = 0

    @property
    def alphas(self) -> list[float]:
        return sorted({e.alpha for e in self.entries})

    @property
    def classes(self) -> list[str]:
        return sorted({e.class_name for e in self.entries})

    def entry(self, class_name: str, alpha: float) -> PckEntry | None:
        for e in self.entries:
            if e.class_name == class_name and math.isclose(e.alpha, alpha):
                return e
        return None

    def overall(self, alpha: float) -> PckEntry:
        matching = [e for e in self.entries if math.isclose(e.alpha, alpha)]
        return PckEntry(
            class_name="all",
            alpha=alpha,
            correct=sum(e.correct for e in matching),
            total=sum(e.total for e in matching),
        )


class TrialRecord(_Frozen):
    trial_id: int
    seed: int
    hp: HyperParams
    pck: float


class OverlaySpec(_Frozen):
    """How a figure is drawn: attention heatmap, layer panels, or match lines."""

    kind: Literal["heatmap", "layers", "lines"] = "heatmap"
    alpha: float = Field(default=0.05, gt=0.0)
    correct_color: tuple[int, int, int] = (31, 119, 255)
    wrong_color: tuple[int, int, int] = (255, 140, 0)
    blend: float = Field(default=0.6, ge=0.0, le=1.0)
