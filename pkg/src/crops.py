"""Square crop sampling and the full-frame <-> crop-frame coordinate algebra."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .attnmap import cell_centers, resample, sample_points
from .errors import OptimizationError
from .models import CropParams, Point

DEFAULT_MARGIN = 0.01

Coord = float | torch.Tensor


@dataclass(frozen=True)
class CropTransform:
    """Affine maps between full-image and crop-normalized coordinates.

    ``to_crop`` takes full-frame u to (u - d) / s; ``to_full`` is its inverse
    d + s * u'. Both accept floats or tensors.
    """

    crop: CropParams

    def to_crop(self, x: Coord, y: Coord) -> tuple[Coord, Coord]:
        s = self.crop.scale
        return (x - self.crop.dx) / s, (y - self.crop.dy) / s

    def to_full(self, x: Coord, y: Coord) -> tuple[Coord, Coord]:
        s = self.crop.scale
        return self.crop.dx + s * x, self.crop.dy + s * y

    def point_to_crop(self, p: Point) -> Point:
        x, y = self.to_crop(p.x, p.y)
        return Point(x=min(max(x, 0.0), 1.0), y=min(max(y, 0.0), 1.0))

    def point_to_full(self, p: Point) -> Point:
        x, y = self.to_full(p.x, p.y)
        return Point(x=min(max(x, 0.0), 1.0), y=min(max(y, 0.0), 1.0))


def contains(crop: CropParams, p: Point, margin: float = 0.0) -> bool:
    """True when p lies inside the crop, at least ``margin`` (crop-relative) from its borders."""
    cx, cy = CropTransform(crop).to_crop(p.x, p.y)
    return margin <= cx <= 1.0 - margin and margin <= cy <= 1.0 - margin


def _feasible_interval(coord: float, scale: float, margin: float) -> tuple[float, float]:
    lo = max(0.0, coord - scale * (1.0 - margin))
    hi = min(1.0 - scale, coord - scale * margin)
    if hi < lo:
        # query closer than the margin to a border: pin to the border-aligned crop
        lo = hi = min(max(coord - scale * margin, 0.0), 1.0 - scale)
    return lo, hi


def sample_crop(
    rng: np.random.Generator,
    scale: float,
    must_contain: Point | None = None,
    margin: float = DEFAULT_MARGIN,
) -> CropParams:
    """Uniform crop offset; conditioned on containing ``must_contain`` when given.

    The conditional draw is uniform over the offsets that keep the point at
    least ``margin`` inside the crop, the same distribution rejection sampling
    converges to. A point nearer than ``margin`` to an image border gets the
    crop flush with that border on that axis.
    """
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"crop scale must be in (0, 1], got {scale}")
    if scale == 1.0:
        return CropParams.identity()
    span = 1.0 - scale
    if must_contain is None:
        dx, dy = rng.uniform(0.0, span, size=2)
        return CropParams(scale=scale, dx=float(dx), dy=float(dy))

    if not 0.0 <= margin < 0.5:
        raise OptimizationError(
            f"no crop of scale {scale} holds {must_contain.as_tuple()} with margin {margin}"
        )
    lo_x, hi_x = _feasible_interval(must_contain.x, scale, margin)
    lo_y, hi_y = _feasible_interval(must_contain.y, scale, margin)
    dx = rng.uniform(lo_x, hi_x) if hi_x > lo_x else lo_x
    dy = rng.uniform(lo_y, hi_y) if hi_y > lo_y else lo_y
    return CropParams(scale=scale, dx=float(dx), dy=float(dy))


def sample_inference_crops(rng: np.random.Generator, scale: float, n: int) -> list[CropParams]:
    """n crops for target attention, the identity crop always first."""
    crops = [CropParams.identity()]
    crops.extend(sample_crop(rng, scale) for _ in range(n - 1))
    return crops


def crop_image(image: torch.Tensor, crop: CropParams) -> tuple[torch.Tensor, CropTransform]:
    """Cut the crop out of a (3, S, S) input and bilinearly resize it back to S x S."""
    transform = CropTransform(crop)
    if crop.is_identity:
        return image, transform
    size = image.shape[-1]
    xs, ys = cell_centers(size, size, dtype=image.dtype, device=image.device)
    fx, fy = transform.to_full(xs, ys)
    grid = torch.stack([2.0 * fx - 1.0, 2.0 * fy - 1.0], dim=-1).unsqueeze(0)
    out = F.grid_sample(
        image.unsqueeze(0), grid, mode="bilinear", padding_mode="border", align_corners=False,
    )
    return out.squeeze(0), transform


def crop_map(values: torch.Tensor, crop: CropParams, out_res: tuple[int, int]) -> torch.Tensor:
    """Express a full-frame map in the crop frame at out_res."""
    xs, ys = cell_centers(out_res[0], out_res[1], dtype=values.dtype, device=values.device)
    fx, fy = CropTransform(crop).to_full(xs, ys)
    return sample_points(values, fx, fy)


def uncrop_map(
    values: torch.Tensor, crop: CropParams, out_res: tuple[int, int],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Place a crop-frame map back into the full frame.

    Returns (placed, coverage): full-frame cells whose centers fall inside the
    crop rectangle read the crop map bilinearly; every other cell is 0 with
    coverage 0.
    """
    xs, ys = cell_centers(out_res[0], out_res[1], dtype=values.dtype, device=values.device)
    if crop.is_identity:
        return resample(values, out_res), torch.ones_like(xs)
    cx, cy = CropTransform(crop).to_crop(xs, ys)
    coverage = ((cx >= 0) & (cx <= 1) & (cy >= 0) & (cy <= 1)).to(values.dtype)
    placed = sample_points(values, cx.clamp(0, 1), cy.clamp(0, 1)) * coverage
    return placed, coverage
