"""Attention map maths: token selection, head/layer aggregation, Gaussian targets.

Maps use cell-center sampling: cell (i, j) of an H x W map sits at normalized
((j + 0.5) / W, (i + 0.5) / H). All resampling is bilinear with that
convention (``align_corners=False``) and clamps at the border.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backend import AttentionStack
from .errors import FormatError, MapError
from .models import NETWORK_INPUT_SIZE, Point
from .utils import atomic_write_bytes

MAP_MAGIC = b"AMAP"
_MAP_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class AggregatedMap:
    """Head/layer-averaged single-token map on a fixed grid."""

    values: torch.Tensor
    frame: str = "full"

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.values.shape[-2]), int(self.values.shape[-1])

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy()


@dataclass(frozen=True)
class GaussianTarget:
    values: torch.Tensor
    center: Point
    sigma: float


def cell_centers(
    height: int, width: int, dtype: torch.dtype = torch.float64, device: str | torch.device = "cpu",
) -> tuple[torch.Tensor, torch.Tensor]:
    """(xs, ys) grids of normalized cell-center coordinates, each H x W."""
    xs = (torch.arange(width, dtype=dtype, device=device) + 0.5) / width
    ys = (torch.arange(height, dtype=dtype, device=device) + 0.5) / height
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    return grid_x, grid_y


def resample(values: torch.Tensor, out_res: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resample an H x W map to out_res."""
    if tuple(values.shape[-2:]) == tuple(out_res):
        return values
    return F.interpolate(
        values[None, None], size=tuple(out_res), mode="bilinear", align_corners=False,
    )[0, 0]


# ---------------------------------------------------------------------------
# Token selection and aggregation
# ---------------------------------------------------------------------------

def select_token(stack: AttentionStack, index: int = 1) -> dict[int, torch.Tensor]:
    """Per-layer (heads, h, w) maps of one token."""
    tokens = stack.tokens
    if index == 0 or index == tokens - 1:
        raise MapError(f"token index {index} is a special token (P={tokens})")
    if not 0 < index < tokens:
        raise MapError(f"token index {index} out of bounds (P={tokens})")
    maps: dict[int, torch.Tensor] = {}
    for layer, probs in stack.probs.items():
        geom = stack.geometry[layer]
        maps[layer] = probs[:, :, index].reshape(probs.shape[0], geom.height, geom.width)
    return maps


def layer_maps(
    stack: AttentionStack, token_index: int, out_res: tuple[int, int],
) -> dict[int, torch.Tensor]:
    """Head-averaged token map of every layer, resampled to out_res."""
    return {
        layer: resample(maps.mean(dim=0), out_res)
        for layer, maps in select_token(stack, token_index).items()
    }


def aggregate(stack: AttentionStack, token_index: int, out_res: tuple[int, int]) -> AggregatedMap:
    """Mean over heads, bilinear resize, then unweighted mean over layers."""
    if not stack.probs:
        raise MapError("empty layer set")
    per_layer = layer_maps(stack, token_index, out_res)
    return AggregatedMap(values=torch.stack(list(per_layer.values())).mean(dim=0))


# ---------------------------------------------------------------------------
# Gaussian target
# ---------------------------------------------------------------------------

def gaussian_at(
    xs: torch.Tensor, ys: torch.Tensor, center: Point, sigma: float,
) -> torch.Tensor:
    """exp(-d^2 / 2 sigma^2), d measured in pixels of the network input frame."""
    if sigma <= 0:
        raise MapError(f"sigma must be > 0, got {sigma}")
    dx = (xs - center.x) * NETWORK_INPUT_SIZE
    dy = (ys - center.y) * NETWORK_INPUT_SIZE
    return torch.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))


def gaussian_target(
    center: Point,
    sigma: float,
    out_res: tuple[int, int],
    dtype: torch.dtype = torch.float64,
    device: str | torch.device = "cpu",
) -> GaussianTarget:
    """Unnormalized Gaussian (peak 1) sampled at every cell center."""
    xs, ys = cell_centers(out_res[0], out_res[1], dtype=dtype, device=device)
    return GaussianTarget(values=gaussian_at(xs, ys, center, sigma), center=center, sigma=sigma)


# ---------------------------------------------------------------------------
# Bilinear indexing
# ---------------------------------------------------------------------------

def sample_points(values: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of an H x W map at normalized points (border clamped)."""
    grid = torch.stack([2.0 * xs - 1.0, 2.0 * ys - 1.0], dim=-1).to(values.dtype)
    flat = grid.reshape(1, 1, -1, 2)
    out = F.grid_sample(
        values[None, None], flat, mode="bilinear", padding_mode="border", align_corners=False,
    )
    return out.reshape(xs.shape)


def sample_map(amap: AggregatedMap | torch.Tensor, u: Point) -> float:
    values = amap.values if isinstance(amap, AggregatedMap) else amap
    x = torch.tensor([u.x], dtype=values.dtype, device=values.device)
    y = torch.tensor([u.y], dtype=values.dtype, device=values.device)
    return float(sample_points(values.detach(), x, y)[0])


# ---------------------------------------------------------------------------
# Map files
# ---------------------------------------------------------------------------

def write_map(path: Path, amap: AggregatedMap | np.ndarray) -> Path:
    """16-byte header (AMAP, H, W, reserved) then row-major float32 LE."""
    values = amap.numpy() if isinstance(amap, AggregatedMap) else np.asarray(amap)
    if values.ndim != 2:
        raise FormatError(f"map must be 2-D, got shape {values.shape}")
    h, w = values.shape
    payload = _MAP_HEADER.pack(MAP_MAGIC, h, w, 0) + values.astype("<f4").tobytes(order="C")
    return atomic_write_bytes(Path(path), payload)


def read_map(path: Path) -> AggregatedMap:
    data = Path(path).read_bytes()
    if len(data) < _MAP_HEADER.size:
        raise FormatError(f"map file too short: {path}")
    magic, h, w, _ = _MAP_HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise FormatError(f"bad map magic {magic!r}: {path}")
    expected = _MAP_HEADER.size + 4 * h * w
    if len(data) != expected:
        raise FormatError(f"map file size {len(data)} != {expected}: {path}")
    values = np.frombuffer(data, dtype="<f4", offset=_MAP_HEADER.size).reshape(h, w)
    return AggregatedMap(values=torch.from_numpy(values.astype(np.float32)))
