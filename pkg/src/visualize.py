"""Static figures: heatmap overlays, per-layer panels, correspondence lines."""

from __future__ import annotations

import io
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image, ImageDraw, ImageFont

from .attnmap import AggregatedMap, resample
from .evaluation import keypoint_correct, keypoint_distance
from .images import load_rgb
from .infer import AVERAGE
from .models import ImageRecord, MatchResult, OverlaySpec, Point
from .utils import atomic_write_bytes, logger

COLORMAP = "viridis"
LABEL_HEIGHT = 14
POINT_RADIUS = 3

MapLike = AggregatedMap | torch.Tensor | np.ndarray
ImageLike = ImageRecord | np.ndarray


def _pixels(image: ImageLike) -> np.ndarray:
    """H x W x 3 float in [0, 1]."""
    if isinstance(image, ImageRecord):
        return load_rgb(image)
    return np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def _map_values(amap: MapLike, height: int, width: int) -> np.ndarray:
    """Map resampled to the image raster, scaled by its maximum into [0, 1]."""
    if isinstance(amap, AggregatedMap):
        values = amap.values
    else:
        values = torch.as_tensor(np.asarray(amap) if isinstance(amap, np.ndarray) else amap)
    values = values.detach().to(dtype=torch.float64, device="cpu")
    if tuple(values.shape) != (height, width):
        values = resample(values, (height, width))
    arr = np.clip(values.numpy(), 0.0, None)
    peak = arr.max()
    return arr / peak if peak > 0 else np.zeros_like(arr)


def heatmap_overlay(image: ImageLike, amap: MapLike, blend: float = 0.6) -> np.ndarray:
    """Colormapped attention blended over the image, weighted by attention strength.

    An all-zero map leaves the image untouched.
    """
    pixels = _pixels(image)
    h, w = pixels.shape[:2]
    norm = _map_values(amap, h, w)
    colors = colormaps[COLORMAP](norm)[..., :3]
    weight = blend * norm[..., None]
    return _to_uint8((1.0 - weight) * pixels + weight * colors)


def _labelled(tile: np.ndarray, label: str) -> Image.Image:
    h, w = tile.shape[:2]
    canvas = Image.new("RGB", (w, h + LABEL_HEIGHT), (255, 255, 255))
    canvas.paste(Image.fromarray(tile), (0, LABEL_HEIGHT))
    ImageDraw.Draw(canvas).text((2, 1), label, fill=(0, 0, 0), font=ImageFont.load_default())
    return canvas


def layer_panels(
    image: ImageLike,
    maps: Mapping[int, MapLike],
    blend: float = 0.6,
) -> list[tuple[str, np.ndarray]]:
    """One overlay per layer in ascending order, then the layer average."""
    panels = [
        (f"Layer {layer}", heatmap_overlay(image, maps[layer], blend))
        for layer in sorted(k for k in maps if k != AVERAGE)
    ]
    if AVERAGE in maps:
        panels.append(("Average", heatmap_overlay(image, maps[AVERAGE], blend)))
    return panels


def panel_strip(panels: Sequence[tuple[str, np.ndarray]]) -> np.ndarray:
    """Labelled panels side by side."""
    tiles = [_labelled(tile, label) for label, tile in panels]
    width = sum(t.width for t in tiles)
    height = max(t.height for t in tiles)
    strip = Image.new("RGB", (width, height), (255, 255, 255))
    x = 0
    for tile in tiles:
        strip.paste(tile, (x, 0))
        x += tile.width
    return np.asarray(strip)


def line_colors(
    results: Sequence[MatchResult],
    ground_truth: Sequence[Point],
    target_size: tuple[int, int],
    ref_size: float,
    spec: OverlaySpec,
) -> list[tuple[int, int, int]]:
    """Correct (within spec.alpha * ref_size) vs wrong color per prediction."""
    height, width = target_size
    colors = []
    for result, gt in zip(results, ground_truth, strict=True):
        dist = keypoint_distance(result.predicted, gt, width, height)
        ok = keypoint_correct(dist, spec.alpha, ref_size)
        colors.append(spec.correct_color if ok else spec.wrong_color)
    return colors


def _resize_height(pixels: np.ndarray, height: int) -> Image.Image:
    img = Image.fromarray(_to_uint8(pixels))
    if img.height == height:
        return img
    width = max(1, round(img.width * height / img.height))
    return img.resize((width, height), Image.BILINEAR)


def correspondence_figure(
    source: ImageLike,
    target: ImageLike,
    results: Sequence[MatchResult],
    colors: Sequence[tuple[int, int, int]],
) -> np.ndarray:
    """Source and target side by side, one line from each query to its prediction."""
    src_px, tgt_px = _pixels(source), _pixels(target)
    height = max(src_px.shape[0], tgt_px.shape[0])
    left, right = _resize_height(src_px, height), _resize_height(tgt_px, height)
    canvas = Image.new("RGB", (left.width + right.width, height), (255, 255, 255))
    canvas.paste(left, (0, 0))
    canvas.paste(right, (left.width, 0))
    draw = ImageDraw.Draw(canvas)
    r = POINT_RADIUS
    for result, color in zip(results, colors, strict=True):
        x0, y0 = result.query.x * left.width, result.query.y * height
        x1 = left.width + result.predicted.x * right.width
        y1 = result.predicted.y * height
        draw.line([(x0, y0), (x1, y1)], fill=color, width=2)
        for cx, cy in ((x0, y0), (x1, y1)):
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    return np.asarray(canvas)


def save_png(path: Path, pixels: np.ndarray) -> Path:
    """8-bit RGB PNG, written atomically."""
    arr = pixels if pixels.dtype == np.uint8 else _to_uint8(pixels)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write_bytes(Path(path), buf.getvalue())
    logger.info("Wrote %s", path)
    return Path(path)
