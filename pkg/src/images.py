"""Image IO and resampling to the fixed network input frame."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DatasetError
from .models import NETWORK_INPUT_SIZE, ImageRecord


def read_image_size(path: Path) -> tuple[int, int]:
    """(height, width) from the image header, without decoding pixels."""
    try:
        with Image.open(path) as img:
            width, height = img.size
    except (OSError, ValueError) as exc:
        raise DatasetError(f"Cannot read image header: {exc}", path) from exc
    return height, width


def image_from_file(path: Path, image_id: str | None = None) -> ImageRecord:
    """Reference an image on disk; pixels are decoded lazily by load_rgb."""
    path = Path(path)
    return ImageRecord(
        id=image_id or path.stem,
        original_size=read_image_size(path),
        path=path,
    )


def image_from_array(pixels: np.ndarray, image_id: str) -> ImageRecord:
    pixels = np.asarray(pixels, dtype=np.float32)
    return ImageRecord(id=image_id, original_size=pixels.shape[:2], pixels=pixels)


def load_rgb(record: ImageRecord) -> np.ndarray:
    """H x W x 3 float32 pixels in [0, 1]. sRGB decode only."""
    if record.pixels is not None:
        return record.pixels
    assert record.path is not None
    try:
        with Image.open(record.path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"Cannot decode image: {exc}", record.path) from exc
    return rgb


def to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """H x W x 3 array to a 3 x H x W tensor."""
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).contiguous()


def network_input(
    image: ImageRecord | np.ndarray,
    size: int = NETWORK_INPUT_SIZE,
    dtype: torch.dtype = torch.float32,
    device: str | torch.device = "cpu",
) -> torch.Tensor:
    """Bilinearly resample an image to a 3 x size x size tensor."""
    pixels = load_rgb(image) if isinstance(image, ImageRecord) else image
    x = to_tensor(pixels).to(device=device, dtype=dtype).unsqueeze(0)
    if x.shape[-2:] != (size, size):
        downscale = x.shape[-2] > size or x.shape[-1] > size
        x = F.interpolate(
            x, size=(size, size), mode="bilinear", align_corners=False, antialias=downscale,
        )
    return x.squeeze(0).clamp(0.0, 1.0)


def coordinate_image(
    image_id: str = "ramp",
    height: int = NETWORK_INPUT_SIZE,
    width: int = NETWORK_INPUT_SIZE,
    scale: float = 1.0,
    offset: tuple[float, float] = (0.0, 0.0),
) -> ImageRecord:
    """Synthetic image whose red/green channels encode position.

    Pixel (i, j) has R = offset_x + scale * (j + 0.5) / width and
    G = offset_y + scale * (i + 0.5) / height, so the content seen at a
    normalized location u is the ramp position offset + scale * u.
    """
    if not 0.0 < scale <= 1.0:
        raise ValueError("scale must be in (0, 1]")
    if not all(0.0 <= o <= 1.0 - scale + 1e-9 for o in offset):
        raise ValueError("offset must keep the ramp within [0, 1]")
    xs = offset[0] + scale * (np.arange(width, dtype=np.float32) + 0.5) / width
    ys = offset[1] + scale * (np.arange(height, dtype=np.float32) + 0.5) / height
    pixels = np.empty((height, width, 3), dtype=np.float32)
    pixels[..., 0] = xs[None, :]
    pixels[..., 1] = ys[:, None]
    pixels[..., 2] = 0.5
    return image_from_array(np.clip(pixels, 0.0, 1.0), image_id)
