"""Shared toy-backend fixtures."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from src.backend import ToyBackend
from src.images import coordinate_image
from src.models import HyperParams, ImageRecord

TOY_INPUT = 128


@pytest.fixture()
def toy_backend() -> ToyBackend:
    """Default toy geometry (64x64 grid, 77 x 768 embeddings) on a 128 px input."""
    return ToyBackend(seed=0, input_size=TOY_INPUT)


@pytest.fixture()
def small_backend() -> ToyBackend:
    """Tiny geometry for exhaustive numeric checks."""
    return ToyBackend(grid=(8, 8), tokens=6, dim=12, seed=3, input_size=32)


@pytest.fixture()
def ramp_image() -> ImageRecord:
    return coordinate_image("ramp", TOY_INPUT, TOY_INPUT)


@pytest.fixture()
def fast_hp() -> HyperParams:
    return HyperParams(opt_steps=8, n_embeddings=2, n_inference_crops=3)


def write_png(path: Path, record: ImageRecord) -> Path:
    assert record.pixels is not None
    pixels = np.round(record.pixels * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    return path
