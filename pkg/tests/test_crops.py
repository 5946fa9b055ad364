"""Tests for crop sampling and the crop coordinate algebra."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from scipy import stats

from src.attnmap import gaussian_target
from src.crops import (
    CropTransform,
    contains,
    crop_image,
    crop_map,
    sample_crop,
    sample_inference_crops,
    uncrop_map,
)
from src.errors import OptimizationError
from src.images import coordinate_image, to_tensor
from src.models import CropParams, Point
from src.utils import numpy_rng


def _ramp_tensor(size: int = 128) -> torch.Tensor:
    record = coordinate_image("ramp", size, size)
    assert record.pixels is not None
    return to_tensor(record.pixels).to(torch.float64)


class TestCropTransform:
    def test_round_trip(self) -> None:
        t = CropTransform(CropParams(scale=0.6, dx=0.1, dy=0.3))
        x, y = t.to_full(*t.to_crop(0.42, 0.57))
        assert x == pytest.approx(0.42)
        assert y == pytest.approx(0.57)

    def test_point_to_crop(self) -> None:
        t = CropTransform(CropParams(scale=0.5, dx=0.25, dy=0.0))
        p = t.point_to_crop(Point(x=0.5, y=0.25))
        assert p.as_tuple() == pytest.approx((0.5, 0.5))

    def test_point_outside_is_clamped(self) -> None:
        t = CropTransform(CropParams(scale=0.5, dx=0.5, dy=0.5))
        assert t.point_to_crop(Point(x=0.1, y=0.1)).as_tuple() == (0.0, 0.0)


class TestSampleCrop:
    def test_full_scale_is_identity(self) -> None:
        assert sample_crop(numpy_rng(0), 1.0, must_contain=Point(x=0.0, y=0.0)).is_identity

    def test_always_contains_query(self) -> None:
        rng = numpy_rng(3)
        query = Point(x=0.05, y=0.93)
        for _ in range(500):
            crop = sample_crop(rng, 0.6, must_contain=query)
            assert contains(crop, query, margin=0.01 - 1e-9)
            assert 0.0 <= crop.dx <= 0.4 + 1e-9
            assert 0.0 <= crop.dy <= 0.4 + 1e-9

    def test_conditional_offset_is_uniform(self) -> None:
        rng = numpy_rng(7)
        query = Point(x=0.4, y=0.5)
        dx = np.array([sample_crop(rng, 0.5, must_contain=query).dx for _ in range(2000)])
        # feasible dx: [0, 0.4 - 0.5 * 0.01]
        result = stats.kstest(dx, "uniform", args=(0.0, 0.395))
        assert result.pvalue > 0.01

    def test_unconditional_range(self) -> None:
        rng = numpy_rng(1)
        crops = [sample_crop(rng, 0.8) for _ in range(200)]
        assert all(0.0 <= c.dx <= 0.2 and 0.0 <= c.dy <= 0.2 for c in crops)

    def test_same_seed_same_crops(self) -> None:
        a = [sample_crop(numpy_rng(5), 0.7, Point(x=0.3, y=0.3)) for _ in range(3)]
        b = [sample_crop(numpy_rng(5), 0.7, Point(x=0.3, y=0.3)) for _ in range(3)]
        assert a == b

    @pytest.mark.parametrize("x", [0.0, 0.005, 0.995, 1.0])
    def test_border_query_gets_flush_crop(self, x: float) -> None:
        rng = numpy_rng(11)
        query = Point(x=x, y=0.5)
        for _ in range(50):
            crop = sample_crop(rng, 0.9317, must_contain=query)
            assert crop.dx == pytest.approx(0.0 if x < 0.5 else 1.0 - 0.9317)
            cx, cy = CropTransform(crop).to_crop(query.x, query.y)
            assert -1e-9 <= cx <= 1.0 + 1e-9
            assert 0.01 - 1e-9 <= cy <= 0.99 + 1e-9

    def test_corner_query(self) -> None:
        crop = sample_crop(numpy_rng(0), 0.6, must_contain=Point(x=1.0, y=0.0))
        assert (crop.dx, crop.dy) == pytest.approx((0.4, 0.0))

    def test_infeasible_margin(self) -> None:
        with pytest.raises(OptimizationError, match="no crop"):
            sample_crop(numpy_rng(0), 0.5, must_contain=Point(x=0.4, y=0.4), margin=0.6)

    def test_bad_scale(self) -> None:
        with pytest.raises(ValueError, match="crop scale"):
            sample_crop(numpy_rng(0), 0.0)


class TestInferenceCrops:
    def test_identity_first(self) -> None:
        crops = sample_inference_crops(numpy_rng(0), 0.9, 5)
        assert len(crops) == 5
        assert crops[0].is_identity
        assert all(c.scale == pytest.approx(0.9) for c in crops[1:])

    def test_single_crop(self) -> None:
        assert sample_inference_crops(numpy_rng(0), 0.9, 1) == [CropParams.identity()]


class TestCropImage:
    def test_identity_returns_input(self) -> None:
        x = _ramp_tensor(32)
        out, _ = crop_image(x, CropParams.identity())
        assert out is x

    def test_content_follows_crop(self) -> None:
        x = _ramp_tensor(128)
        crop = CropParams(scale=0.5, dx=0.25, dy=0.25)
        out, transform = crop_image(x, crop)
        assert tuple(out.shape) == (3, 128, 128)
        centers = (torch.arange(128, dtype=torch.float64) + 0.5) / 128
        fx, fy = transform.to_full(centers, centers)
        assert torch.allclose(out[0, 0], fx, atol=1e-6)
        assert torch.allclose(out[1, :, 0], fy, atol=1e-6)


class TestCropMaps:
    def test_crop_frame_gaussian(self) -> None:
        query = Point(x=0.55, y=0.45)
        sigma = 20.0
        crop = CropParams(scale=0.6, dx=0.2, dy=0.1)
        full = gaussian_target(query, sigma, (512, 512)).values
        viewed = crop_map(full, crop, (64, 64))
        inner = CropTransform(crop).point_to_crop(query)
        expected = gaussian_target(inner, sigma / crop.scale, (64, 64)).values
        assert float((viewed - expected).abs().max()) < 1e-3

    def test_uncrop_identity_full_coverage(self) -> None:
        values = torch.rand(4, 4, dtype=torch.float64)
        placed, coverage = uncrop_map(values, CropParams.identity(), (8, 8))
        assert tuple(placed.shape) == (8, 8)
        assert bool((coverage == 1).all())

    def test_uncrop_corner_coverage(self) -> None:
        ones = torch.ones(8, 8, dtype=torch.float64)
        placed, coverage = uncrop_map(ones, CropParams(scale=0.5, dx=0.0, dy=0.0), (8, 8))
        assert float(coverage.sum()) == 16.0
        assert bool((coverage[:4, :4] == 1).all())
        assert torch.equal(placed, coverage)

    def test_crop_then_uncrop_recovers_covered_cells(self) -> None:
        xs = (torch.arange(64, dtype=torch.float64) + 0.5) / 64
        linear = xs[None, :].expand(64, 64).clone()
        crop = CropParams(scale=0.5, dx=0.25, dy=0.25)
        placed, coverage = uncrop_map(crop_map(linear, crop, (64, 64)), crop, (64, 64))
        covered = coverage > 0
        assert torch.allclose(placed[covered], linear[covered], atol=1e-6)
