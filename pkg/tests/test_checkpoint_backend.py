"""Tests for the pretrained-checkpoint adapter.

The pretrained checks need real weights and a GPU; they run only when
DIFFMATCH_CHECKPOINT points at a checkpoint and CUDA is available. The
accuracy checks also need the matching DIFFMATCH_<DATASET>_ROOT.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import pytest
import torch
from torch import nn

from src.checkpoint_backend import CheckpointBackend, cross_attention_modules
from src.config import Config
from src.datasets import load_pfwillow, load_spair, subsample_correspondences
from src.errors import BackendError
from src.evaluation import evaluate_pairs
from src.images import coordinate_image


class _Block(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.attn1 = nn.Identity()
        self.attn2 = nn.Identity()


class _FakeUnet(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        # registered out of order on purpose
        self.up_blocks = nn.ModuleList([_Block(), _Block()])
        self.mid_block = _Block()
        self.down_blocks = nn.ModuleList([_Block()])


class TestCrossAttentionModules:
    def test_contracting_then_bottleneck_then_expansive(self) -> None:
        names = [name for name, _ in cross_attention_modules(_FakeUnet())]
        assert names == ["down_blocks.0.attn2", "mid_block.attn2", "up_blocks.0.attn2", "up_blocks.1.attn2"]


class TestLoad:
    def test_missing_path(self, tmp_path: Path) -> None:
        with pytest.raises(BackendError, match="checkpoint not found"):
            CheckpointBackend.load(tmp_path / "sd-v1-4.ckpt")


_CKPT = os.getenv("DIFFMATCH_CHECKPOINT")


@pytest.mark.skipif(
    _CKPT is None or not torch.cuda.is_available(),
    reason="DIFFMATCH_CHECKPOINT not set or no CUDA device",
)
class TestPretrained:
    @pytest.fixture(scope="class")
    def backend(self) -> CheckpointBackend:
        return CheckpointBackend.load(_CKPT, device="cuda")  # type: ignore[arg-type]

    def test_latent_shape(self, backend: CheckpointBackend) -> None:
        z = backend.encode(coordinate_image())
        assert tuple(z.shape) == (4, 64, 64)

    def test_attention_is_row_stochastic_and_differentiable(self, backend: CheckpointBackend) -> None:
        latent = backend.add_noise(backend.encode(coordinate_image()), 8, seed=0)
        e = torch.randn(77, 768, device=backend.device, requires_grad=True)
        stack = backend.attention_forward(latent, e, (7, 8, 9, 10))
        assert stack.layers == [7, 8, 9, 10]
        for layer, probs in stack.probs.items():
            geom = stack.geometry[layer]
            assert tuple(probs.shape) == (geom.heads, geom.height * geom.width, 77)
        assert stack.row_sum_error() < 1e-3
        sum(p[..., 1].mean() for p in stack.probs.values()).backward()
        assert e.grad is not None
        assert torch.isfinite(e.grad).all()


def _root(name: str) -> Path | None:
    value = os.getenv(f"DIFFMATCH_{name}_ROOT")
    return Path(value) if value else None


def _pretrained_config(cache: Path, preset: str) -> Config:
    return Config(
        backend="checkpoint", checkpoint_path=Path(_CKPT or ""), device="cuda", cache_dir=cache,
    ).with_preset(preset)


@pytest.mark.skipif(
    _CKPT is None or not torch.cuda.is_available(),
    reason="DIFFMATCH_CHECKPOINT not set or no CUDA device",
)
class TestPublishedAccuracy:
    @pytest.mark.skipif(_root("PFWILLOW") is None, reason="DIFFMATCH_PFWILLOW_ROOT not set")
    def test_pfwillow_full(self, tmp_path: Path) -> None:
        pairs = load_pfwillow(_root("PFWILLOW"))  # type: ignore[arg-type]
        run = evaluate_pairs(pairs, _pretrained_config(tmp_path, "pfwillow"), dataset="pfwillow")
        assert 100 * run.report.overall(0.1).pck == pytest.approx(84.3, abs=2.0)
        assert 100 * run.report.overall(0.05).pck == pytest.approx(53.0, abs=2.0)

    @pytest.mark.skipif(_root("SPAIR") is None, reason="DIFFMATCH_SPAIR_ROOT not set")
    def test_spair_validation_subset(self, tmp_path: Path) -> None:
        pairs = subsample_correspondences(load_spair(_root("SPAIR"), "val"), 50, seed=0)  # type: ignore[arg-type]
        config = _pretrained_config(tmp_path, "spair")
        start = time.perf_counter()
        run = evaluate_pairs(pairs, config, dataset="spair", use_cache=False)
        per_keypoint = (time.perf_counter() - start) / 50
        assert 100 * run.report.overall(0.1).pck == pytest.approx(45.4, abs=8.0)
        assert per_keypoint <= 90.0

    @pytest.mark.skipif(_root("PFWILLOW") is None, reason="DIFFMATCH_PFWILLOW_ROOT not set")
    def test_single_layers_are_worse_than_average(self, tmp_path: Path) -> None:
        pairs = subsample_correspondences(load_pfwillow(_root("PFWILLOW"))[:2], 20, seed=0)  # type: ignore[arg-type]
        run = evaluate_pairs(pairs, _pretrained_config(tmp_path, "pfwillow"), per_layer=True)
        averaged = run.report.overall(0.1).pck
        for report in run.layer_reports.values():
            assert report.overall(0.1).pck < averaged
