"""Denoiser backends: latent encoding, forward noising and cross-attention capture.

A backend turns (image, timestep, embedding) into per-layer cross-attention
probabilities. ``checkpoint_backend.CheckpointBackend`` wraps a pretrained
latent-diffusion U-Net; ``ToyBackend`` is an analytic stand-in whose attention
is a closed-form function of image position, used for tests and smoke runs.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict

from .errors import BackendError
from .images import network_input
from .models import NETWORK_INPUT_SIZE, UNET_LAYER_COUNT, ImageRecord, Point
from .utils import logger, torch_generator


class LayerGeometry(BaseModel):
    """Spatial grid, per-head width and head count of one cross-attention layer."""

    model_config = ConfigDict(frozen=True)

    index: int
    height: int
    width: int
    head_dim: int
    heads: int

    @property
    def channels(self) -> int:
        return self.head_dim * self.heads


class BackendDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    latent_shape: tuple[int, int, int]
    layers: dict[int, LayerGeometry]
    tokens: int
    dim: int
    supports_gradients: bool
    input_size: int = NETWORK_INPUT_SIZE


# (grid side, per-head width) for the 16 cross-attention layers of the
# reference U-Net: contracting 0-5, bottleneck 6, expansive 7-15.
SD_V14_LAYER_TABLE: tuple[tuple[int, int], ...] = (
    (64, 40), (64, 40), (32, 80), (32, 80), (16, 160), (16, 160),
    (8, 160),
    (16, 160), (16, 160), (16, 160), (32, 80), (32, 80), (32, 80), (64, 40), (64, 40), (64, 40),
)
SD_V14_HEADS = 8


def sd_v14_geometry() -> dict[int, LayerGeometry]:
    return {
        i: LayerGeometry(index=i, height=side, width=side, head_dim=d, heads=SD_V14_HEADS)
        for i, (side, d) in enumerate(SD_V14_LAYER_TABLE)
    }


@dataclass(frozen=True)
class LatentCode:
    z: torch.Tensor
    timestep: int
    noise_seed: int
    total_steps: int = 50


@dataclass(frozen=True)
class AttentionStack:
    """Per-layer probabilities shaped (heads, h*w, P), softmax over P."""

    probs: dict[int, torch.Tensor]
    geometry: dict[int, LayerGeometry]

    @property
    def layers(self) -> list[int]:
        return list(self.probs)

    @property
    def tokens(self) -> int:
        return next(iter(self.probs.values())).shape[-1]

    def row_sum_error(self) -> float:
        """Largest deviation of any (head, position) token sum from 1."""
        worst = 0.0
        for a in self.probs.values():
            worst = max(worst, float((a.detach().sum(dim=-1) - 1.0).abs().max()))
        return worst


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

class NoiseSchedule:
    """Cumulative signal fractions alpha_bar over the training timesteps."""

    def __init__(self, betas: torch.Tensor) -> None:
        betas = betas.to(torch.float64)
        if betas.ndim != 1 or betas.numel() == 0:
            raise ValueError("betas must be a non-empty 1-D tensor")
        self.betas = betas
        self.alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)

    @classmethod
    def scaled_linear(
        cls, beta_start: float = 0.00085, beta_end: float = 0.012, train_steps: int = 1000,
    ) -> NoiseSchedule:
        return cls(torch.linspace(beta_start**0.5, beta_end**0.5, train_steps, dtype=torch.float64) ** 2)

    @classmethod
    def linear(cls, beta_start: float, beta_end: float, train_steps: int = 1000) -> NoiseSchedule:
        return cls(torch.linspace(beta_start, beta_end, train_steps, dtype=torch.float64))

    @property
    def train_steps(self) -> int:
        return self.betas.numel()

    def train_timestep(self, t: int, total_steps: int) -> int:
        """Training timestep visited at step t of a total_steps inference schedule."""
        if not 1 <= t <= total_steps:
            raise BackendError(f"timestep out of range: {t} not in 1..{total_steps}")
        return min(t * (self.train_steps // total_steps), self.train_steps - 1)

    def alpha_bar(self, t: int, total_steps: int) -> float:
        return float(self.alphas_cumprod[self.train_timestep(t, total_steps)])


# ---------------------------------------------------------------------------
# Backend contract
# ---------------------------------------------------------------------------

class Backend(ABC):
    """Frozen denoiser seen as a differentiable map to attention probabilities.

    Instances are not reentrant; use one per worker. ``calls`` counts encode
    and attention passes so callers can verify caching.
    """

    def __init__(
        self,
        descriptor: BackendDescriptor,
        schedule: NoiseSchedule,
        device: str | torch.device = "cpu",
        dtype: torch.dtype = torch.float32,
    ) -> None:
        self.descriptor = descriptor
        self.schedule = schedule
        self.device = torch.device(device)
        self.dtype = dtype
        self.calls: Counter[str] = Counter()

    @property
    def name(self) -> str:
        return self.descriptor.name

    @abstractmethod
    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        """(3, S, S) pixels -> (C, h, w) latent."""

    @abstractmethod
    def _attention(
        self, z: torch.Tensor, train_timestep: int, e: torch.Tensor, layers: tuple[int, ...],
    ) -> dict[int, torch.Tensor]:
        """Per-layer (heads, h*w, P) probabilities for one conditional pass."""

    def input_tensor(self, image: ImageRecord | torch.Tensor) -> torch.Tensor:
        if isinstance(image, ImageRecord):
            return network_input(
                image, self.descriptor.input_size, dtype=self.dtype, device=self.device,
            )
        return image.to(device=self.device, dtype=self.dtype)

    def encode(self, image: ImageRecord | torch.Tensor) -> torch.Tensor:
        """Deterministic latent z_0 of an image or a (3, S, S) input tensor."""
        x = self.input_tensor(image)
        size = self.descriptor.input_size
        if tuple(x.shape) != (3, size, size):
            raise BackendError(f"encode expects a 3x{size}x{size} input, got {tuple(x.shape)}")
        self.calls["encode"] += 1
        with torch.no_grad():
            z = self._encode(x)
        if tuple(z.shape) != self.descriptor.latent_shape:
            raise BackendError(
                f"latent shape {tuple(z.shape)} != declared {self.descriptor.latent_shape}"
            )
        return z

    def add_noise(self, z0: torch.Tensor, t: int, seed: int, total_steps: int = 50) -> LatentCode:
        """z_t = sqrt(alpha_bar) z_0 + sqrt(1 - alpha_bar) eps, eps seeded by ``seed``."""
        alpha_bar = self.schedule.alpha_bar(t, total_steps)
        eps = torch.randn(z0.shape, generator=torch_generator(seed), dtype=z0.dtype)
        eps = eps.to(z0.device)
        z = math.sqrt(alpha_bar) * z0 + math.sqrt(1.0 - alpha_bar) * eps
        return LatentCode(z=z, timestep=t, noise_seed=seed, total_steps=total_steps)

    def check_layers(self, layers: Iterable[int]) -> tuple[int, ...]:
        layers = tuple(layers)
        if not layers:
            raise BackendError("empty layer set")
        for layer in layers:
            if layer not in self.descriptor.layers:
                raise BackendError(
                    f"unsupported layer index {layer} (backend has {len(self.descriptor.layers)})"
                )
        return layers

    def attention_forward(
        self, latent: LatentCode, e: torch.Tensor, layers: Iterable[int],
    ) -> AttentionStack:
        layers = self.check_layers(layers)
        expected = (self.descriptor.tokens, self.descriptor.dim)
        if tuple(e.shape) != expected:
            raise BackendError(f"embedding shape {tuple(e.shape)} != backend {expected}")
        if e.requires_grad and not self.descriptor.supports_gradients:
            raise BackendError(f"backend {self.name} does not support gradients")
        self.calls["attention"] += 1
        train_t = self.schedule.train_timestep(latent.timestep, latent.total_steps)
        probs = self._attention(latent.z, train_t, e, layers)
        return AttentionStack(
            probs=probs,
            geometry={layer: self.descriptor.layers[layer] for layer in layers},
        )


# ---------------------------------------------------------------------------
# Toy backend
# ---------------------------------------------------------------------------

TOY_FREQUENCIES = (0.5, 1.0)
TOY_HEAD_GAINS = (2.0, 1.5)
TOY_PLANTED_AMPLITUDE = 3.0
TOY_FEATURES = 1 + 4 * len(TOY_FREQUENCIES)


def cross_attention(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) over the token axis. q: (..., n, d), k: (P, d)."""
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1)


def fourier_features(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Low-frequency features of two coordinate fields, stacked on a new last axis."""
    feats = [torch.ones_like(u)]
    for coord in (u, v):
        for f in TOY_FREQUENCIES:
            angle = 2.0 * math.pi * f * coord
            feats.extend([torch.cos(angle), torch.sin(angle)])
    return torch.stack(feats, dim=-1)


class ToyBackend(Backend):
    """Analytic backend: queries are Fourier features of position, keys = e W.

    encode average-pools the input to the latent grid with channels
    (R, G, B, luma). Queries read the R and G channels as (x, y) position,
    so on ``images.coordinate_image`` they are exact functions of location and
    under crops they stay attached to image content. All 16 layers share the
    latent grid and differ only by a seeded gain.
    """

    def __init__(
        self,
        grid: tuple[int, int] = (64, 64),
        tokens: int = 77,
        dim: int = 768,
        seed: int = 0,
        schedule: NoiseSchedule | None = None,
        dtype: torch.dtype = torch.float64,
        device: str | torch.device = "cpu",
        input_size: int = NETWORK_INPUT_SIZE,
    ) -> None:
        h, w = grid
        heads = len(TOY_HEAD_GAINS)
        layers = {
            i: LayerGeometry(index=i, height=h, width=w, head_dim=TOY_FEATURES, heads=heads)
            for i in range(UNET_LAYER_COUNT)
        }
        descriptor = BackendDescriptor(
            name="toy",
            latent_shape=(4, h, w),
            layers=layers,
            tokens=tokens,
            dim=dim,
            supports_gradients=True,
            input_size=input_size,
        )
        # Nearly noiseless so position channels survive forward noising.
        schedule = schedule or NoiseSchedule.linear(1e-10, 1e-8)
        super().__init__(descriptor, schedule, device=device, dtype=dtype)
        self.seed = seed
        gen = torch_generator(seed)
        self.projection = (
            torch.randn(dim, TOY_FEATURES, generator=gen, dtype=torch.float64) / math.sqrt(dim)
        ).to(device=self.device, dtype=dtype)
        self.layer_gains = (
            1.0 + 0.1 * (2.0 * torch.rand(UNET_LAYER_COUNT, generator=gen, dtype=torch.float64) - 1.0)
        ).to(device=self.device, dtype=dtype)
        self.head_gains = torch.tensor(TOY_HEAD_GAINS, device=self.device, dtype=dtype)

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        h, w = self.descriptor.latent_shape[1:]
        rgb = F.adaptive_avg_pool2d(x.unsqueeze(0), (h, w)).squeeze(0)
        luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
        return torch.cat([rgb, luma.unsqueeze(0)], dim=0)

    def layer_queries(self, z: torch.Tensor, layer: int) -> torch.Tensor:
        """(heads, h*w, d) queries of one layer."""
        geom = self.descriptor.layers[layer]
        pos = F.adaptive_avg_pool2d(z[:2].unsqueeze(0), (geom.height, geom.width)).squeeze(0)
        phi = fourier_features(pos[0].reshape(-1), pos[1].reshape(-1))
        gains = self.head_gains * self.layer_gains[layer]
        return gains[:, None, None] * phi.unsqueeze(0)

    def keys(self, e: torch.Tensor) -> torch.Tensor:
        return e.to(self.dtype) @ self.projection

    def _attention(
        self, z: torch.Tensor, train_timestep: int, e: torch.Tensor, layers: tuple[int, ...],
    ) -> dict[int, torch.Tensor]:
        k = self.keys(e)
        z = z.to(device=self.device, dtype=self.dtype)
        return {layer: cross_attention(self.layer_queries(z, layer), k) for layer in layers}

    def planted_embedding(self, query: Point, token_index: int = 1) -> torch.Tensor:
        """Closed-form embedding whose token map is a bump at ``query``.

        The chosen token's keys are the features of the query position, every
        other row is zero, so its logit is a sum of cosines of the offset from
        the query and peaks exactly there.
        """
        q = torch.tensor([query.x, query.y], dtype=torch.float64)
        k_star = TOY_PLANTED_AMPLITUDE * fourier_features(q[0:1], q[1:2])[0]
        row = k_star @ torch.linalg.pinv(self.projection.to(torch.float64).cpu())
        e_star = torch.zeros(self.descriptor.tokens, self.descriptor.dim, dtype=torch.float64)
        e_star[token_index] = row
        return e_star.to(device=self.device, dtype=self.dtype)


def make_toy_backend(
    grid: tuple[int, int] = (64, 64),
    tokens: int = 77,
    dim: int = 768,
    planted_query: Point | None = None,
    seed: int = 0,
    **kwargs: object,
) -> tuple[ToyBackend, torch.Tensor]:
    """Build a toy backend and the planted embedding for ``planted_query``."""
    backend = ToyBackend(grid=grid, tokens=tokens, dim=dim, seed=seed, **kwargs)  # type: ignore[arg-type]
    query = planted_query or Point(x=0.5, y=0.5)
    logger.debug("Toy backend grid=%s P=%d D=%d planted at %s", grid, tokens, dim, query.as_tuple())
    return backend, backend.planted_embedding(query)


def create_backend(
    name: str,
    checkpoint_path: object = None,
    device: str = "auto",
    seed: int = 0,
) -> Backend:
    """Instantiate the backend selected by ``backend = toy|checkpoint``."""
    if name == "toy":
        return ToyBackend(seed=seed)
    if name == "checkpoint":
        from .checkpoint_backend import CheckpointBackend

        if checkpoint_path is None:
            raise BackendError("checkpoint backend needs checkpoint_path")
        return CheckpointBackend.load(checkpoint_path, device=device)  # type: ignore[arg-type]
    raise BackendError(f"unknown backend {name!r}")
