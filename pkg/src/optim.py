"""Prompt-embedding optimisation against a Gaussian attention target."""

from __future__ import annotations

import json
import math

import numpy as np
import torch

from .attnmap import aggregate, gaussian_target
from .backend import Backend
from .crops import crop_image, sample_crop
from .errors import BackendError, OptimizationError
from .models import CropParams, EmbeddingEnsemble, HyperParams, ImageRecord, Point, PromptEmbedding, Provenance
from .utils import logger, numpy_rng, short_digest, torch_generator

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
DIVERGENCE_FACTOR = 10.0


def hp_digest(hp: HyperParams) -> str:
    return short_digest(json.dumps(hp.model_dump(), sort_keys=True))


def initial_embedding(tokens: int, dim: int, seed: int) -> torch.Tensor:
    """Unit-Gaussian P x D matrix drawn from a generator seeded by ``seed``."""
    return torch.randn(tokens, dim, generator=torch_generator(seed), dtype=torch.float32)


def embedding_loss(
    backend: Backend,
    x: torch.Tensor,
    query: Point,
    e: torch.Tensor,
    hp: HyperParams,
    noise_seed: int,
    crop: CropParams | None = None,
) -> torch.Tensor:
    """Squared error between the token map of the cropped image and the crop-frame target."""
    crop = crop or CropParams.identity()
    x_c, transform = crop_image(x, crop)
    latent = backend.add_noise(backend.encode(x_c), hp.timestep, noise_seed, hp.total_steps)
    stack = backend.attention_forward(latent, e, hp.layers)
    amap = aggregate(stack, hp.token_index, hp.loss_resolution)
    target = gaussian_target(
        transform.point_to_crop(query),
        hp.sigma / crop.scale,
        hp.loss_resolution,
        dtype=amap.values.dtype,
        device=amap.values.device,
    )
    return ((amap.values - target.values) ** 2).sum()


def optimize_embedding(
    backend: Backend,
    image: ImageRecord,
    query: Point,
    hp: HyperParams,
    seed: int,
    *,
    init: torch.Tensor | np.ndarray | None = None,
    augment: bool = True,
    digest: str | None = None,
) -> PromptEmbedding:
    """Adam on L(e) with one fresh query-containing crop per step.

    Diffusion noise is drawn once from ``seed`` and held fixed for every step
    and crop of the round. ``augment=False`` uses the identity crop throughout.
    """
    if not backend.descriptor.supports_gradients:
        raise BackendError(f"backend {backend.name} does not support gradients")
    desc = backend.descriptor
    if init is None:
        start = initial_embedding(desc.tokens, desc.dim, seed)
    else:
        start = torch.as_tensor(np.asarray(init) if not isinstance(init, torch.Tensor) else init)
    e = start.to(device=backend.device, dtype=backend.dtype).clone().requires_grad_(True)
    optimizer = torch.optim.Adam([e], lr=hp.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    rng = numpy_rng(seed)
    x = backend.input_tensor(image)

    trace: list[float] = []
    initial = math.nan
    for step in range(hp.opt_steps):
        if augment:
            crop = sample_crop(rng, hp.crop_fraction, must_contain=query)
        else:
            crop = CropParams.identity()
        loss = embedding_loss(backend, x, query, e, hp, seed, crop)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise OptimizationError("non-finite loss", step=step)
        if step == 0:
            initial = value
        elif value > DIVERGENCE_FACTOR * initial:
            raise OptimizationError(
                f"loss diverged ({value:.4g} > {DIVERGENCE_FACTOR:g} x initial {initial:.4g})",
                step=step,
            )
        trace.append(value)

        optimizer.zero_grad()
        loss.backward()
        if e.grad is None:
            raise OptimizationError("gradient unavailable", step=step)
        optimizer.step()
        if step % 10 == 0:
            logger.debug(
                "step %d loss %.5f crop (%.4f, %.4f) scale %.4f",
                step, value, crop.dx, crop.dy, crop.scale,
            )

    return PromptEmbedding(
        matrix=e.detach().cpu().numpy().astype(np.float32),
        token_index=hp.token_index,
        provenance=Provenance(
            source_image_id=image.id,
            query=query,
            seed=seed,
            hp_digest=digest or hp_digest(hp),
        ),
        loss_trace=tuple(trace),
    )


def optimize_ensemble(
    backend: Backend,
    image: ImageRecord,
    query: Point,
    hp: HyperParams,
    base_seed: int,
    *,
    augment: bool = True,
    digest: str | None = None,
) -> EmbeddingEnsemble:
    """R = hp.n_embeddings rounds seeded base_seed .. base_seed + R - 1."""
    members: list[PromptEmbedding] = []
    for member in range(hp.n_embeddings):
        try:
            emb = optimize_embedding(
                backend, image, query, hp, base_seed + member, augment=augment, digest=digest,
            )
        except OptimizationError as exc:
            raise exc.with_member(member) from exc
        logger.info(
            "Round %d/%d final loss %.4f (initial %.4f)",
            member + 1, hp.n_embeddings, emb.final_loss, emb.loss_trace[0],
        )
        members.append(emb)
    return EmbeddingEnsemble(members=tuple(members))
