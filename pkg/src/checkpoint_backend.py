"""Pretrained latent-diffusion v1.4 adapter built on diffusers.

Expected artifact: the published ``sd-v1-4.ckpt`` single-file checkpoint
(SHA256 below) or a diffusers directory with ``unet/`` and ``vae/``
subfolders. Attention is captured by swapping the processor of every
``attn2`` (cross-attention) module; the predicted noise is discarded.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .backend import (
    SD_V14_HEADS,
    Backend,
    BackendDescriptor,
    NoiseSchedule,
    sd_v14_geometry,
)
from .errors import BackendError
from .utils import file_sha256, logger, resolve_device

SD_V14_SHA256 = "fe4efff1e174c627256e44ec2991ba279b3816e364b49f9be2abc0b3ff3f8556"
SD_V14_TOKENS = 77
SD_V14_DIM = 768
VAE_SCALING = 0.18215

_BLOCK_ORDER = ("down_blocks", "mid_block", "up_blocks")


class _CaptureComplete(Exception):
    """Raised inside the U-Net once the last requested layer has been captured."""


class CaptureProcessor:
    """Cross-attention processor that records the softmax probabilities.

    Same arithmetic as the stock processor; probabilities of layers in
    ``wanted`` are stored per call as (heads, h*w, P).
    """

    def __init__(self, owner: CheckpointBackend, index: int) -> None:
        self.owner = owner
        self.index = index

    def __call__(
        self,
        attn: Any,
        hidden_states: torch.Tensor,
        encoder_hidden_states: torch.Tensor | None = None,
        attention_mask: torch.Tensor | None = None,
        **kwargs: Any,
    ) -> torch.Tensor:
        batch_size, sequence_length, _ = hidden_states.shape
        attention_mask = attn.prepare_attention_mask(attention_mask, sequence_length, batch_size)
        context = encoder_hidden_states if encoder_hidden_states is not None else hidden_states

        query = attn.head_to_batch_dim(attn.to_q(hidden_states))
        key = attn.head_to_batch_dim(attn.to_k(context))
        value = attn.head_to_batch_dim(attn.to_v(context))
        probs = attn.get_attention_scores(query, key, attention_mask)

        if self.index in self.owner._wanted:
            self.owner._captured[self.index] = probs[: attn.heads]
            if self.index == self.owner._stop_after:
                raise _CaptureComplete

        out = attn.batch_to_head_dim(torch.bmm(probs, value))
        out = attn.to_out[0](out)
        return attn.to_out[1](out)


def cross_attention_modules(unet: torch.nn.Module) -> list[tuple[str, torch.nn.Module]]:
    """attn2 modules in contracting -> bottleneck -> expansive order."""
    found = [(name, m) for name, m in unet.named_modules() if name.endswith("attn2")]

    def rank(item: tuple[str, torch.nn.Module]) -> int:
        prefix = item[0].split(".", 1)[0]
        return _BLOCK_ORDER.index(prefix) if prefix in _BLOCK_ORDER else len(_BLOCK_ORDER)

    # sorted() is stable, so named_modules order is kept inside each group
    return sorted(found, key=rank)


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=1, min=2, max=30),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def _load_models(path: Path, dtype: torch.dtype) -> tuple[Any, Any]:
    from diffusers import AutoencoderKL, UNet2DConditionModel

    if path.is_file():
        unet = UNet2DConditionModel.from_single_file(str(path), torch_dtype=dtype)
        vae = AutoencoderKL.from_single_file(str(path), torch_dtype=dtype)
    else:
        unet = UNet2DConditionModel.from_pretrained(str(path), subfolder="unet", torch_dtype=dtype)
        vae = AutoencoderKL.from_pretrained(str(path), subfolder="vae", torch_dtype=dtype)
    return unet, vae


class CheckpointBackend(Backend):
    """Frozen U-Net + VAE with differentiable cross-attention capture."""

    def __init__(
        self,
        unet: Any,
        vae: Any,
        device: str | torch.device = "cpu",
        dtype: torch.dtype = torch.float32,
    ) -> None:
        descriptor = BackendDescriptor(
            name="checkpoint",
            latent_shape=(4, 64, 64),
            layers=sd_v14_geometry(),
            tokens=SD_V14_TOKENS,
            dim=SD_V14_DIM,
            supports_gradients=True,
        )
        super().__init__(descriptor, NoiseSchedule.scaled_linear(), device=device, dtype=dtype)
        self.unet = unet.to(self.device, dtype=dtype).eval().requires_grad_(False)
        self.vae = vae.to(self.device, dtype=dtype).eval().requires_grad_(False)
        self._wanted: frozenset[int] = frozenset()
        self._stop_after = -1
        self._captured: dict[int, torch.Tensor] = {}

        modules = cross_attention_modules(self.unet)
        if len(modules) != len(descriptor.layers):
            raise BackendError(
                f"expected {len(descriptor.layers)} cross-attention layers, found {len(modules)}"
            )
        for index, (name, module) in enumerate(modules):
            geom = descriptor.layers[index]
            if module.heads != SD_V14_HEADS or module.inner_dim != geom.channels:
                raise BackendError(
                    f"layer {index} ({name}) has {module.heads} heads x {module.inner_dim} "
                    f"channels, expected {geom.heads} x {geom.channels}"
                )
            module.set_processor(CaptureProcessor(self, index))
            logger.debug("Layer %d -> %s (%dx%d, d=%d)", index, name, geom.height, geom.width, geom.head_dim)

    @classmethod
    def load(
        cls,
        checkpoint_path: Path | str,
        device: str = "auto",
        dtype: torch.dtype = torch.float32,
        verify_digest: bool = False,
    ) -> CheckpointBackend:
        path = Path(checkpoint_path)
        if not path.exists():
            raise BackendError(f"checkpoint not found: {path}")
        if verify_digest and path.is_file():
            digest = file_sha256(path)
            if digest != SD_V14_SHA256:
                logger.warning("Checkpoint digest %s does not match sd-v1-4 (%s)", digest[:10], SD_V14_SHA256[:10])
        logger.info("Loading checkpoint %s", path)
        try:
            unet, vae = _load_models(path, dtype)
        except (OSError, ValueError, KeyError) as exc:
            raise BackendError(f"cannot load checkpoint {path}: {exc}") from exc
        return cls(unet, vae, device=resolve_device(device), dtype=dtype)

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        posterior = self.vae.encode(x.unsqueeze(0) * 2.0 - 1.0).latent_dist
        return posterior.mean[0] * VAE_SCALING

    def _attention(
        self, z: torch.Tensor, train_timestep: int, e: torch.Tensor, layers: tuple[int, ...],
    ) -> dict[int, torch.Tensor]:
        self._wanted = frozenset(layers)
        self._stop_after = max(layers)
        self._captured = {}
        t = torch.tensor([train_timestep], device=self.device)
        try:
            self.unet(
                z.unsqueeze(0).to(self.device, self.dtype),
                t,
                encoder_hidden_states=e.unsqueeze(0).to(self.device, self.dtype),
            )
        except _CaptureComplete:
            pass
        finally:
            self._wanted = frozenset()
        missing = [layer for layer in layers if layer not in self._captured]
        if missing:
            raise BackendError(f"layers {missing} were not visited by the forward pass")
        return {layer: self._captured[layer] for layer in layers}
