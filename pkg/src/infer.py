"""Apply optimised embeddings to target images and localise the attention peak."""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .attnmap import AggregatedMap, aggregate, layer_maps, resample
from .backend import Backend
from .crops import crop_image, sample_inference_crops, uncrop_map
from .embedding_cache import EmbeddingCache
from .errors import FormatError, MapError, MatchError, OptimizationError
from .models import (
    NETWORK_INPUT_SIZE,
    CropParams,
    EmbeddingEnsemble,
    HyperParams,
    ImageRecord,
    MatchResult,
    Point,
    PromptEmbedding,
)
from .optim import optimize_ensemble
from .utils import atomic_write_text, format_coord, logger, numpy_rng

AVERAGE = -1


class Peak(NamedTuple):
    point: Point
    value: float
    degenerate: bool


# ---------------------------------------------------------------------------
# Crop-averaged attention
# ---------------------------------------------------------------------------

def _crop_latents(
    backend: Backend, target: ImageRecord | torch.Tensor, crops: Sequence[CropParams],
) -> list[torch.Tensor]:
    x = backend.input_tensor(target)
    return [backend.encode(crop_image(x, c)[0]) for c in crops]


def _accumulate(
    backend: Backend,
    members: Sequence[PromptEmbedding],
    latents: Sequence[torch.Tensor],
    crops: Sequence[CropParams],
    hp: HyperParams,
    per_layer: bool,
) -> dict[int, torch.Tensor]:
    """Coverage-weighted crop mean, then member mean, keyed by layer (AVERAGE = all)."""
    res = hp.loss_resolution
    member_maps: dict[int, list[torch.Tensor]] = {}
    for member in members:
        e = torch.as_tensor(member.matrix).to(device=backend.device, dtype=backend.dtype)
        sums: dict[int, torch.Tensor] = {}
        coverage: torch.Tensor | None = None
        for z0, crop in zip(latents, crops):
            latent = backend.add_noise(z0, hp.timestep, member.provenance.seed, hp.total_steps)
            with torch.no_grad():
                stack = backend.attention_forward(latent, e, hp.layers)
                maps = {AVERAGE: aggregate(stack, member.token_index, res).values}
                if per_layer:
                    maps.update(layer_maps(stack, member.token_index, res))
            for key, values in maps.items():
                placed, cov = uncrop_map(values, crop, res)
                sums[key] = sums[key] + placed if key in sums else placed
            coverage = cov if coverage is None else coverage + cov
        assert coverage is not None
        covered = coverage > 0
        for key, total in sums.items():
            mean = torch.where(covered, total / coverage.clamp(min=1.0), torch.zeros_like(total))
            member_maps.setdefault(key, []).append(mean)
    return {key: torch.stack(maps).mean(dim=0) for key, maps in member_maps.items()}


def target_attention(
    backend: Backend,
    e: PromptEmbedding,
    target: ImageRecord | torch.Tensor,
    crops: Sequence[CropParams],
    hp: HyperParams,
) -> AggregatedMap:
    """Token map of every crop placed back into the full frame, coverage-weighted.

    Full-frame cells outside every crop are 0.
    """
    if not crops:
        raise MapError("empty crop list")
    latents = _crop_latents(backend, target, crops)
    return AggregatedMap(values=_accumulate(backend, [e], latents, crops, hp, False)[AVERAGE])


def ensemble_attention(
    backend: Backend,
    ensemble: EmbeddingEnsemble,
    target: ImageRecord | torch.Tensor,
    crops: Sequence[CropParams],
    hp: HyperParams,
) -> AggregatedMap:
    """Unweighted mean of target_attention over ensemble members."""
    if not crops:
        raise MapError("empty crop list")
    latents = _crop_latents(backend, target, crops)
    return AggregatedMap(
        values=_accumulate(backend, ensemble.members, latents, crops, hp, False)[AVERAGE]
    )


def layer_attention(
    backend: Backend,
    ensemble: EmbeddingEnsemble,
    target: ImageRecord | torch.Tensor,
    crops: Sequence[CropParams],
    hp: HyperParams,
) -> dict[int, AggregatedMap]:
    """Per-layer full-frame maps plus the layer average under key AVERAGE."""
    if not crops:
        raise MapError("empty crop list")
    latents = _crop_latents(backend, target, crops)
    maps = _accumulate(backend, ensemble.members, latents, crops, hp, True)
    return {key: AggregatedMap(values=v) for key, v in maps.items()}


# ---------------------------------------------------------------------------
# Localisation
# ---------------------------------------------------------------------------

def localize(amap: AggregatedMap | torch.Tensor, size: int = NETWORK_INPUT_SIZE) -> Peak:
    """Argmax of the map bilinearly upsampled to size x size.

    Ties go to the smallest row-major index. A flat map has no peak and
    returns (0, 0) flagged degenerate.
    """
    values = amap.values if isinstance(amap, AggregatedMap) else amap
    values = values.detach()
    if not torch.isfinite(values).all():
        raise MapError("cannot localize a map with non-finite values")
    if float(values.max()) == float(values.min()):
        return Peak(Point(x=0.0, y=0.0), float(values.max()), True)
    up = resample(values, (size, size))
    flat = int(torch.argmax(up.reshape(-1)))
    i, j = divmod(flat, size)
    point = Point(x=(j + 0.5) / size, y=(i + 0.5) / size)
    return Peak(point, float(up[i, j]), False)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def load_or_optimize(
    backend: Backend,
    source: ImageRecord,
    query: Point,
    hp: HyperParams,
    seed: int,
    cache: EmbeddingCache | None = None,
    augment: bool = True,
) -> EmbeddingEnsemble:
    if cache is not None:
        hit = cache.get(source.id, query)
        if hit is not None:
            return hit
    ensemble = optimize_ensemble(
        backend, source, query, hp, seed,
        augment=augment, digest=cache.config_digest if cache else None,
    )
    if cache is not None:
        cache.put(ensemble)
    return ensemble


def match_keypoints(
    backend: Backend,
    source: ImageRecord,
    queries: Sequence[Point],
    targets: ImageRecord | Sequence[ImageRecord],
    hp: HyperParams,
    seed: int,
    cache: EmbeddingCache | None = None,
    augment: bool = True,
    keep_heatmaps: bool = False,
) -> list[MatchResult]:
    """One ensemble per (source, query), applied to every target.

    Results are query-major: for each query, one MatchResult per target.
    """
    if not queries:
        raise MatchError("empty query list")
    target_list = [targets] if isinstance(targets, ImageRecord) else list(targets)
    if not target_list:
        raise MatchError("empty target list")

    crops = {t.id: sample_inference_crops(numpy_rng(seed), hp.crop_fraction, hp.n_inference_crops)
             for t in target_list}
    latents = {t.id: _crop_latents(backend, t, crops[t.id]) for t in target_list}

    results: list[MatchResult] = []
    for qi, query in enumerate(queries):
        try:
            ensemble = load_or_optimize(backend, source, query, hp, seed, cache, augment)
        except OptimizationError as exc:
            raise exc.with_query(qi) from exc
        for target in target_list:
            values = _accumulate(
                backend, ensemble.members, latents[target.id], crops[target.id], hp, False,
            )[AVERAGE]
            peak = localize(values)
            if peak.degenerate:
                logger.warning("Degenerate attention map for query %d on %s", qi, target.id)
            results.append(MatchResult(
                source_id=source.id,
                target_id=target.id,
                query=query,
                predicted=peak.point,
                peak_value=peak.value,
                degenerate=peak.degenerate,
                heatmap=values.detach().cpu().numpy() if keep_heatmaps else None,
            ))
    return results


# ---------------------------------------------------------------------------
# Result lines
# ---------------------------------------------------------------------------

RESULT_FIELDS = ("source_id", "target_id", "qx", "qy", "px", "py", "peak", "flags")


def result_row(r: MatchResult) -> list[str]:
    return [
        r.source_id,
        r.target_id,
        format_coord(r.query.x),
        format_coord(r.query.y),
        format_coord(r.predicted.x),
        format_coord(r.predicted.y),
        format_coord(r.peak_value),
        r.flags,
    ]


def format_results(results: Sequence[MatchResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for r in results:
        writer.writerow(result_row(r))
    return buf.getvalue()


def parse_results(text: str) -> list[MatchResult]:
    results = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row:
            continue
        if len(row) != len(RESULT_FIELDS):
            raise FormatError(f"result line {lineno}: expected {len(RESULT_FIELDS)} fields, got {len(row)}")
        try:
            src, tgt, qx, qy, px, py, peak, flags = (c.strip() for c in row)
            results.append(MatchResult(
                source_id=src,
                target_id=tgt,
                query=Point(x=float(qx), y=float(qy)),
                predicted=Point(x=float(px), y=float(py)),
                peak_value=float(peak),
                degenerate=flags == "degenerate",
            ))
        except ValueError as exc:
            raise FormatError(f"result line {lineno}: {exc}") from exc
    return results


def write_results(path: Path, results: Sequence[MatchResult]) -> Path:
    return atomic_write_text(Path(path), format_results(results))


def read_results(path: Path) -> list[MatchResult]:
    return parse_results(Path(path).read_text(encoding="utf-8"))


def heatmap_array(result: MatchResult) -> np.ndarray:
    if result.heatmap is None:
        raise MapError(f"no heatmap kept for {result.source_id} -> {result.target_id}")
    return result.heatmap
