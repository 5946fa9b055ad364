"""PCK metrics, report tables and the dataset evaluation runner."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from typing import Literal

from .backend import Backend, create_backend
from .config import Config
from .crops import sample_inference_crops
from .embedding_cache import EmbeddingCache
from .errors import MatchError, OptimizationError
from .infer import AVERAGE, layer_attention, load_or_optimize, localize, match_keypoints
from .models import CorrespondencePair, MatchResult, PckEntry, PckReport, Point
from .utils import logger, map_with_backends, numpy_rng

Reference = Literal["bbox", "image"]

DEFAULT_ALPHAS = (0.05, 0.1)
HISTOGRAM_ALPHA = 0.1
HISTOGRAM_BINS = 10

# Boundary slack so a distance of exactly alpha * ref survives float rounding.
_INCLUSIVE_SLACK = 1e-9

DEFAULT_REFERENCE: dict[str, Reference] = {
    "spair": "bbox",
    "pfwillow": "bbox",
    "cub": "image",
    "synthetic": "bbox",
}

# Published PCK (percent) at alpha = 0.05 / 0.1.
REFERENCE_RESULTS: dict[str, dict[float, float]] = {
    "cub": {0.05: 61.6, 0.1: 77.5},
    "pfwillow": {0.05: 53.0, 0.1: 84.3},
    "spair": {0.05: 28.9, 0.1: 45.4},
}

# Published SPair-71k per-class PCK@0.1 (percent).
SPAIR_REFERENCE_CLASSES: dict[str, float] = {
    "aeroplane": 54.2,
    "bicycle": 45.1,
    "bird": 72.9,
    "boat": 33.6,
    "bottle": 34.4,
    "bus": 34.9,
    "car": 42.9,
    "cat": 66.8,
    "chair": 25.9,
    "cow": 56.5,
    "dog": 49.8,
    "horse": 48.8,
    "motorbike": 46.6,
    "person": 48.8,
    "pottedplant": 30.1,
    "sheep": 33.0,
    "train": 49.1,
    "tvmonitor": 43.9,
    "avg": 45.4,
}

REPORT_FIELDS = ("dataset", "class", "alpha", "correct", "total", "pck")


# ---------------------------------------------------------------------------
# Correctness
# ---------------------------------------------------------------------------

def reference_size(pair: CorrespondencePair, reference: Reference) -> float:
    """max(ref_h, ref_w) in target-image pixels."""
    height, width = pair.target.original_size
    if reference == "image":
        return float(max(height, width))
    if pair.bbox_tgt is None:
        raise MatchError(f"pair {pair.pair_id}: bbox reference requested but target has no bbox")
    h, w = pair.bbox_tgt.size_pixels(width, height)
    return float(max(h, w))


def keypoint_distance(pred: Point, gt: Point, width: int, height: int) -> float:
    return math.hypot((pred.x - gt.x) * width, (pred.y - gt.y) * height)


def keypoint_correct(distance: float, alpha: float, ref_size: float) -> bool:
    """Inclusive: a distance of exactly alpha * ref counts as correct."""
    return distance <= alpha * ref_size * (1.0 + _INCLUSIVE_SLACK)


def histogram_bin(correct: int, total: int) -> int:
    """10%-wide bins, right-open except the last."""
    return min((correct * HISTOGRAM_BINS) // total, HISTOGRAM_BINS - 1)


def _check_alignment(predictions: Sequence[MatchResult], pairs: Sequence[CorrespondencePair]) -> None:
    expected = sum(len(p.keypoints) for p in pairs)
    if len(predictions) != expected:
        raise MatchError(
            f"alignment mismatch: {len(predictions)} predictions for {expected} keypoints"
        )
    i = 0
    for pair in pairs:
        for _ in pair.keypoints:
            pred = predictions[i]
            if pred.target_id != pair.target.id or pred.source_id != pair.source.id:
                raise MatchError(
                    f"alignment mismatch at prediction {i}: "
                    f"{pred.source_id}->{pred.target_id} vs pair {pair.pair_id} "
                    f"({pair.source.id}->{pair.target.id})"
                )
            i += 1


def pck(
    predictions: Sequence[MatchResult],
    pairs: Sequence[CorrespondencePair],
    alphas: float | Iterable[float] = DEFAULT_ALPHAS,
    reference: Reference = "bbox",
    dataset: str = "",
) -> PckReport:
    """Per-class PCK at every alpha plus the per-pair histogram at alpha = 0.1.

    ``predictions`` follow ``pairs`` keypoint by keypoint.
    """
    alpha_list = sorted({float(alphas)} if isinstance(alphas, (int, float)) else set(map(float, alphas)))
    if not alpha_list:
        raise MatchError("no alpha thresholds given")
    if any(a <= 0 for a in alpha_list):
        raise MatchError(f"alpha must be > 0, got {alpha_list}")
    _check_alignment(predictions, pairs)

    counts: dict[tuple[str, float], list[int]] = defaultdict(lambda: [0, 0])
    histogram = [0] * HISTOGRAM_BINS
    n_pairs = 0
    i = 0
    for pair in pairs:
        if not pair.keypoints:
            continue
        height, width = pair.target.original_size
        ref = reference_size(pair, reference)
        hist_correct = 0
        for kp in pair.keypoints:
            dist = keypoint_distance(predictions[i].predicted, kp.target, width, height)
            i += 1
            for alpha in alpha_list:
                slot = counts[(pair.class_name, alpha)]
                slot[0] += int(keypoint_correct(dist, alpha, ref))
                slot[1] += 1
            hist_correct += int(keypoint_correct(dist, HISTOGRAM_ALPHA, ref))
        histogram[histogram_bin(hist_correct, len(pair.keypoints))] += 1
        n_pairs += 1

    entries = tuple(
        PckEntry(class_name=cls, alpha=alpha, correct=c, total=t)
        for (cls, alpha), (c, t) in sorted(counts.items())
    )
    return PckReport(
        dataset=dataset,
        reference=reference,
        entries=entries,
        histogram=tuple(histogram),
        n_pairs=n_pairs,
    )


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenderedTable:
    csv: str
    text: str


def _alpha_label(alpha: float) -> str:
    return f"{alpha:g}"


def _percent(value: float | None) -> str:
    return "-" if value is None else f"{100.0 * value:.1f}"


def _base_name(dataset: str) -> str:
    return dataset.split(":", 1)[0]


def _csv_rows(report: PckReport) -> list[list[str]]:
    rows = []
    for entry in report.entries:
        rows.append([
            report.dataset, entry.class_name, _alpha_label(entry.alpha),
            str(entry.correct), str(entry.total), f"{entry.pck:.6f}",
        ])
    for alpha in report.alphas:
        total = report.overall(alpha)
        rows.append([
            report.dataset, "all", _alpha_label(alpha),
            str(total.correct), str(total.total), f"{total.pck:.6f}",
        ])
    return rows


def _render_columns(header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    for row in rows:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return lines


def report_table(reports: Sequence[PckReport]) -> RenderedTable:
    """Comma-separated and human-readable renderings of a set of reports.

    Reports without entries contribute no rows.
    """
    reports = [r for r in reports if r.entries]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for report in reports:
        writer.writerows(_csv_rows(report))

    alphas = sorted({a for r in reports for a in r.alphas} | set(DEFAULT_ALPHAS))
    header = ["dataset", *(f"PCK@{_alpha_label(a)}" for a in alphas)]
    header += [f"ref@{_alpha_label(a)}" for a in alphas] + ["pairs"]
    rows = []
    for report in reports:
        published = REFERENCE_RESULTS.get(_base_name(report.dataset), {})
        row = [report.dataset or "-"]
        row += [_percent(report.overall(a).pck if a in report.alphas else None) for a in alphas]
        row += [f"{published[a]:.1f}" if a in published else "-" for a in alphas]
        row.append(str(report.n_pairs))
        rows.append(row)
    lines = _render_columns(header, rows)

    for report in reports:
        if _base_name(report.dataset) == "spair" and HISTOGRAM_ALPHA in report.alphas:
            lines.append("")
            lines.append(f"{report.dataset} per-class PCK@{_alpha_label(HISTOGRAM_ALPHA)}")
            names = list(SPAIR_REFERENCE_CLASSES)
            ours = []
            for name in names:
                if name == "avg":
                    ours.append(_percent(report.overall(HISTOGRAM_ALPHA).pck))
                else:
                    entry = report.entry(name, HISTOGRAM_ALPHA)
                    ours.append(_percent(entry.pck if entry else None))
            published_row = [f"{SPAIR_REFERENCE_CLASSES[n]:.1f}" for n in names]
            lines.extend(_render_columns(["", *names], [["ours", *ours], ["reference", *published_row]]))

    for report in reports:
        bins = " ".join(str(c) for c in report.histogram)
        lines.append("")
        lines.append(f"{report.dataset} pairs by correct fraction @0.1 (10% bins): {bins}")

    return RenderedTable(csv=buf.getvalue(), text="\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Pipeline runner
# ---------------------------------------------------------------------------

@dataclass
class EvaluationRun:
    """Predictions and reports of one evaluation pass."""

    predictions: list[MatchResult]
    report: PckReport
    layer_reports: dict[int, PckReport] = field(default_factory=dict)


def default_backend_factory(config: Config) -> Callable[[], Backend]:
    return lambda: create_backend(
        config.backend, config.checkpoint_path, device=config.device, seed=config.seed,
    )


def _match_pair(
    backend: Backend,
    pair: CorrespondencePair,
    config: Config,
    cache: EmbeddingCache | None,
    per_layer: bool,
) -> tuple[list[MatchResult], dict[int, list[MatchResult]]]:
    hp = config.hp
    if not per_layer:
        results = match_keypoints(
            backend, pair.source, pair.source_points, pair.target, hp, config.seed,
            cache=cache, augment=config.augment,
        )
        return results, {}

    crops = sample_inference_crops(numpy_rng(config.seed), hp.crop_fraction, hp.n_inference_crops)
    by_layer: dict[int, list[MatchResult]] = defaultdict(list)
    for qi, query in enumerate(pair.source_points):
        try:
            ensemble = load_or_optimize(
                backend, pair.source, query, hp, config.seed, cache, config.augment,
            )
        except OptimizationError as exc:
            raise exc.with_query(qi) from exc
        for key, amap in layer_attention(backend, ensemble, pair.target, crops, hp).items():
            peak = localize(amap)
            by_layer[key].append(MatchResult(
                source_id=pair.source.id,
                target_id=pair.target.id,
                query=query,
                predicted=peak.point,
                peak_value=peak.value,
                degenerate=peak.degenerate,
            ))
    main = by_layer.pop(AVERAGE, [])
    return main, dict(by_layer)


def evaluate_pairs(
    pairs: Sequence[CorrespondencePair],
    config: Config,
    backend_factory: Callable[[], Backend] | None = None,
    alphas: Iterable[float] = DEFAULT_ALPHAS,
    reference: Reference = "bbox",
    dataset: str = "",
    per_layer: bool = False,
    use_cache: bool = True,
) -> EvaluationRun:
    """Match every annotated keypoint of every pair and score the predictions."""
    alphas = tuple(alphas)
    factory = backend_factory or default_backend_factory(config)
    cache = EmbeddingCache(config.cache_dir, config.digest()) if use_cache else None
    logger.info(
        "Evaluating %d pairs (%d keypoints) with %d worker(s)",
        len(pairs), sum(len(p.keypoints) for p in pairs), config.workers,
    )

    outputs = map_with_backends(
        lambda backend, pair: _match_pair(backend, pair, config, cache, per_layer),
        list(pairs), factory, config.workers,
    )
    predictions = [r for main, _ in outputs for r in main]
    report = pck(predictions, pairs, alphas, reference, dataset)
    for alpha in report.alphas:
        logger.info("%s PCK@%s = %.1f", dataset or "dataset", _alpha_label(alpha), 100 * report.overall(alpha).pck)

    layer_reports: dict[int, PckReport] = {}
    if per_layer:
        for layer in config.hp.layers:
            layer_preds = [r for _, layers in outputs for r in layers.get(layer, [])]
            layer_reports[layer] = pck(
                layer_preds, pairs, alphas, reference, f"{dataset}:layer{layer}",
            )
    return EvaluationRun(predictions=predictions, report=report, layer_reports=layer_reports)
