"""CLI entry point: optimize, match, evaluate, sweep, visualize, manifest, cache.

Usage:
    python -m src.cli optimize --image cat.jpg --query 0.41,0.37
    python -m src.cli match --source a.jpg --target b.jpg c.jpg --query 0.41,0.37 --out results.csv
    python -m src.cli evaluate --dataset pfwillow --preset pfwillow --config run.conf --out reports
    python -m src.cli sweep --dataset spair --split val --runs 50 --out sweep
    python -m src.cli visualize --kind layers --source a.jpg --target b.jpg --query 0.41,0.37 --out fig.png
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from pydantic import ValidationError

from .attnmap import read_map, write_map
from .backend import Backend, create_backend
from .config import DATASET_NAMES, PRESETS, Config, load_config
from .crops import sample_inference_crops
from .datasets import count_correspondences, load_dataset, subsample_correspondences, write_manifest
from .embedding_cache import EmbeddingCache, list_cache
from .errors import ConfigError, DatasetError, DiffMatchError, OptimizationError
from .evaluation import DEFAULT_ALPHAS, DEFAULT_REFERENCE, evaluate_pairs, report_table
from .images import image_from_file
from .infer import (
    AVERAGE,
    ensemble_attention,
    heatmap_array,
    layer_attention,
    load_or_optimize,
    match_keypoints,
    read_results,
    write_results,
)
from .models import BBox, CorrespondencePair, ImageRecord, OverlaySpec, Point
from .optim import optimize_ensemble
from .search import load_search_space, random_search
from .utils import atomic_write_text, ensure_dir, logger, numpy_rng, setup_logging
from .visualize import (
    correspondence_figure,
    heatmap_overlay,
    layer_panels,
    line_colors,
    panel_strip,
    save_png,
)

EVAL_DATASETS = (*DATASET_NAMES, "synthetic")


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------

def _parse_point(text: str) -> Point:
    """'x,y' in normalized coordinates."""
    try:
        x, y = (float(v) for v in text.split(","))
        return Point(x=x, y=y)
    except (ValueError, ValidationError) as exc:
        raise ConfigError(f"query: expected 'x,y' within [0, 1], got {text!r}") from exc


def _parse_alphas(text: str) -> tuple[float, ...]:
    try:
        alphas = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"alphas: cannot parse {text!r}") from exc
    if not alphas or any(a <= 0 for a in alphas):
        raise ConfigError(f"alphas out of range: {text!r}")
    return alphas


def _parse_bbox(text: str) -> BBox:
    """'x1,y1,x2,y2' in normalized coordinates."""
    try:
        x1, y1, x2, y2 = (float(v) for v in text.split(","))
        return BBox(x1=x1, y1=y1, x2=x2, y2=y2)
    except (ValueError, ValidationError) as exc:
        raise ConfigError(f"bbox: expected 'x1,y1,x2,y2' within [0, 1], got {text!r}") from exc


def _line_reference(target: ImageRecord, bbox: BBox | None) -> float:
    """Longer side of the target bbox in pixels, else of the target image."""
    height, width = target.original_size
    if bbox is None:
        return float(max(height, width))
    return float(max(bbox.size_pixels(width, height)))


def _read_keypoints(path: Path) -> list[Point]:
    """One normalized 'x,y' per line."""
    if not path.exists():
        raise DatasetError("keypoint file not found", path)
    points = []
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                points.append(Point(x=float(row[0]), y=float(row[1])))
            except (IndexError, ValueError, ValidationError) as exc:
                raise DatasetError(f"malformed keypoint on line {lineno}", path) from exc
    return points


def _queries(args: argparse.Namespace) -> list[Point]:
    queries = [_parse_point(q) for q in args.query or []]
    if getattr(args, "keypoints", None):
        queries.extend(_read_keypoints(Path(args.keypoints)))
    if not queries:
        raise ConfigError("query: give --query x,y or --keypoints FILE")
    return queries


def _image(path: str) -> ImageRecord:
    p = Path(path)
    if not p.exists():
        raise DatasetError("image not found", p)
    return image_from_file(p)


def _build_config(args: argparse.Namespace) -> Config:
    """defaults < environment < config file < preset < flags."""
    config = Config.from_env()
    if args.config:
        config = load_config(args.config, base=config)
    config = config.with_preset(args.preset)
    config = config.with_hp(
        n_embeddings=args.n_embeddings,
        n_inference_crops=args.n_crops,
    )
    run: dict[str, object] = {
        "backend": args.backend,
        "checkpoint_path": Path(args.checkpoint) if args.checkpoint else None,
        "seed": args.seed,
        "device": args.device,
        "cache_dir": Path(args.cache_dir) if args.cache_dir else None,
        "workers": args.workers,
    }
    config = replace(config, **{k: v for k, v in run.items() if v is not None})
    if args.no_crop_augment:
        config = replace(config, augment=False)
    return replace(config, verbose=args.verbose)


def _valid(config: Config, dataset: str | None = None) -> bool:
    errors = config.validate(dataset)
    for e in errors:
        logger.error(e)
    return not errors


def _backend(config: Config) -> Backend:
    return create_backend(config.backend, config.checkpoint_path, device=config.device, seed=config.seed)


def _cache(config: Config) -> EmbeddingCache:
    return EmbeddingCache(config.cache_dir, config.digest())


def _load_pairs(config: Config, args: argparse.Namespace) -> list[CorrespondencePair]:
    pairs = load_dataset(
        args.dataset,
        config.dataset_roots.get(args.dataset),
        split=args.split,
        manifest=config.dataset_manifests.get(args.dataset),
        seed=config.seed,
    )
    logger.info("Loaded %d pairs (%d correspondences)", len(pairs), count_correspondences(pairs))
    return pairs


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_optimize(args: argparse.Namespace) -> int:
    """Optimise and cache one ensemble per query."""
    config = _build_config(args)
    if not _valid(config):
        return 1
    image = _image(args.image)
    queries = _queries(args)
    cache = _cache(config)

    logger.info("Step 1: Optimising %d quer%s on %s", len(queries), "y" if len(queries) == 1 else "ies", image.id)
    backend: Backend | None = None
    for qi, query in enumerate(queries):
        if cache.get(image.id, query) is not None:
            continue
        if backend is None:
            backend = _backend(config)
        try:
            ensemble = optimize_ensemble(
                backend, image, query, config.hp, config.seed,
                augment=config.augment, digest=config.digest(),
            )
        except OptimizationError as exc:
            raise exc.with_query(qi) from exc
        cache.put(ensemble)
    return 0


def cmd_match(args: argparse.Namespace) -> int:
    """Localise every query of the source image in each target image."""
    config = _build_config(args)
    if not _valid(config):
        return 1
    source = _image(args.source)
    targets = [_image(t) for t in args.target]
    queries = _queries(args)
    out = Path(args.out)

    logger.info("Step 1: Matching %d queries against %d target(s)", len(queries), len(targets))
    results = match_keypoints(
        _backend(config), source, queries, targets, config.hp, config.seed,
        cache=_cache(config), augment=config.augment, keep_heatmaps=args.overlay,
    )

    logger.info("Step 2: Writing results")
    write_results(out, results)
    logger.info("Wrote %d results to %s", len(results), out)

    if args.overlay:
        by_id = {t.id: t for t in targets}
        spec = OverlaySpec(kind="heatmap")
        for i, result in enumerate(results):
            qi = i // len(targets)
            path = out.with_name(f"{out.stem}_q{qi}_{result.target_id}.png")
            heat = heatmap_array(result)
            write_map(path.with_suffix(".amap"), heat)
            save_png(path, heatmap_overlay(by_id[result.target_id], heat, spec.blend))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Run the full pipeline over a benchmark split and write PCK reports."""
    config = _build_config(args)
    if not _valid(config, args.dataset):
        return 1
    alphas = _parse_alphas(args.alphas)
    out_dir = ensure_dir(Path(args.out))
    stem = f"{args.dataset}_{args.split}"

    logger.info("Step 1: Loading %s (%s)", args.dataset, args.split)
    pairs = _load_pairs(config, args)
    if args.limit is not None:
        subset_seed = args.subset_seed if args.subset_seed is not None else config.seed
        pairs = subsample_correspondences(pairs, args.limit, subset_seed)
        logger.info("Subsampled to %d correspondences (seed %d)", count_correspondences(pairs), subset_seed)

    logger.info("Step 2: Matching")
    run = evaluate_pairs(
        pairs, config,
        alphas=alphas,
        reference=DEFAULT_REFERENCE[args.dataset],
        dataset=args.dataset,
        per_layer=args.per_layer,
    )

    logger.info("Step 3: Writing reports")
    reports = [run.report, *(run.layer_reports[k] for k in sorted(run.layer_reports))]
    table = report_table(reports)
    atomic_write_text(out_dir / f"{stem}_pck.csv", table.csv)
    atomic_write_text(out_dir / f"{stem}_pck.txt", table.text)
    write_results(out_dir / f"{stem}_predictions.csv", run.predictions)
    logger.info("Reports written to %s", out_dir)
    print(table.text, end="")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    """Random hyperparameter search; writes the trial log and the winning config."""
    config = _build_config(args)
    if not _valid(config, args.dataset):
        return 1
    space = load_search_space(args.space) if args.space else None
    out_dir = ensure_dir(Path(args.out))

    logger.info("Step 1: Loading %s (%s)", args.dataset, args.split)
    pairs = _load_pairs(config, args)

    logger.info("Step 2: Searching")
    best_hp, trials = random_search(
        pairs, config,
        space=space,
        n_runs=args.runs,
        n_corr=args.n_corr,
        seed=config.seed,
        reference=DEFAULT_REFERENCE[args.dataset],
        log_path=out_dir / "trials.jsonl",
    )

    best_path = out_dir / "best.conf"
    atomic_write_text(best_path, replace(config, hp=best_hp).to_text())
    logger.info("Wrote %d trials and best config %s", len(trials), best_path)
    return 0


def cmd_visualize(args: argparse.Namespace) -> int:
    """Render a heatmap overlay, per-layer panels or a correspondence figure."""
    config = _build_config(args)
    if not _valid(config):
        return 1
    spec = OverlaySpec(kind=args.kind, alpha=args.alpha, blend=args.blend)
    out = Path(args.out)

    if spec.kind == "heatmap" and args.map:
        if not args.image:
            raise ConfigError("image: --map needs --image")
        save_png(out, heatmap_overlay(_image(args.image), read_map(Path(args.map)), spec.blend))
        return 0

    if not args.source or not args.target:
        raise ConfigError("visualize: --source and --target are required")
    source, target = _image(args.source), _image(args.target)

    if spec.kind == "lines":
        if not args.results or not args.gt:
            raise ConfigError("visualize: lines needs --results and --gt")
        results = [r for r in read_results(Path(args.results)) if r.target_id == target.id]
        truth = _read_keypoints(Path(args.gt))
        if len(truth) != len(results):
            raise DatasetError(f"{len(truth)} ground-truth points for {len(results)} results", args.gt)
        ref = _line_reference(target, _parse_bbox(args.bbox) if args.bbox else None)
        colors = line_colors(results, truth, target.original_size, ref, spec)
        save_png(out, correspondence_figure(source, target, results, colors))
        return 0

    query = _parse_point(args.query[0]) if args.query else None
    if query is None:
        raise ConfigError("query: visualize needs --query x,y")
    backend = _backend(config)
    hp = config.hp
    ensemble = load_or_optimize(backend, source, query, hp, config.seed, _cache(config), config.augment)
    crops = sample_inference_crops(numpy_rng(config.seed), hp.crop_fraction, hp.n_inference_crops)
    if spec.kind == "heatmap":
        amap = ensemble_attention(backend, ensemble, target, crops, hp)
        save_png(out, heatmap_overlay(target, amap, spec.blend))
    else:
        maps = layer_attention(backend, ensemble, target, crops, hp)
        panels = layer_panels(target, maps, spec.blend)
        logger.info("Rendering %d panels (%d layers + average)", len(panels), len(maps) - (AVERAGE in maps))
        save_png(out, panel_strip(panels))
    return 0


def cmd_manifest(args: argparse.Namespace) -> int:
    """Write the audit listing of every pair a loader produces."""
    config = _build_config(args)
    if not _valid(config, args.dataset):
        return 1
    pairs = _load_pairs(config, args)
    write_manifest(Path(args.out), pairs)
    logger.info("Wrote manifest %s", args.out)
    return 0


def cmd_cache(args: argparse.Namespace) -> int:
    """List cache digests or clear the current configuration's entries."""
    config = _build_config(args)
    if args.clear:
        removed = _cache(config).clear()
        logger.info("Removed %d entries for config %s", removed, config.digest())
        return 0
    for digest, count in list_cache(config.cache_dir).items():
        marker = " *" if digest == config.digest() else ""
        print(f"{digest}  {count}{marker}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common_args(parser: argparse.ArgumentParser) -> None:
    """Configuration flags shared by every subcommand."""
    parser.add_argument("--config", default=None, help="Flat key = value config file")
    parser.add_argument(
        "--preset", default=None, choices=sorted(PRESETS),
        help="Per-dataset ensemble size / inference crop counts",
    )
    parser.add_argument("--backend", default=None, choices=["toy", "checkpoint"], help="Denoiser backend")
    parser.add_argument("--checkpoint", default=None, help="Checkpoint path (backend = checkpoint)")
    parser.add_argument("--seed", type=int, default=None, help="Seed for every stochastic choice")
    parser.add_argument("--device", default=None, help="torch device, or 'auto'")
    parser.add_argument("--cache-dir", default=None, help="Embedding cache root (env DIFFMATCH_CACHE)")
    parser.add_argument("--workers", type=int, default=None, help="Worker threads, one backend each")
    parser.add_argument("--n-embeddings", type=int, default=None, help="Ensemble size R")
    parser.add_argument("--n-crops", type=int, default=None, help="Inference crops per target")
    parser.add_argument(
        "--no-crop-augment", action="store_true",
        help="Optimise on the full image only (no random crops)",
    )
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")


def _add_query_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--query", action="append", default=None,
        help="Normalized query point 'x,y' (repeatable)",
    )
    parser.add_argument("--keypoints", default=None, help="File of 'x,y' query lines")


def _add_dataset_args(parser: argparse.ArgumentParser, split: str) -> None:
    parser.add_argument("--dataset", required=True, choices=EVAL_DATASETS, help="Benchmark")
    parser.add_argument("--split", default=split, choices=["train", "trn", "val", "test"], help="Split")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffmatch",
        description="Unsupervised semantic correspondence from optimised diffusion prompt embeddings",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    sp_opt = subparsers.add_parser("optimize", help="Optimise and cache embeddings for query points")
    sp_opt.add_argument("--image", required=True, help="Source image")
    _add_query_args(sp_opt)
    _add_common_args(sp_opt)
    sp_opt.set_defaults(func=cmd_optimize)

    sp_match = subparsers.add_parser("match", help="Find query points of a source image in targets")
    sp_match.add_argument("--source", required=True, help="Source image")
    sp_match.add_argument("--target", required=True, nargs="+", help="Target image(s)")
    sp_match.add_argument("--out", default="results.csv", help="Result file")
    sp_match.add_argument("--overlay", action="store_true", help="Also write heatmap overlays")
    _add_query_args(sp_match)
    _add_common_args(sp_match)
    sp_match.set_defaults(func=cmd_match)

    sp_eval = subparsers.add_parser("evaluate", help="PCK evaluation on a benchmark")
    _add_dataset_args(sp_eval, "test")
    sp_eval.add_argument(
        "--alphas", default=",".join(f"{a:g}" for a in DEFAULT_ALPHAS),
        help="Comma-separated PCK thresholds",
    )
    sp_eval.add_argument("--limit", type=int, default=None, help="Evaluate N sampled correspondences")
    sp_eval.add_argument("--subset-seed", type=int, default=None, help="Seed for --limit sampling")
    sp_eval.add_argument("--per-layer", action="store_true", help="Also report each layer alone")
    sp_eval.add_argument("--out", default="reports", help="Report directory")
    _add_common_args(sp_eval)
    sp_eval.set_defaults(func=cmd_evaluate)

    sp_sweep = subparsers.add_parser("sweep", help="Random hyperparameter search")
    _add_dataset_args(sp_sweep, "val")
    sp_sweep.add_argument("--space", default=None, help="YAML file of search ranges")
    sp_sweep.add_argument("--runs", type=int, default=50, help="Number of trials")
    sp_sweep.add_argument("--n-corr", type=int, default=50, help="Correspondences per trial")
    sp_sweep.add_argument("--out", default="sweep", help="Output directory")
    _add_common_args(sp_sweep)
    sp_sweep.set_defaults(func=cmd_sweep)

    sp_vis = subparsers.add_parser("visualize", help="Render overlays and figures")
    sp_vis.add_argument("--kind", default="heatmap", choices=["heatmap", "layers", "lines"])
    sp_vis.add_argument("--image", default=None, help="Image under --map")
    sp_vis.add_argument("--map", default=None, help="Attention map file (.amap)")
    sp_vis.add_argument("--source", default=None, help="Source image")
    sp_vis.add_argument("--target", default=None, help="Target image")
    sp_vis.add_argument("--query", action="append", default=None, help="Normalized query 'x,y'")
    sp_vis.add_argument("--results", default=None, help="Result file from match")
    sp_vis.add_argument("--gt", default=None, help="Ground-truth target points, one 'x,y' per line")
    sp_vis.add_argument("--alpha", type=float, default=0.05, help="Correctness threshold for lines")
    sp_vis.add_argument("--bbox", default=None, help="Target bbox 'x1,y1,x2,y2' for the lines threshold")
    sp_vis.add_argument("--blend", type=float, default=0.6, help="Heatmap opacity at the peak")
    sp_vis.add_argument("--out", required=True, help="Output PNG")
    _add_common_args(sp_vis)
    sp_vis.set_defaults(func=cmd_visualize)

    sp_man = subparsers.add_parser("manifest", help="List the pairs a dataset loader emits")
    _add_dataset_args(sp_man, "test")
    sp_man.add_argument("--out", required=True, help="Manifest file")
    _add_common_args(sp_man)
    sp_man.set_defaults(func=cmd_manifest)

    sp_cache = subparsers.add_parser("cache", help="Inspect or clear the embedding cache")
    group = sp_cache.add_mutually_exclusive_group()
    group.add_argument("--list", action="store_true", help="Entry count per config digest (default)")
    group.add_argument("--clear", action="store_true", help="Remove entries of the current config")
    _add_common_args(sp_cache)
    sp_cache.set_defaults(func=cmd_cache)

    return parser


def run(argv: list[str] | None = None) -> int:
    """Parse, dispatch, and map any pipeline error to exit code 1."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except DiffMatchError as exc:
        logger.error("%s", exc)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
