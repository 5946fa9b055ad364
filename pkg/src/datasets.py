"""Benchmark loaders: SPair-71k, PF-Willow, CUB-200-2011, plus a synthetic fixture.

Every loader emits normalized coordinates; raw pixel annotations never leave
this module. Results are sorted by class, then pair id.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from collections.abc import Iterable
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .errors import DatasetError
from .images import coordinate_image, image_from_file
from .models import BBox, CorrespondencePair, ImageRecord, KeypointMatch, Point
from .utils import atomic_write_text, logger, numpy_rng

SPAIR_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair",
    "cow", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "train", "tvmonitor",
)
PFWILLOW_CLASSES = ("car", "duck", "motorbike", "winebottle")
SPLITS = ("trn", "val", "test")
SPLIT_ALIASES = {"train": "trn"}


def _sorted(pairs: Iterable[CorrespondencePair]) -> list[CorrespondencePair]:
    return sorted(pairs, key=lambda p: (p.class_name, p.pair_id))


def _point(px: float, py: float, width: int, height: int, record: Path | str) -> Point:
    if not (0.0 <= px <= width and 0.0 <= py <= height):
        raise DatasetError(
            f"Keypoint ({px:g}, {py:g}) outside {width}x{height} image", record,
        )
    return Point.from_pixels(px, py, width, height)


def _image(path: Path, image_id: str, size: tuple[int, int] | None) -> ImageRecord:
    """Record for an image file; header size wins over annotated size when the file exists."""
    if path.exists():
        return image_from_file(path, image_id)
    if size is None:
        raise DatasetError("Image not found", path)
    return ImageRecord(id=image_id, original_size=size, path=path)


def _pair(
    record: Path | str,
    pair_id: str,
    class_name: str,
    source: ImageRecord,
    target: ImageRecord,
    src_pts: list[tuple[float, float]],
    tgt_pts: list[tuple[float, float]],
    kp_ids: list[str],
    bbox_src: BBox | None,
    bbox_tgt: BBox | None,
    split: str,
) -> CorrespondencePair:
    if len(src_pts) != len(tgt_pts) or len(src_pts) != len(kp_ids):
        raise DatasetError("Source/target keypoint lists are not index-aligned", record)
    keypoints = tuple(
        KeypointMatch(
            source=_point(sx, sy, source.width, source.height, record),
            target=_point(tx, ty, target.width, target.height, record),
            kp_id=kid,
        )
        for (sx, sy), (tx, ty), kid in zip(src_pts, tgt_pts, kp_ids)
    )
    try:
        return CorrespondencePair(
            pair_id=pair_id,
            source=source,
            target=target,
            keypoints=keypoints,
            class_name=class_name,
            bbox_src=bbox_src,
            bbox_tgt=bbox_tgt,
            split=split,  # type: ignore[arg-type]
        )
    except ValidationError as exc:
        raise DatasetError(f"Malformed pair record: {exc}", record) from exc


# ---------------------------------------------------------------------------
# SPair-71k
# ---------------------------------------------------------------------------

def load_spair(root: Path, split: str = "test") -> list[CorrespondencePair]:
    """Pairs from ``<root>/PairAnnotation/<split>/*.json``.

    Images live in ``<root>/JPEGImages/<category>/<name>``. ``train`` is
    accepted for the ``trn`` directory.
    """
    root = Path(root)
    split = SPLIT_ALIASES.get(split, split)
    if split not in SPLITS:
        raise DatasetError(f"Unknown SPair split {split!r}")
    ann_dir = root / "PairAnnotation" / split
    if not ann_dir.is_dir():
        raise DatasetError("SPair annotation directory not found", ann_dir)

    pairs = []
    for path in sorted(ann_dir.glob("*.json")):
        try:
            ann = json.loads(path.read_text(encoding="utf-8"))
            category = ann["category"]
            src_name, tgt_name = ann["src_imname"], ann["trg_imname"]
            src_kps, tgt_kps = ann["src_kps"], ann["trg_kps"]
            kp_ids = [str(k) for k in ann.get("kps_ids", range(len(src_kps)))]
            src_size = ann.get("src_imsize")
            tgt_size = ann.get("trg_imsize")
            src_box, tgt_box = ann["src_bndbox"], ann["trg_bndbox"]
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"Malformed SPair record: {exc}", path) from exc

        img_dir = root / "JPEGImages" / category
        # imsize is (width, height, depth)
        source = _image(img_dir / src_name, f"{category}/{Path(src_name).stem}",
                        (int(src_size[1]), int(src_size[0])) if src_size else None)
        target = _image(img_dir / tgt_name, f"{category}/{Path(tgt_name).stem}",
                        (int(tgt_size[1]), int(tgt_size[0])) if tgt_size else None)
        try:
            bbox_src = BBox.from_pixels(*src_box, width=source.width, height=source.height)
            bbox_tgt = BBox.from_pixels(*tgt_box, width=target.width, height=target.height)
        except (TypeError, ValidationError) as exc:
            raise DatasetError(f"Malformed SPair bbox: {exc}", path) from exc
        pairs.append(_pair(
            path, path.stem, category, source, target,
            [tuple(k) for k in src_kps], [tuple(k) for k in tgt_kps], kp_ids,
            bbox_src, bbox_tgt, split,
        ))
    logger.info("Loaded %d SPair %s pairs (%d keypoints)", len(pairs), split,
                count_correspondences(pairs))
    return _sorted(pairs)


# ---------------------------------------------------------------------------
# PF-Willow
# ---------------------------------------------------------------------------

def _pfwillow_class(image_path: str) -> str:
    folder = Path(image_path).parent.name
    return folder.split("(")[0].strip()


def _resolve(root: Path, rel: str) -> Path:
    rel_path = Path(rel)
    candidates = [root / rel_path, root / Path(*rel_path.parts[1:]), root.parent / rel_path]
    for c in candidates:
        if c.exists():
            return c
    return candidates[0]


def _coords(field: str) -> list[float]:
    return [float(v) for v in field.split(";") if v.strip()]


def load_pfwillow(root: Path, pairs_file: str = "test_pairs.csv") -> list[CorrespondencePair]:
    """Pairs from the PF-Willow test list (imageA, imageB, XA, YA, XB, YB).

    Coordinate columns hold ';'-separated pixel values. The distribution has
    no boxes, so each image's box is the tight extent of its keypoints.
    """
    root = Path(root)
    csv_path = root / pairs_file
    if not csv_path.exists():
        raise DatasetError("PF-Willow pair list not found", csv_path)

    pairs = []
    with open(csv_path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        for idx, row in enumerate(reader):
            record = f"{csv_path}:{idx + 2}"
            try:
                src_rel, tgt_rel = row["imageA"].strip(), row["imageB"].strip()
                xa, ya = _coords(row["XA"]), _coords(row["YA"])
                xb, yb = _coords(row["XB"]), _coords(row["YB"])
            except (KeyError, AttributeError, ValueError) as exc:
                raise DatasetError(f"Malformed PF-Willow row: {exc}", record) from exc
            class_name = _pfwillow_class(src_rel)
            src_path, tgt_path = _resolve(root, src_rel), _resolve(root, tgt_rel)
            source = _image(src_path, Path(src_rel).stem, None)
            target = _image(tgt_path, Path(tgt_rel).stem, None)
            if len(xa) != len(ya) or len(xb) != len(yb):
                raise DatasetError("Unequal x/y coordinate counts", record)
            pair = _pair(
                record, f"{idx:04d}", class_name, source, target,
                list(zip(xa, ya)), list(zip(xb, yb)), [str(i) for i in range(len(xa))],
                None, None, "test",
            )
            pairs.append(pair.model_copy(update={
                "bbox_src": BBox.around(pair.source_points),
                "bbox_tgt": BBox.around(pair.target_points),
            }))
    logger.info("Loaded %d PF-Willow pairs (%d keypoints)", len(pairs), count_correspondences(pairs))
    return _sorted(pairs)


# ---------------------------------------------------------------------------
# CUB-200-2011
# ---------------------------------------------------------------------------

def _read_table(path: Path) -> list[list[str]]:
    if not path.exists():
        raise DatasetError("CUB metadata file not found", path)
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f if line.strip()]


def load_cub(
    root: Path, n_classes: int = 3, manifest: Path | None = None,
) -> list[CorrespondencePair]:
    """Within-class test pairs of the first ``n_classes`` bird classes.

    Pairs come from a manifest (``class_id,src_image,tgt_image`` rows, image
    paths relative to ``<root>/images``), by default ``<root>/pairs_manifest.csv``.
    Without one, consecutive test images of each class are paired. Only parts
    visible in both images are kept; thresholds use the whole image.
    """
    root = Path(root)
    images = {r[0]: r[1] for r in _read_table(root / "images.txt")}
    classes = {r[0]: " ".join(r[1:]) for r in _read_table(root / "classes.txt")}
    labels = {r[0]: r[1] for r in _read_table(root / "image_class_labels.txt")}
    split_path = root / "train_test_split.txt"
    is_train = {r[0]: r[1] == "1" for r in _read_table(split_path)} if split_path.exists() else {}

    parts: dict[str, dict[str, tuple[float, float]]] = defaultdict(dict)
    for row in _read_table(root / "parts" / "part_locs.txt"):
        img_id, part_id, x, y, visible = row[:5]
        if visible == "1":
            parts[img_id][part_id] = (float(x), float(y))

    chosen = sorted(classes, key=int)[:n_classes]
    by_path = {path: img_id for img_id, path in images.items()}

    manifest = manifest or root / "pairs_manifest.csv"
    if manifest.exists():
        with open(manifest, encoding="utf-8", newline="") as f:
            rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
        if rows and rows[0][0] == "class_id":
            rows = rows[1:]
        wanted = []
        for r in rows:
            if r[0].strip() not in chosen:
                continue
            try:
                wanted.append((r[0].strip(), by_path[r[1].strip()], by_path[r[2].strip()]))
            except KeyError as exc:
                raise DatasetError(f"Manifest image not in images.txt: {exc}", manifest) from exc
    else:
        logger.warning("No CUB pair manifest at %s; pairing consecutive test images", manifest)
        wanted = []
        for cls in chosen:
            members = sorted(
                (i for i, c in labels.items() if c == cls and not is_train.get(i, False)), key=int,
            )
            wanted.extend((cls, a, b) for a, b in zip(members[0::2], members[1::2]))

    pairs = []
    for cls, src_id, tgt_id in wanted:
        src_path, tgt_path = root / "images" / images[src_id], root / "images" / images[tgt_id]
        source = _image(src_path, Path(images[src_id]).stem, None)
        target = _image(tgt_path, Path(images[tgt_id]).stem, None)
        shared = sorted(set(parts[src_id]) & set(parts[tgt_id]), key=int)
        pairs.append(_pair(
            f"{manifest}:{src_id}-{tgt_id}", f"{src_id}-{tgt_id}", classes[cls], source, target,
            [parts[src_id][p] for p in shared], [parts[tgt_id][p] for p in shared], shared,
            None, None, "test",
        ))
    logger.info("Loaded %d CUB pairs over %d classes (%d keypoints)",
                len(pairs), len(chosen), count_correspondences(pairs))
    return _sorted(pairs)


# ---------------------------------------------------------------------------
# Synthetic fixture
# ---------------------------------------------------------------------------

def synthetic_pairs(
    n: int = 5,
    seed: int = 0,
    n_keypoints: int = 4,
    size: tuple[int, int] = (96, 128),
) -> list[CorrespondencePair]:
    """Coordinate-ramp pairs related by known zoom/shift maps.

    The source shows the full ramp; the target shows the ramp window
    [t, t + s]^2 stretched over the whole image, so ramp position u appears at
    (u - t) / s. Keypoints are drawn inside that window.
    """
    rng = numpy_rng(seed)
    height, width = size
    pairs = []
    for k in range(n):
        scale = float(rng.uniform(0.7, 0.95))
        off = tuple(float(v) for v in rng.uniform(0.0, 1.0 - scale, size=2))
        source = coordinate_image(f"syn{k:03d}_src", height, width)
        target = coordinate_image(f"syn{k:03d}_tgt", height, width, scale=scale, offset=off)
        inner = rng.uniform(0.1, 0.9, size=(n_keypoints, 2))
        keypoints = []
        for i, (a, b) in enumerate(inner):
            ux, uy = off[0] + scale * a, off[1] + scale * b
            keypoints.append(KeypointMatch(
                source=Point(x=float(ux), y=float(uy)),
                target=Point(x=float(a), y=float(b)),
                kp_id=str(i),
            ))
        pairs.append(CorrespondencePair(
            pair_id=f"{k:04d}",
            source=source,
            target=target,
            keypoints=tuple(keypoints),
            class_name="ramp",
            bbox_src=BBox(x1=0.0, y1=0.0, x2=1.0, y2=1.0),
            bbox_tgt=BBox(x1=0.0, y1=0.0, x2=1.0, y2=1.0),
        ))
    return _sorted(pairs)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def count_correspondences(pairs: Iterable[CorrespondencePair]) -> int:
    return sum(len(p.keypoints) for p in pairs)


def subsample_correspondences(
    pairs: list[CorrespondencePair], n: int, seed: int,
) -> list[CorrespondencePair]:
    """Keep a seeded random subset of n keypoints; pairs left empty are dropped."""
    flat = [(pi, ki) for pi, p in enumerate(pairs) for ki in range(len(p.keypoints))]
    if n >= len(flat):
        return list(pairs)
    rng = np.random.default_rng(seed)
    keep = sorted(rng.choice(len(flat), size=n, replace=False).tolist())
    chosen: dict[int, list[int]] = defaultdict(list)
    for idx in keep:
        pi, ki = flat[idx]
        chosen[pi].append(ki)
    return [
        pairs[pi].model_copy(update={"keypoints": tuple(pairs[pi].keypoints[k] for k in kis)})
        for pi, kis in sorted(chosen.items())
    ]


def load_dataset(
    name: str,
    root: Path | None,
    split: str = "test",
    manifest: Path | None = None,
    seed: int = 0,
) -> list[CorrespondencePair]:
    if name == "synthetic":
        return synthetic_pairs(seed=seed)
    if root is None:
        raise DatasetError(f"dataset.{name}.root is not configured")
    if name == "spair":
        return load_spair(root, split)
    if name == "pfwillow":
        return load_pfwillow(root)
    if name == "cub":
        return load_cub(root, manifest=manifest)
    raise DatasetError(f"Unknown dataset {name!r}")


def format_manifest(pairs: Iterable[CorrespondencePair]) -> str:
    """Audit listing: ``class, src_image, tgt_image, n_kps`` per line."""
    lines = [f"{p.class_name}, {p.source.id}, {p.target.id}, {len(p.keypoints)}" for p in pairs]
    return "\n".join(lines) + ("\n" if lines else "")


def write_manifest(path: Path, pairs: Iterable[CorrespondencePair]) -> Path:
    return atomic_write_text(Path(path), format_manifest(pairs))
