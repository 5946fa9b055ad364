"""PEMB embedding files and the on-disk embedding cache.

Layout: ``<cache>/<config-digest>/<image-id>/<qx>_<qy>.pemb``. A file holds a
32-byte header, R row-major P x D float32 matrices and a JSON trailer.
"""

from __future__ import annotations

import json
import shutil
import struct
import threading
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .errors import CacheError, FormatError
from .models import EmbeddingEnsemble, Point, PromptEmbedding, Provenance
from .utils import atomic_write_bytes, format_coord, logger

PEMB_MAGIC = b"PEMB"
_HEADER = struct.Struct("<4sIIIIQI")


class CacheTrailer(BaseModel):
    """Provenance stored after the matrices."""

    config_digest: str
    image_id: str
    query: tuple[float, float]
    hp_digest: str = ""
    loss_traces: list[list[float]] = Field(default_factory=list)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def encode_ensemble(ensemble: EmbeddingEnsemble, config_digest: str) -> bytes:
    first = ensemble.members[0]
    p, d = first.shape
    prov = first.provenance
    header = _HEADER.pack(PEMB_MAGIC, p, d, first.token_index, len(ensemble), prov.seed, 0)
    body = b"".join(m.matrix.astype("<f4").tobytes(order="C") for m in ensemble.members)
    trailer = CacheTrailer(
        config_digest=config_digest,
        image_id=prov.source_image_id,
        query=prov.query.as_tuple(),
        hp_digest=prov.hp_digest,
        loss_traces=[list(m.loss_trace) for m in ensemble.members],
    )
    return header + body + trailer.model_dump_json().encode("utf-8")


def decode_ensemble(data: bytes, source: str = "<bytes>") -> tuple[EmbeddingEnsemble, CacheTrailer]:
    if len(data) < _HEADER.size:
        raise FormatError(f"embedding file too short: {source}")
    magic, p, d, token_index, count, seed, _ = _HEADER.unpack_from(data)
    if magic != PEMB_MAGIC:
        raise FormatError(f"bad embedding magic {magic!r}: {source}")
    if p == 0 or d == 0 or count == 0:
        raise FormatError(f"empty embedding geometry P={p} D={d} R={count}: {source}")
    body_len = 4 * p * d * count
    end = _HEADER.size + body_len
    if len(data) < end:
        raise FormatError(f"embedding file truncated ({len(data)} < {end} bytes): {source}")
    try:
        trailer = CacheTrailer.model_validate_json(data[end:].decode("utf-8"))
    except (UnicodeDecodeError, ValidationError) as exc:
        raise FormatError(f"bad embedding trailer: {source}: {exc}") from exc

    matrices = np.frombuffer(data, dtype="<f4", count=p * d * count, offset=_HEADER.size)
    matrices = matrices.reshape(count, p, d).astype(np.float32)
    query = Point(x=trailer.query[0], y=trailer.query[1])
    members = []
    for r in range(count):
        trace = trailer.loss_traces[r] if r < len(trailer.loss_traces) else []
        try:
            members.append(PromptEmbedding(
                matrix=matrices[r].copy(),
                token_index=token_index,
                provenance=Provenance(
                    source_image_id=trailer.image_id,
                    query=query,
                    seed=seed + r,
                    hp_digest=trailer.hp_digest,
                ),
                loss_trace=tuple(trace),
            ))
        except ValidationError as exc:
            raise FormatError(f"invalid embedding member {r}: {source}: {exc}") from exc
    return EmbeddingEnsemble(members=tuple(members)), trailer


def write_embeddings(path: Path, ensemble: EmbeddingEnsemble, config_digest: str) -> Path:
    return atomic_write_bytes(Path(path), encode_ensemble(ensemble, config_digest))


def read_embeddings(path: Path) -> EmbeddingEnsemble:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"embedding file not found: {path}")
    ensemble, _ = decode_ensemble(path.read_bytes(), source=str(path))
    return ensemble


# ---------------------------------------------------------------------------
# Cache directory
# ---------------------------------------------------------------------------

def _safe_id(image_id: str) -> str:
    return image_id.replace("/", "__").replace("\\", "__")


class EmbeddingCache:
    """Per-config-digest directory of ensembles. Concurrent reads, one writer."""

    def __init__(self, root: Path, config_digest: str) -> None:
        self.root = Path(root)
        self.config_digest = config_digest
        self._write_lock = threading.Lock()

    @property
    def directory(self) -> Path:
        return self.root / self.config_digest

    def path_for(self, image_id: str, query: Point) -> Path:
        name = f"{format_coord(query.x)}_{format_coord(query.y)}.pemb"
        return self.directory / _safe_id(image_id) / name

    def get(self, image_id: str, query: Point) -> EmbeddingEnsemble | None:
        path = self.path_for(image_id, query)
        if not path.exists():
            logger.debug("Cache miss %s", path)
            return None
        ensemble, trailer = decode_ensemble(path.read_bytes(), source=str(path))
        if trailer.config_digest != self.config_digest or trailer.image_id != image_id:
            raise CacheError(
                f"cache entry {path} belongs to {trailer.image_id}@{trailer.config_digest}"
            )
        logger.info("Cache hit %s", path)
        return ensemble

    def put(self, ensemble: EmbeddingEnsemble) -> Path:
        prov = ensemble.provenance
        path = self.path_for(prov.source_image_id, prov.query)
        with self._write_lock:
            write_embeddings(path, ensemble, self.config_digest)
        logger.info("Wrote %s", path)
        return path

    def entries(self) -> list[Path]:
        if not self.directory.exists():
            return []
        return sorted(self.directory.rglob("*.pemb"))

    def clear(self) -> int:
        n = len(self.entries())
        if self.directory.exists():
            with self._write_lock:
                shutil.rmtree(self.directory)
        return n


def list_cache(root: Path) -> dict[str, int]:
    """Entry count per config digest under a cache root."""
    root = Path(root)
    if not root.exists():
        return {}
    return {
        d.name: sum(1 for _ in d.rglob("*.pemb"))
        for d in sorted(root.iterdir())
        if d.is_dir()
    }
