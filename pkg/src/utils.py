"""Utility functions: logging setup, atomic writes, digests, seeding."""

from __future__ import annotations

import hashlib
import logging
import os
import tempfile
import threading
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
import torch

T = TypeVar("T")
R = TypeVar("R")


def setup_logging(verbose: bool = False) -> logging.Logger:
    """Configure and return the package logger."""
    logger = logging.getLogger("diffmatch")
    if not logger.handlers:
        handler = logging.StreamHandler()
        fmt = "%(asctime)s [%(levelname)s] %(message)s"
        handler.setFormatter(logging.Formatter(fmt, datefmt="%H:%M:%S"))
        logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    return logger


logger = setup_logging()


# ---------------------------------------------------------------------------
# Filesystem helpers
# ---------------------------------------------------------------------------

def ensure_dir(path: Path) -> Path:
    """Create directory (and parents) if it doesn't exist, return path."""
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    """Write bytes to a temp file in the target directory, then rename over path."""
    ensure_dir(path.parent)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    """UTF-8 variant of atomic_write_bytes."""
    return atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Digests and seeds
# ---------------------------------------------------------------------------

def short_digest(*parts: str, length: int = 16) -> str:
    """SHA256 over the joined parts, truncated for use in paths."""
    combined = "\x1f".join(parts)
    return hashlib.sha256(combined.encode("utf-8")).hexdigest()[:length]


def file_sha256(path: Path, chunk_size: int = 1 << 20) -> str:
    """Full SHA256 of a file, streamed."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(chunk_size):
            h.update(chunk)
    return h.hexdigest()


def torch_generator(seed: int, device: str | torch.device = "cpu") -> torch.Generator:
    """A torch Generator seeded deterministically."""
    gen = torch.Generator(device=device)
    gen.manual_seed(int(seed))
    return gen


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def resolve_device(device: str) -> torch.device:
    """Map 'auto' to cuda when available, else cpu."""
    if device == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(device)


def format_coord(value: float) -> str:
    """Six-decimal rendering used by every line-delimited output."""
    return f"{value:.6f}"


# ---------------------------------------------------------------------------
# Worker pool
# ---------------------------------------------------------------------------

def map_with_backends(
    fn: Callable[[Any, T], R],
    items: Sequence[T],
    backend_factory: Callable[[], Any],
    workers: int = 1,
) -> list[R]:
    """Apply ``fn(backend, item)`` to every item, one backend per worker thread.

    Results come back in input order regardless of completion order.
    """
    if workers <= 1 or len(items) <= 1:
        backend = backend_factory()
        return [fn(backend, item) for item in items]

    local = threading.local()

    def run(item: T) -> R:
        if not hasattr(local, "backend"):
            local.backend = backend_factory()
        return fn(local.backend, item)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, items))
