"""Run configuration: environment, flat key = value config files, presets."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from .errors import ConfigError
from .models import HyperParams
from .utils import short_digest

BACKENDS = ("toy", "checkpoint")
DATASET_NAMES = ("spair", "pfwillow", "cub")

HP_KEYS = tuple(HyperParams.model_fields)
RUN_KEYS = ("backend", "checkpoint_path", "seed", "device")

# Per-dataset ensemble size / inference crop counts
PRESETS: dict[str, dict[str, int]] = {
    "spair": {"n_embeddings": 5, "n_inference_crops": 20},
    "pfwillow": {"n_embeddings": 10, "n_inference_crops": 30},
    "cub": {"n_embeddings": 10, "n_inference_crops": 30},
}

_RANGE_ERRORS = {"greater_than", "greater_than_equal", "less_than", "less_than_equal"}
_TUPLE_KEYS = {"layers", "loss_resolution"}


def _default_cache_dir() -> Path:
    return Path(".diffmatch_cache")


def build_hyperparams(values: dict[str, Any]) -> HyperParams:
    """Validate hyperparameters, converting pydantic errors to ConfigError."""
    try:
        return HyperParams(**values)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = str(err["loc"][0]) if err["loc"] else ""
        msg = str(err["msg"]).removeprefix("Value error, ")
        if err["type"] in _RANGE_ERRORS:
            raise ConfigError(f"{key} out of range: {msg}") from exc
        if key:
            raise ConfigError(f"{key}: {msg}") from exc
        raise ConfigError(msg) from exc


@dataclass
class Config:
    """Runtime configuration for embedding optimisation, matching and evaluation."""

    hp: HyperParams = field(default_factory=HyperParams)
    backend: str = "toy"
    checkpoint_path: Path | None = None
    seed: int = 0
    device: str = "auto"
    dataset_roots: dict[str, Path] = field(default_factory=dict)
    dataset_manifests: dict[str, Path] = field(default_factory=dict)
    cache_dir: Path = field(default_factory=_default_cache_dir)
    workers: int = 1
    augment: bool = True
    verbose: bool = False

    @classmethod
    def from_env(cls, **overrides: object) -> Config:
        """Load config from environment / .env file, with overrides."""
        load_dotenv()
        cfg = cls(
            cache_dir=Path(os.getenv("DIFFMATCH_CACHE", str(_default_cache_dir()))),
            device=os.getenv("DIFFMATCH_DEVICE", "auto"),
        )
        for key, val in overrides.items():
            if val is not None and hasattr(cfg, key):
                setattr(cfg, key, val)
        return cfg

    # -- derived copies ---------------------------------------------------

    def with_hp(self, **changes: object) -> Config:
        """Copy with some hyperparameters replaced (None values ignored)."""
        updates = {k: v for k, v in changes.items() if v is not None}
        if not updates:
            return self
        unknown = sorted(set(updates) - set(HP_KEYS))
        if unknown:
            raise ConfigError(f"unknown key: {unknown[0]}")
        return replace(self, hp=build_hyperparams({**self.hp.model_dump(), **updates}))

    def with_preset(self, name: str | None) -> Config:
        if name is None:
            return self
        if name not in PRESETS:
            raise ConfigError(f"preset: unknown preset {name!r} (choose from {', '.join(PRESETS)})")
        return self.with_hp(**PRESETS[name])

    # -- checks -----------------------------------------------------------

    def validate(self, dataset: str | None = None) -> list[str]:
        """Return list of validation errors (empty = OK)."""
        errors: list[str] = []
        if self.backend not in BACKENDS:
            errors.append(f"backend: unknown backend {self.backend!r} (choose from {', '.join(BACKENDS)})")
        if self.backend == "checkpoint":
            if self.checkpoint_path is None:
                errors.append("checkpoint_path: required when backend = checkpoint")
            elif not self.checkpoint_path.exists():
                errors.append(f"checkpoint_path: not found: {self.checkpoint_path}")
        if self.workers < 1:
            errors.append("workers out of range: must be >= 1")
        if dataset is not None and dataset != "synthetic":
            root = self.dataset_roots.get(dataset)
            if root is None:
                errors.append(f"dataset.{dataset}.root: not configured")
            elif not root.exists():
                errors.append(f"dataset.{dataset}.root: not found: {root}")
        return errors

    def digest(self) -> str:
        """Hash of every setting that affects optimised embeddings."""
        hp = self.hp.model_dump(exclude={"n_inference_crops"})
        payload = json.dumps(hp, sort_keys=True)
        ckpt = str(self.checkpoint_path) if self.checkpoint_path else ""
        return short_digest(payload, self.backend, ckpt, str(self.seed), str(self.augment))

    # -- serialisation ----------------------------------------------------

    def to_text(self) -> str:
        """Render as a config file that load_config reads back unchanged."""
        lines = ["# diffmatch configuration"]
        hp = self.hp.model_dump()
        for key in HP_KEYS:
            lines.append(f"{key} = {_render(hp[key])}")
        lines.append(f"backend = {self.backend}")
        if self.checkpoint_path is not None:
            lines.append(f"checkpoint_path = {self.checkpoint_path}")
        lines.append(f"seed = {self.seed}")
        lines.append(f"device = {self.device}")
        for name in sorted(self.dataset_roots):
            lines.append(f"dataset.{name}.root = {self.dataset_roots[name]}")
        for name in sorted(self.dataset_manifests):
            lines.append(f"dataset.{name}.manifest = {self.dataset_manifests[name]}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# File parsing
# ---------------------------------------------------------------------------

# a '#' opens a comment only at line start or after whitespace
_COMMENT = re.compile(r"(^|\s)#.*$")


def _render(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_render(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _decode(key: str, raw: str) -> Any:
    text = raw
    if key in _TUPLE_KEYS and not text.startswith("["):
        text = f"[{text}]"
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{key}: cannot parse value {raw!r}") from exc
    if key in _TUPLE_KEYS:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {raw!r}")
        return tuple(value)
    return value


def parse_config_text(text: str, base: Config | None = None, source: str = "<text>") -> Config:
    """Parse flat ``key = value`` text on top of ``base`` (defaults if None)."""
    cfg = base if base is not None else Config()
    hp_values: dict[str, Any] = cfg.hp.model_dump()
    run: dict[str, Any] = {}
    roots = dict(cfg.dataset_roots)
    manifests = dict(cfg.dataset_manifests)
    seen: set[str] = set()

    for lineno, line in enumerate(text.splitlines(), start=1):
        content = _COMMENT.sub("", line).strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {content!r}")
        key, raw = (part.strip() for part in content.split("=", 1))
        if not raw:
            raise ConfigError(f"{key}: empty value ({source}:{lineno})")
        if key in seen:
            raise ConfigError(f"{key}: duplicate key ({source}:{lineno})")
        seen.add(key)

        if key in HP_KEYS:
            hp_values[key] = _decode(key, raw)
        elif key in ("backend", "device"):
            run[key] = raw
        elif key == "checkpoint_path":
            run[key] = Path(raw)
        elif key == "seed":
            value = _decode(key, raw)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"seed: expected an integer, got {raw!r}")
            run[key] = value
        elif key.startswith("dataset."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in ("root", "manifest"):
                raise ConfigError(f"unknown key: {key}")
            if parts[1] not in DATASET_NAMES:
                raise ConfigError(f"{key}: unknown dataset {parts[1]!r}")
            (roots if parts[2] == "root" else manifests)[parts[1]] = Path(raw)
        else:
            raise ConfigError(f"unknown key: {key}")

    if "backend" in run and run["backend"] not in BACKENDS:
        raise ConfigError(f"backend: unknown backend {run['backend']!r}")
    return replace(
        cfg,
        hp=build_hyperparams(hp_values),
        dataset_roots=roots,
        dataset_manifests=manifests,
        **run,
    )


def load_config(path: Path | str, base: Config | None = None) -> Config:
    """Load and validate a config file; unspecified keys keep their defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: file not found: {path}")
    base = base if base is not None else Config.from_env()
    return parse_config_text(path.read_text(encoding="utf-8"), base=base, source=str(path))
