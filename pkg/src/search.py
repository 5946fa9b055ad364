"""Seeded random search over optimisation hyperparameters."""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .backend import Backend
from .config import Config, build_hyperparams
from .datasets import subsample_correspondences
from .errors import ConfigError, DatasetError
from .evaluation import Reference, default_backend_factory, evaluate_pairs
from .models import UNET_LAYER_COUNT, CorrespondencePair, HyperParams, TrialRecord
from .utils import atomic_write_text, logger, numpy_rng

SEARCH_ALPHA = 0.1


class SearchSpace(BaseModel):
    """Sampling ranges, all bounds inclusive."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    layer_pool: tuple[int, ...] = tuple(range(7, 16))
    max_layers: int = Field(default=4, ge=1)
    learning_rate: tuple[float, float] = (5e-4, 1e-2)
    sigma: tuple[float, float] = (8.0, 32.0)
    timestep: tuple[int, int] = (1, 10)
    opt_steps: tuple[int, int] = (100, 300)
    crop_fraction: tuple[float, float] = (0.5, 1.0)

    @model_validator(mode="after")
    def _check(self) -> SearchSpace:
        if not self.layer_pool or any(not 0 <= i < UNET_LAYER_COUNT for i in self.layer_pool):
            raise ValueError(f"layer_pool out of range: {self.layer_pool}")
        if self.max_layers > len(set(self.layer_pool)):
            raise ValueError("max_layers out of range: exceeds layer_pool size")
        for name in ("learning_rate", "sigma", "timestep", "opt_steps", "crop_fraction"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} out of range: low {lo} > high {hi}")
        if self.learning_rate[0] <= 0:
            raise ValueError("learning_rate out of range: must be > 0")
        if not (0 < self.crop_fraction[0] and self.crop_fraction[1] <= 1):
            raise ValueError("crop_fraction out of range: must lie in (0, 1]")
        return self


def load_search_space(path: Path | str) -> SearchSpace:
    """Read a YAML mapping of range overrides; missing keys keep the defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"space: file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"space: cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"space: expected a mapping in {path}")
    try:
        return SearchSpace(**data)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"])
        msg = str(err["msg"]).removeprefix("Value error, ")
        raise ConfigError(f"{key}: {msg}" if key else msg) from exc


def sample_hyperparams(rng: np.random.Generator, space: SearchSpace, base: HyperParams) -> HyperParams:
    """One draw: lr log-uniform, integer ranges uniform inclusive, the rest uniform."""
    pool = sorted(set(space.layer_pool))
    k = int(rng.integers(1, space.max_layers + 1))
    layers = tuple(sorted(int(i) for i in rng.choice(pool, size=k, replace=False)))
    lo, hi = space.learning_rate
    lr = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    values = {
        **base.model_dump(),
        "layers": layers,
        "learning_rate": float(lr),
        "sigma": float(rng.uniform(*space.sigma)),
        "timestep": int(rng.integers(space.timestep[0], space.timestep[1] + 1)),
        "opt_steps": int(rng.integers(space.opt_steps[0], space.opt_steps[1] + 1)),
        "crop_fraction": float(min(rng.uniform(*space.crop_fraction), 1.0)),
    }
    return build_hyperparams(values)


def format_trial_log(trials: Sequence[TrialRecord]) -> str:
    return "".join(t.model_dump_json() + "\n" for t in trials)


def random_search(
    pairs: Sequence[CorrespondencePair],
    config: Config,
    backend_factory: Callable[[], Backend] | None = None,
    space: SearchSpace | None = None,
    n_runs: int = 50,
    n_corr: int = 50,
    seed: int = 0,
    reference: Reference = "bbox",
    log_path: Path | None = None,
) -> tuple[HyperParams, list[TrialRecord]]:
    """Evaluate ``n_runs`` sampled configurations on one fixed correspondence subset.

    Trial i draws from a generator seeded ``seed + i`` and optimises with that
    seed. The winner is the highest PCK@0.1; ties go to the earliest trial.
    """
    space = space or SearchSpace()
    factory = backend_factory or default_backend_factory(config)
    if n_runs < 1:
        raise ConfigError(f"n_runs out of range: {n_runs} < 1")
    subset = subsample_correspondences(list(pairs), n_corr, seed)
    if not any(p.keypoints for p in subset):
        raise DatasetError("empty validation set")
    logger.info(
        "Random search: %d trials on %d correspondences",
        n_runs, sum(len(p.keypoints) for p in subset),
    )

    trials: list[TrialRecord] = []
    for trial in range(n_runs):
        trial_seed = seed + trial
        hp = sample_hyperparams(numpy_rng(trial_seed), space, config.hp)
        trial_config = replace(config, hp=hp, seed=trial_seed)
        run = evaluate_pairs(
            subset, trial_config, factory,
            alphas=(SEARCH_ALPHA,), reference=reference, dataset=f"trial{trial}", use_cache=False,
        )
        score = run.report.overall(SEARCH_ALPHA).pck
        trials.append(TrialRecord(trial_id=trial, seed=trial_seed, hp=hp, pck=score))
        logger.info(
            "Trial %d/%d layers=%s lr=%.2e sigma=%.1f t=%d steps=%d crop=%.3f -> PCK@0.1 %.1f",
            trial + 1, n_runs, list(hp.layers), hp.learning_rate, hp.sigma,
            hp.timestep, hp.opt_steps, hp.crop_fraction, 100 * score,
        )
        if log_path is not None:
            atomic_write_text(Path(log_path), format_trial_log(trials))

    best = max(trials, key=lambda t: (t.pck, -t.trial_id))
    logger.info("Best trial %d with PCK@0.1 %.1f", best.trial_id, 100 * best.pck)
    return best.hp, trials
