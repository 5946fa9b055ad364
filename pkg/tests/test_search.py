"""Tests for the hyperparameter search space and the random search loop."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from src.backend import ToyBackend
from src.config import Config
from src.datasets import synthetic_pairs
from src.errors import ConfigError, DatasetError
from src.models import HyperParams
from src.search import SearchSpace, load_search_space, random_search, sample_hyperparams
from src.utils import numpy_rng


def _factory() -> ToyBackend:
    return ToyBackend(seed=0, input_size=128)


def _narrow_space() -> SearchSpace:
    return SearchSpace(opt_steps=(2, 3), layer_pool=(7, 8, 9), max_layers=2)


def _config(tmp_path: Path) -> Config:
    return Config(hp=HyperParams(n_embeddings=1, n_inference_crops=2), cache_dir=tmp_path)


class TestSearchSpace:
    def test_samples_within_ranges(self) -> None:
        space = SearchSpace()
        rng = numpy_rng(0)
        for _ in range(200):
            hp = sample_hyperparams(rng, space, HyperParams())
            assert 1 <= len(hp.layers) <= 4
            assert list(hp.layers) == sorted(set(hp.layers))
            assert set(hp.layers) <= set(range(7, 16))
            assert 5e-4 <= hp.learning_rate <= 1e-2
            assert 8.0 <= hp.sigma <= 32.0
            assert 1 <= hp.timestep <= 10
            assert 100 <= hp.opt_steps <= 300
            assert 0.5 <= hp.crop_fraction <= 1.0
            assert hp.n_embeddings == 10

    def test_inverted_range(self) -> None:
        with pytest.raises(ValueError, match="sigma out of range"):
            SearchSpace(sigma=(10.0, 5.0))

    def test_crop_fraction_bounds(self) -> None:
        with pytest.raises(ValueError, match="crop_fraction out of range"):
            SearchSpace(crop_fraction=(0.5, 1.5))

    def test_max_layers_bound(self) -> None:
        with pytest.raises(ValueError, match="max_layers out of range"):
            SearchSpace(layer_pool=(7, 8), max_layers=3)


class TestLoadSearchSpace:
    def test_yaml_overrides(self, tmp_path: Path) -> None:
        path = tmp_path / "space.yaml"
        path.write_text("sigma: [10, 20]\nlayer_pool: [7, 8, 9, 10]\n", encoding="utf-8")
        space = load_search_space(path)
        assert space.sigma == (10.0, 20.0)
        assert space.layer_pool == (7, 8, 9, 10)
        assert space.opt_steps == (100, 300)

    def test_unknown_key(self, tmp_path: Path) -> None:
        path = tmp_path / "space.yaml"
        path.write_text("temperature: [1, 2]\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="temperature"):
            load_search_space(path)

    def test_missing(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError, match="file not found"):
            load_search_space(tmp_path / "none.yaml")


class TestRandomSearch:
    def test_single_trial(self, tmp_path: Path) -> None:
        pairs = synthetic_pairs(n=2, n_keypoints=2)
        log = tmp_path / "trials.jsonl"
        best, trials = random_search(
            pairs, _config(tmp_path), _factory, space=_narrow_space(), n_runs=1, n_corr=3,
            log_path=log,
        )
        assert len(trials) == 1
        assert best == trials[0].hp
        assert 0.0 <= trials[0].pck <= 1.0
        [line] = log.read_text().splitlines()
        assert json.loads(line)["trial_id"] == 0

    def test_seeded_and_best_is_max(self, tmp_path: Path) -> None:
        pairs = synthetic_pairs(n=2, n_keypoints=2)
        kwargs = dict(space=_narrow_space(), n_runs=3, n_corr=3, seed=5)
        best_a, trials_a = random_search(pairs, _config(tmp_path), _factory, **kwargs)  # type: ignore[arg-type]
        best_b, trials_b = random_search(pairs, _config(tmp_path), _factory, **kwargs)  # type: ignore[arg-type]
        assert trials_a == trials_b
        assert best_a == best_b
        assert [t.seed for t in trials_a] == [5, 6, 7]
        top = max(t.pck for t in trials_a)
        assert best_a == next(t.hp for t in trials_a if t.pck == top)

    def test_zero_runs(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError, match="n_runs"):
            random_search(synthetic_pairs(n=1), _config(tmp_path), _factory, n_runs=0)

    def test_empty_validation_set(self, tmp_path: Path) -> None:
        with pytest.raises(DatasetError, match="empty validation set"):
            random_search([], _config(tmp_path), _factory, n_runs=1)
