"""Integration tests for CLI argument parsing and command wiring."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
import torch

import src.cli
import src.evaluation
from src.attnmap import read_map
from src.backend import Backend, ToyBackend
from src.cli import _line_reference, build_parser, run
from src.config import load_config
from src.images import coordinate_image
from src.models import BBox
from tests.conftest import write_png

FAST_CONFIG = "opt_steps = 5\nn_embeddings = 1\nn_inference_crops = 2\n"


@pytest.fixture()
def backend_calls(monkeypatch: pytest.MonkeyPatch) -> list[str]:
    """Swap in a small toy backend and record every construction."""
    calls: list[str] = []

    def fake(name: str, checkpoint_path: object = None, device: str = "auto", seed: int = 0) -> Backend:
        calls.append(name)
        return ToyBackend(seed=seed, input_size=128)

    monkeypatch.setattr(src.cli, "create_backend", fake)
    monkeypatch.setattr(src.evaluation, "create_backend", fake)
    return calls


@pytest.fixture()
def conf(tmp_path: Path) -> Path:
    path = tmp_path / "fast.conf"
    path.write_text(FAST_CONFIG, encoding="utf-8")
    return path


@pytest.fixture()
def images(tmp_path: Path) -> dict[str, Path]:
    return {
        "src": write_png(tmp_path / "img" / "src.png", coordinate_image("src", 64, 64)),
        "t1": write_png(tmp_path / "img" / "t1.png", coordinate_image("t1", 64, 64, scale=0.8)),
        "t2": write_png(tmp_path / "img" / "t2.png", coordinate_image("t2", 48, 64)),
    }


class TestBuildParser:
    def test_evaluate_defaults(self) -> None:
        args = build_parser().parse_args(["evaluate", "--dataset", "pfwillow"])
        assert args.alphas == "0.05,0.1"
        assert args.split == "test"
        assert args.out == "reports"
        assert args.per_layer is False
        assert args.preset is None

    def test_sweep_defaults_to_val(self) -> None:
        args = build_parser().parse_args(["sweep", "--dataset", "spair"])
        assert args.split == "val"
        assert args.runs == 50
        assert args.n_corr == 50

    def test_train_split_accepted(self) -> None:
        args = build_parser().parse_args(["evaluate", "--dataset", "spair", "--split", "train"])
        assert args.split == "train"

    def test_repeated_queries(self) -> None:
        args = build_parser().parse_args([
            "match", "--source", "a.png", "--target", "b.png", "c.png",
            "--query", "0.1,0.2", "--query", "0.3,0.4",
        ])
        assert args.query == ["0.1,0.2", "0.3,0.4"]
        assert args.target == ["b.png", "c.png"]

    def test_unknown_dataset(self) -> None:
        with pytest.raises(SystemExit):
            build_parser().parse_args(["evaluate", "--dataset", "coco"])


class TestOptimize:
    def test_second_run_hits_cache(
        self, backend_calls: list[str], conf: Path, images: dict[str, Path], tmp_path: Path,
    ) -> None:
        argv = [
            "optimize", "--image", str(images["src"]), "--query", "0.4,0.6",
            "--config", str(conf), "--cache-dir", str(tmp_path / "cache"),
        ]
        assert run(argv) == 0
        assert backend_calls == ["toy"]
        assert run(argv) == 0
        assert backend_calls == ["toy"]
        assert len(list((tmp_path / "cache").rglob("*.pemb"))) == 1

    def test_cache_listing_and_clear(
        self, backend_calls: list[str], conf: Path, images: dict[str, Path], tmp_path: Path,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        common = ["--config", str(conf), "--cache-dir", str(tmp_path / "cache")]
        assert run(["optimize", "--image", str(images["src"]), "--query", "0.5,0.5", *common]) == 0
        capsys.readouterr()
        assert run(["cache", "--list", *common]) == 0
        listing = capsys.readouterr().out.split()
        assert listing[1:] == ["1", "*"]
        assert run(["cache", "--clear", *common]) == 0
        assert list((tmp_path / "cache").rglob("*.pemb")) == []


class TestMatch:
    def test_one_line_per_query_and_target(
        self, backend_calls: list[str], conf: Path, images: dict[str, Path], tmp_path: Path,
    ) -> None:
        out = tmp_path / "res" / "r.csv"
        argv = [
            "match", "--source", str(images["src"]), "--target", str(images["t1"]), str(images["t2"]),
            "--query", "0.3,0.3", "--query", "0.6,0.7", "--out", str(out), "--overlay",
            "--config", str(conf), "--cache-dir", str(tmp_path / "cache"),
        ]
        assert run(argv) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 4
        assert [line.split(",")[1] for line in lines] == ["t1", "t2", "t1", "t2"]
        assert all(line.endswith((",ok", ",degenerate")) for line in lines)
        assert sorted(p.name for p in out.parent.glob("*.png")) == [
            "r_q0_t1.png", "r_q0_t2.png", "r_q1_t1.png", "r_q1_t2.png",
        ]
        assert sorted(p.name for p in out.parent.glob("*.amap")) == [
            "r_q0_t1.amap", "r_q0_t2.amap", "r_q1_t1.amap", "r_q1_t2.amap",
        ]
        amap = read_map(out.parent / "r_q1_t2.amap")
        assert bool(torch.isfinite(amap.values).all())

        heat = tmp_path / "heat.png"
        argv = [
            "visualize", "--kind", "heatmap", "--image", str(images["t2"]),
            "--map", str(out.parent / "r_q1_t2.amap"), "--out", str(heat), "--cache-dir", str(tmp_path),
        ]
        assert run(argv) == 0
        assert heat.exists()

    def test_keypoint_file(
        self, backend_calls: list[str], conf: Path, images: dict[str, Path], tmp_path: Path,
    ) -> None:
        kps = tmp_path / "kps.csv"
        kps.write_text("# x,y\n0.2,0.2\n0.8,0.4\n", encoding="utf-8")
        out = tmp_path / "r.csv"
        argv = [
            "match", "--source", str(images["src"]), "--target", str(images["t1"]),
            "--keypoints", str(kps), "--out", str(out),
            "--config", str(conf), "--cache-dir", str(tmp_path / "cache"),
        ]
        assert run(argv) == 0
        assert len(out.read_text().splitlines()) == 2

    def test_missing_image_exits_1(self, backend_calls: list[str], tmp_path: Path) -> None:
        argv = [
            "match", "--source", str(tmp_path / "nope.png"), "--target", str(tmp_path / "x.png"),
            "--query", "0.5,0.5", "--cache-dir", str(tmp_path / "cache"),
        ]
        assert run(argv) == 1

    def test_bad_query_exits_1(self, backend_calls: list[str], images: dict[str, Path], tmp_path: Path) -> None:
        argv = [
            "match", "--source", str(images["src"]), "--target", str(images["t1"]),
            "--query", "1.5,0.5", "--cache-dir", str(tmp_path / "cache"),
        ]
        assert run(argv) == 1
        assert backend_calls == []


class TestEvaluate:
    def _evaluate(self, conf: Path, tmp_path: Path, tag: str) -> Path:
        out = tmp_path / f"out_{tag}"
        argv = [
            "evaluate", "--dataset", "synthetic", "--limit", "4",
            "--config", str(conf), "--cache-dir", str(tmp_path / f"cache_{tag}"), "--out", str(out),
        ]
        assert run(argv) == 0
        return out

    def test_reports_are_reproducible(
        self, backend_calls: list[str], conf: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str],
    ) -> None:
        first = self._evaluate(conf, tmp_path, "a")
        second = self._evaluate(conf, tmp_path, "b")
        for name in ("synthetic_test_pck.csv", "synthetic_test_pck.txt", "synthetic_test_predictions.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()
        rows = (first / "synthetic_test_pck.csv").read_text().splitlines()
        assert rows[0] == "dataset,class,alpha,correct,total,pck"
        assert any(r.startswith("synthetic,all,0.1,") and ",4," in r for r in rows)
        assert len((first / "synthetic_test_predictions.csv").read_text().splitlines()) == 4
        assert "PCK@0.1" in capsys.readouterr().out

    def test_missing_root_exits_1(self, backend_calls: list[str], tmp_path: Path) -> None:
        argv = ["evaluate", "--dataset", "spair", "--cache-dir", str(tmp_path), "--out", str(tmp_path / "o")]
        assert run(argv) == 1


class TestSweep:
    def test_best_config_reloads(self, backend_calls: list[str], conf: Path, tmp_path: Path) -> None:
        space = tmp_path / "space.yaml"
        space.write_text("opt_steps: [2, 3]\nlayer_pool: [7, 8, 9]\nmax_layers: 2\n", encoding="utf-8")
        out = tmp_path / "sweep"
        argv = [
            "sweep", "--dataset", "synthetic", "--runs", "2", "--n-corr", "3", "--space", str(space),
            "--config", str(conf), "--cache-dir", str(tmp_path / "cache"), "--out", str(out),
        ]
        assert run(argv) == 0
        trials = [json.loads(line) for line in (out / "trials.jsonl").read_text().splitlines()]
        assert [t["trial_id"] for t in trials] == [0, 1]
        best = load_config(out / "best.conf")
        assert 2 <= best.hp.opt_steps <= 3
        assert set(best.hp.layers) <= {7, 8, 9}
        assert best.hp.n_embeddings == 1


class TestManifest:
    def test_synthetic_listing(self, tmp_path: Path) -> None:
        out = tmp_path / "manifest.txt"
        assert run(["manifest", "--dataset", "synthetic", "--out", str(out), "--cache-dir", str(tmp_path)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 5
        assert lines[0] == "ramp, syn000_src, syn000_tgt, 4"


class TestVisualize:
    def test_lines_figure(self, images: dict[str, Path], tmp_path: Path) -> None:
        results = tmp_path / "r.csv"
        results.write_text(
            "src,t1,0.300000,0.300000,0.310000,0.300000,0.900000,ok\n"
            "src,t1,0.600000,0.700000,0.100000,0.100000,0.400000,ok\n",
            encoding="utf-8",
        )
        gt = tmp_path / "gt.csv"
        gt.write_text("0.3,0.3\n0.6,0.7\n", encoding="utf-8")
        out = tmp_path / "fig.png"
        argv = [
            "visualize", "--kind", "lines", "--source", str(images["src"]), "--target", str(images["t1"]),
            "--results", str(results), "--gt", str(gt), "--out", str(out), "--cache-dir", str(tmp_path),
        ]
        assert run(argv) == 0
        assert out.exists()

    def test_layer_panels(
        self, backend_calls: list[str], conf: Path, images: dict[str, Path], tmp_path: Path,
    ) -> None:
        out = tmp_path / "layers.png"
        argv = [
            "visualize", "--kind", "layers", "--source", str(images["src"]), "--target", str(images["t2"]),
            "--query", "0.5,0.5", "--out", str(out),
            "--config", str(conf), "--cache-dir", str(tmp_path / "cache"),
        ]
        assert run(argv) == 0
        assert out.exists()

    def test_lines_need_results(self, images: dict[str, Path], tmp_path: Path) -> None:
        argv = [
            "visualize", "--kind", "lines", "--source", str(images["src"]), "--target", str(images["t1"]),
            "--out", str(tmp_path / "f.png"), "--cache-dir", str(tmp_path),
        ]
        assert run(argv) == 1

    def test_lines_bbox_sets_threshold_reference(
        self, images: dict[str, Path], tmp_path: Path, monkeypatch: pytest.MonkeyPatch,
    ) -> None:
        results = tmp_path / "r.csv"
        results.write_text("src,t1,0.300000,0.300000,0.310000,0.300000,0.900000,ok\n", encoding="utf-8")
        gt = tmp_path / "gt.csv"
        gt.write_text("0.3,0.3\n", encoding="utf-8")
        seen: list[float] = []
        real = src.cli.line_colors

        def spy(results, truth, size, ref, spec):  # type: ignore[no-untyped-def]
            seen.append(ref)
            return real(results, truth, size, ref, spec)

        monkeypatch.setattr(src.cli, "line_colors", spy)
        base = [
            "visualize", "--kind", "lines", "--source", str(images["src"]), "--target", str(images["t1"]),
            "--results", str(results), "--gt", str(gt), "--cache-dir", str(tmp_path),
        ]
        assert run([*base, "--out", str(tmp_path / "a.png")]) == 0
        assert run([*base, "--out", str(tmp_path / "b.png"), "--bbox", "0.25,0.0,0.5,0.5"]) == 0
        assert seen == [64.0, 32.0]

    def test_bad_bbox_exits_1(self, images: dict[str, Path], tmp_path: Path) -> None:
        results = tmp_path / "r.csv"
        results.write_text("src,t1,0.300000,0.300000,0.310000,0.300000,0.900000,ok\n", encoding="utf-8")
        gt = tmp_path / "gt.csv"
        gt.write_text("0.3,0.3\n", encoding="utf-8")
        argv = [
            "visualize", "--kind", "lines", "--source", str(images["src"]), "--target", str(images["t1"]),
            "--results", str(results), "--gt", str(gt), "--bbox", "0.5,0.5,0.2,0.9",
            "--out", str(tmp_path / "f.png"), "--cache-dir", str(tmp_path),
        ]
        assert run(argv) == 1


class TestLineReference:
    def test_image_longer_side(self) -> None:
        assert _line_reference(coordinate_image("t", 100, 200), None) == 200.0

    def test_bbox_longer_side(self) -> None:
        bbox = BBox(x1=0.05, y1=0.1, x2=0.55, y2=0.6)
        assert _line_reference(coordinate_image("t", 100, 200), bbox) == pytest.approx(100.0)
