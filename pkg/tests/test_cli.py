import json

import numpy as np
import pytest

from lightfield.cli import main
from lightfield.images import load_png
from lightfield.metrics import BenchReport
from lightfield.model import Checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset + single-scene checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    dataset = root / "data"
    assert main([
        "dataset-gen", "--scenes", "2", "--views", "3", "--res", "16",
        "--out", str(dataset), "--seed", "5",
    ]) == 0
    ckpt_dir = root / "single"
    assert main([
        "train", "--dataset", str(dataset), "--out", str(ckpt_dir),
        "--mode", "single", "--scene", "0", "--steps", "30", "--batch", "64",
        "--hidden", "16", "--lr", "1e-3", "--validate-every", "15",
    ]) == 0
    return root, dataset, ckpt_dir / "scene.ckpt"


class TestDatasetGen:
    def test_counts_and_record(self, workspace):
        root, dataset, _ = workspace
        pngs = sorted(dataset.glob("scene_*/rgb/*.png"))
        assert len(pngs) == 6  # 2 scenes x 3 views
        record = json.loads((dataset / "run_record.txt").read_text())
        assert record["command"] == "dataset-gen"
        assert record["config"]["seed"] == 5


class TestTrainAndRender:
    def test_checkpoint_written(self, workspace):
        _, _, ckpt_path = workspace
        ckpt = Checkpoint.load(ckpt_path)
        assert "lfn_params" in ckpt.arrays

    def test_render_writes_png_and_timing_line(self, workspace, tmp_path, capsys):
        _, _, ckpt_path = workspace
        out = tmp_path / "frame.png"
        assert main([
            "render", "--checkpoint", str(ckpt_path), "--out", str(out),
            "--res", "16", "--azimuth", "0.4",
        ]) == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert "ms=" in line and "evals=256" in line
        assert load_png(out).shape == (16, 16, 3)
        assert (tmp_path / "run_record.txt").is_file()

    def test_depth_and_epi_outputs(self, workspace, tmp_path):
        _, _, ckpt_path = workspace
        assert main([
            "depth", "--checkpoint", str(ckpt_path), "--out", str(tmp_path / "d.f32"),
            "--png", str(tmp_path / "d.png"), "--res", "8",
        ]) == 0
        assert (tmp_path / "d.f32").is_file() and (tmp_path / "d.png").is_file()
        assert main([
            "epi", "--checkpoint", str(ckpt_path), "--out", str(tmp_path / "e.png"),
            "--res", "8", "--pixel", "4,4", "--grid", "12",
        ]) == 0
        assert load_png(tmp_path / "e.png").shape == (12, 12, 3)

    def test_infer_runs_against_prior_checkpoint(self, workspace, tmp_path, tiny_meta_checkpoint):
        _, dataset, _ = workspace
        # the tiny dataset here is 16x16; the shared fixture checkpoint fits any size
        prior_path = tmp_path / "prior.ckpt"
        tiny_meta_checkpoint.save(prior_path)
        assert main([
            "infer", "--checkpoint", str(prior_path), "--dataset", str(dataset),
            "--scene", "0", "--view", "0", "--steps", "3", "--out", str(tmp_path / "inf"),
        ]) == 0
        inferred = Checkpoint.load(tmp_path / "inf" / "inferred.ckpt")
        assert inferred.arrays["latents"].shape[0] == 1


class TestBench:
    def test_report_lines_parse(self, tmp_path, capsys):
        assert main([
            "bench", "--res", "16", "--samples", "4", "--runs", "1",
            "--hidden", "16", "--out", str(tmp_path / "bench.txt"), "--kernels",
        ]) == 0
        out = capsys.readouterr().out
        assert "lfn ms" in out and "baseline ms" in out
        report = BenchReport.from_text((tmp_path / "bench.txt").read_text())
        assert report.lfn_evals == 256
        assert report.baseline_evals == 256 * 4
        assert report.eval_ratio == 4.0
        assert "kernel numpy" in out  # kernel microbench lines


class TestErrors:
    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["render", "--no-such-flag"])
        assert exc.value.code == 2

    def test_runtime_failure_exits_1(self, tmp_path, capsys):
        code = main([
            "render", "--checkpoint", str(tmp_path / "missing.ckpt"),
            "--out", str(tmp_path / "x.png"),
        ])
        assert code == 1
        assert "error:" in capsys.readouterr().err
