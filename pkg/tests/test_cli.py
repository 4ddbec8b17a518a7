import json
import subprocess
import sys

import numpy as np
import pytest

from triframe.cli import main
from triframe.frame_io import read_clip, read_png_sequence, write_clip
from triframe.metrics import parse_report, psnr
from triframe.model import GeneratorConfig, init_generator, load_checkpoint, save_checkpoint
from triframe.synthetic import synthetic_clip


@pytest.fixture
def workspace(tmp_path):
    clip = synthetic_clip(100, 100, frames=4, seed=2)
    (tmp_path / "pristine").mkdir()
    write_clip(clip, tmp_path / "pristine" / "a.y4m")
    write_clip(synthetic_clip(112, 96, frames=3, seed=3), tmp_path / "pristine" / "b.y4m")
    save_checkpoint(init_generator(GeneratorConfig(hidden_width=4, residual_blocks=1)),
                    tmp_path / "id.ckpt")
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def test_degrade_y4m(workspace):
    src = workspace / "pristine" / "a.y4m"
    assert run("degrade", "--in", src, "--strength", 6, "--out", workspace / "d.y4m") == 0
    a, b = read_clip(src), read_clip(workspace / "d.y4m")
    assert len(a) == len(b) and 20 < psnr(b.array(), a.array()) < 60


def test_degrade_raw_needs_geometry(workspace):
    raw = workspace / "x.yuv"
    raw.write_bytes(bytes(16 * 16 * 3 * 2))
    assert run("degrade", "--in", raw, "--strength", 1, "--out", workspace / "o.yuv") == 1
    assert run("degrade", "--in", raw, "--strength", 1, "--out", workspace / "o.yuv",
               "--width", 16, "--height", 16, "--subsampling", 444) == 0
    assert (workspace / "o.yuv").stat().st_size == 16 * 16 * 3 * 2


def test_dataset_train_enhance_evaluate(workspace):
    ds, ck, cfg = workspace / "d.bin", workspace / "m.ckpt", workspace / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "batch_size": 2, "hidden_width": 4,
                               "residual_blocks": 1, "max_steps": 2}))
    assert run("dataset", "--pristine", workspace / "pristine", "--strength", 6, "--count", 4,
               "--seed", 1, "--out", ds) == 0
    assert run("train", "--dataset", ds, "--config", cfg, "--out", ck) == 0
    assert load_checkpoint(ck).meta["steps"] == 2
    src = workspace / "pristine" / "a.y4m"
    assert run("enhance", "--model", ck, "--in", src, "--out", workspace / "e.y4m",
               "--png-dir", workspace / "png") == 0
    assert len(read_png_sequence(workspace / "png")) == 4
    report = workspace / "r.txt"
    assert run("evaluate", "--model", ck, "--decoded", workspace / "e.y4m", "--pristine", src,
               "--color", "rgb", "--report", report) == 0
    parsed = parse_report(report.read_text())
    assert len(parsed["frames"]) == 4 and parsed["mean"] is not None


def test_identity_enhance_preserves_codes(workspace):
    src = workspace / "pristine" / "a.y4m"
    out = workspace / "e.y4m"
    assert run("enhance", "--model", workspace / "id.ckpt", "--in", src, "--out", out) == 0
    assert out.read_bytes() == src.read_bytes()


def test_resume_requires_matching_config(workspace):
    ds = workspace / "d.bin"
    run("dataset", "--pristine", workspace / "pristine", "--strength", 6, "--count", 2, "--out", ds)
    cfg = workspace / "c.json"
    cfg.write_text(json.dumps({"hidden_width": 8, "residual_blocks": 1, "max_steps": 1}))
    assert run("train", "--dataset", ds, "--config", cfg, "--resume", workspace / "id.ckpt",
               "--out", workspace / "m.ckpt") == 1


def test_exit_codes(workspace, capsys):
    assert run("enhance", "--model", workspace / "absent.ckpt", "--in", "x.y4m", "--out", "y.y4m") == 2
    assert run("train") == 1
    assert run("bogus") == 1
    bad = workspace / "bad.y4m"
    bad.write_bytes(b"NOTY4M W16 H16\n")
    assert run("enhance", "--model", workspace / "id.ckpt", "--in", bad, "--out", "y.y4m") == 1
    assert run("dataset", "--pristine", workspace / "nowhere", "--strength", 1, "--count", 1,
               "--out", workspace / "d.bin") == 2
    assert "error" in capsys.readouterr().err


def test_non_finite_training_exits_3(workspace):
    from triframe.pipeline import DegradeSpec, build_dataset, save_dataset

    pairs = build_dataset([read_clip(workspace / "pristine" / "a.y4m")], DegradeSpec(6.0), 2)
    pairs[0].degraded.data[:] = np.nan
    save_dataset(pairs, workspace / "nan.bin")
    cfg = workspace / "c.json"
    cfg.write_text(json.dumps({"hidden_width": 4, "residual_blocks": 1, "batch_size": 2}))
    assert run("train", "--dataset", workspace / "nan.bin", "--config", cfg,
               "--out", workspace / "m.ckpt") == 3
    assert not (workspace / "m.ckpt").exists()


def test_selftest_subprocess():
    proc = subprocess.run([sys.executable, "-m", "triframe", "selftest"], capture_output=True,
                          text=True, timeout=120)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert proc.stdout.count("PASS") == 4 and "FAIL" not in proc.stdout
