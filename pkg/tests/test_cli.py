import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from admgs import fields
from admgs.cli import build_id, main
from admgs.io import read_pfm, read_png
from admgs.synth import SUITES
from admgs.trainer import Dataset, load_state, render_frame

TINY_FLAGS = ["--iterations=4", "--sky_count=40", "--geo_dim=8", "--emb_dim=8"]


@pytest.fixture(scope="module")
def run_dir(tiny_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(tiny_dir), "--out", str(out), *TINY_FLAGS]) == 0
    return out


def ckpt(run_dir):
    return str(run_dir / "checkpoints" / "final.ckpt")


class TestGenData:
    def test_unknown_suite(self, tmp_path, capsys):
        assert main(["gen-data", "--suite", "nope", "--out", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        assert all(name in err for name in SUITES)

    def test_sanity_suite(self, tmp_path):
        assert main(["gen-data", "--suite", "sanity-1splat", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "manifest.json").exists()
        echo = json.loads((tmp_path / "config.json").read_text())
        assert echo["command"] == "gen-data" and echo["build_id"] == build_id()

    def test_missing_out_is_usage_error(self):
        assert main(["gen-data", "--suite", "sanity-1splat"]) == 2


class TestTrain:
    def test_outputs(self, run_dir):
        assert (run_dir / "checkpoints" / "final.ckpt").exists()
        lines = (run_dir / "step_log.jsonl").read_text().splitlines()
        assert len(lines) == 4 and "time_s" not in json.loads(lines[0])
        echo = json.loads((run_dir / "config.json").read_text())
        assert echo["config"]["iterations"] == 4 and echo["config"]["sky_count"] == 40
        assert json.loads((run_dir / "eval_test.json").read_text())["aggregate"]["count"] == 2

    def test_unknown_override(self, tiny_dir, tmp_path):
        assert main(["train", "--data", str(tiny_dir), "--out", str(tmp_path), "--itrations=4"]) == 2
        assert main(["train", "--data", str(tiny_dir), "--out", str(tmp_path), "--loss.bogus=1"]) == 2

    def test_config_file(self, tiny_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"iterations": 1, "sky_count": 40, "geo_dim": 8, "emb_dim": 8,
                                   "loss": {"lambda_scale": 0.0}}))
        assert main(["train", "--data", str(tiny_dir), "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 0
        echo = json.loads((tmp_path / "o" / "config.json").read_text())
        assert echo["config"]["loss"]["lambda_scale"] == 0.0 and echo["config"]["loss"]["lambda_ssim"] == 0.2

    def test_resume(self, tiny_dir, run_dir, tmp_path):
        assert main(["train", "--data", str(tiny_dir), "--out", str(tmp_path), "--resume", ckpt(run_dir),
                     "--iterations=6"]) == 0
        assert load_state(tmp_path / "checkpoints" / "final.ckpt").iteration == 6

    def test_divergence_keeps_last_good(self, tiny_dir, tmp_path, capsys):
        rc = main(["train", "--data", str(tiny_dir), "--out", str(tmp_path), *TINY_FLAGS, "--lr.scales=1e8"])
        assert rc == 3
        assert "diverged" in capsys.readouterr().err
        assert not (tmp_path / "checkpoints" / "final.ckpt").exists()
        state = load_state(tmp_path / "checkpoints" / "last_good.ckpt")
        assert state.iteration >= 1
        assert all(bool(torch.isfinite(t).all()) for t in state.params().values())


class TestRender:
    def test_render_matches_eval_frame(self, tiny_dir, run_dir, tmp_path):
        assert main(["render", "--checkpoint", ckpt(run_dir), "--traversal", "0", "--data", str(tiny_dir),
                     "--frame", "1", "--out", str(tmp_path)]) == 0
        assert read_pfm(tmp_path / "rgb.pfm").shape == (18, 24, 3)

    def test_frame_out_of_range(self, tiny_dir, run_dir, tmp_path, capsys):
        assert main(["render", "--checkpoint", ckpt(run_dir), "--traversal", "0", "--data", str(tiny_dir),
                     "--frame", "99", "--out", str(tmp_path)]) == 2
        assert "out of range" in capsys.readouterr().err

    def test_unknown_traversal(self, tiny_dir, run_dir, tmp_path):
        assert main(["render", "--checkpoint", ckpt(run_dir), "--traversal", "5", "--data", str(tiny_dir),
                     "--frame", "0", "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, tiny_dir, tmp_path):
        assert main(["render", "--checkpoint", str(tmp_path / "none.ckpt"), "--traversal", "0",
                     "--data", str(tiny_dir), "--frame", "0", "--out", str(tmp_path)]) == 2

    def test_camera_file(self, tiny_dir, run_dir, tmp_path):
        cam = Dataset(tiny_dir).frames[0].camera
        (tmp_path / "cam.json").write_text(json.dumps(cam.to_dict()))
        assert main(["render", "--checkpoint", ckpt(run_dir), "--traversal", "0", "--data", str(tiny_dir),
                     "--frame", "0", "--out", str(tmp_path / "ref")]) == 0
        assert main(["render", "--checkpoint", ckpt(run_dir), "--traversal", "0", "--camera",
                     str(tmp_path / "cam.json"), "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "rgb.pfm").read_bytes() == (tmp_path / "ref" / "rgb.pfm").read_bytes()


@pytest.fixture(scope="module")
def layers(tiny_dir, run_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("dec")
    assert main(["decompose", "--checkpoint", ckpt(run_dir), "--traversal", "1", "--data", str(tiny_dir),
                 "--frame", "2", "--out", str(out)]) == 0
    return out


class TestDecompose:
    def test_identity(self, layers, run_dir, tiny_dir):
        state = load_state(ckpt(run_dir))
        material = read_pfm(layers / "material.pfm").astype(np.float64)
        illum = read_pfm(layers / "illumination.pfm").astype(np.float64)
        f = Dataset(tiny_dir).frames[2]
        _, out = render_frame(state, f.camera, 1, f.timestamp)
        raw = out.rgb.numpy().astype(np.float64)
        recon = np.maximum(material, 0.01) * illum
        assert np.abs(recon - raw).max() <= 1e-5

    def test_normal_png_encoding(self, layers):
        n = read_pfm(layers / "normal.pfm")
        png = read_png(layers / "normal.png")
        assert np.abs(png - np.clip((n + 1) / 2, 0, 1)).max() <= 0.5 / 255 + 1e-6

    def test_all_layers(self, layers):
        for name in ("rgb", "material", "illumination", "normal", "depth", "static_mask"):
            assert (layers / f"{name}.pfm").exists() and (layers / f"{name}.png").exists()


class TestRelight:
    def test_strip_and_self_relight(self, tiny_dir, run_dir, tmp_path):
        assert main(["relight", "--checkpoint", ckpt(run_dir), "--data", str(tiny_dir), "--material-traversal",
                     "0", "--light-traversal", "0", "--frame", "0", "--out", str(tmp_path / "same")]) == 0
        assert main(["render", "--checkpoint", ckpt(run_dir), "--traversal", "0", "--data", str(tiny_dir),
                     "--frame", "0", "--out", str(tmp_path / "r")]) == 0
        assert (tmp_path / "same" / "relit.pfm").read_bytes() == (tmp_path / "r" / "rgb.pfm").read_bytes()
        strip = read_png(tmp_path / "same" / "strip.png")
        assert strip.shape == (18, 4 * 24, 3)

    def test_bad_traversal(self, tiny_dir, run_dir, tmp_path):
        assert main(["relight", "--checkpoint", ckpt(run_dir), "--data", str(tiny_dir), "--material-traversal",
                     "0", "--light-traversal", "7", "--frame", "0", "--out", str(tmp_path)]) == 2


class TestEval:
    def test_schema_and_mean(self, tiny_dir, run_dir, tmp_path):
        assert main(["eval", "--checkpoint", ckpt(run_dir), "--data", str(tiny_dir), "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "eval_test.json").read_text())
        for v in report["views"]:
            assert set(v) == {"frame", "traversal", "psnr_db", "ssim"}
        mean = np.mean([v["psnr_db"] for v in report["views"]])
        assert abs(report["aggregate"]["psnr_db"] - mean) <= 1e-9
        assert (tmp_path / "eval_test.txt").read_text().splitlines()[-1].split()[0] == "mean"

    def test_empty_split(self, tiny_dir, run_dir, tmp_path):
        assert main(["eval", "--checkpoint", ckpt(run_dir), "--data", str(tiny_dir), "--split", "val",
                     "--out", str(tmp_path)]) == 2


class TestGradCheck:
    def test_passes(self, tmp_path, capsys):
        assert main(["grad-check", "--out", str(tmp_path)]) == 0
        rows = json.loads((tmp_path / "grad_check.json").read_text())
        assert len(rows) >= 9

    def test_corrupted_backward_fails(self, monkeypatch, capsys):
        real = fields._run_backward

        def corrupted(*args):
            gws, gbs, xbar = real(*args)
            return [g * 1.01 for g in gws], gbs, xbar

        monkeypatch.setattr(fields, "_run_backward", corrupted)
        assert main(["grad-check"]) == 1
        assert "gradient mismatch in class" in capsys.readouterr().err


def test_no_command():
    assert main([]) == 2


def test_extra_args_rejected(tmp_path):
    assert main(["eval", "--checkpoint", "x", "--data", "y", "--out", str(tmp_path), "--bogus"]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "admgs.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "grad-check" in res.stdout
