import json

import numpy as np
import pytest

from ktraj.cli import run
from ktraj.geometry import load_trajectory


def test_no_arguments_prints_usage(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_command_is_usage_error(capsys):
    assert run(["frobnicate"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_init_traj_radial_16(tmp_path, capsys):
    assert run(["--out-dir", str(tmp_path), "init-traj", "--kind", "radial", "--shots", "16"]) == 0
    traj = load_trajectory(tmp_path / "radial_16.ktraj")
    assert traj.points.shape == (16, 1000, 2)


def test_global_flags_after_subcommand(tmp_path):
    assert run(["init-traj", "--kind", "spiral", "--shots", "2", "--samples", "100",
                "--out-dir", str(tmp_path)]) == 0
    assert load_trajectory(tmp_path / "spiral_2.ktraj").points.shape == (2, 100, 2)


def test_bad_override_names_key(tmp_path, capsys):
    assert run(["--out-dir", str(tmp_path), "--set", "bogus_key=1", "init-traj"]) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    assert run(["--out-dir", str(tmp_path), "eval"]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_missing_trajectory_file(tmp_path, capsys):
    assert run(["--out-dir", str(tmp_path), "export-gradients", "--trajectory",
                str(tmp_path / "nope.ktraj")]) == 2
    assert "nope.ktraj" in capsys.readouterr().err


def test_export_gradients_from_initializer(tmp_path):
    args = ["--out-dir", str(tmp_path), "--set", "samples_per_shot=100", "--set", "n_control=10",
            "export-gradients"]
    assert run(args) == 0
    text = (tmp_path / "waveforms.csv").read_text().splitlines()
    assert len(text) > 100


def test_gradcheck_single_suite(capsys):
    assert run(["gradcheck", "--suite", "ode_adjoint", "--suite", "diffcore"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2
    assert run(["gradcheck", "--suite", "nope"]) == 1


_TINY = ["--set", "grid=16", "--set", "shots=2", "--set", "samples_per_shot=32", "--set", "n_control=8",
         "--set", "hidden=8", "--set", "coils=2", "--set", "levels=1", "--set", "base_channels=4",
         "--set", "field_gain=1.0", "--set", "k_extent=0.45", "--set", "n_train=2", "--set", "n_val=1",
         "--set", "n_test=5", "--set", "n_ellipses=2", "--set", "epochs=2", "--set", "warmup_epochs=1"]


def test_train_eval_psf_plot_pipeline(tmp_path, capsys):
    out = str(tmp_path)
    assert run(["--out-dir", out, *_TINY, "train", "--method", "both"]) == 0
    for m in ("learned", "fixed"):
        for f in ("history.csv", "field.ckpt", "recon.ckpt", "config.json"):
            assert (tmp_path / m / f).is_file()
    assert run(["--out-dir", out, "eval"]) == 0
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0] == "case,method,psnr_db,ssim" and len(rows) == 1 + 5 * 2
    summary = json.loads((tmp_path / "wilcoxon.json").read_text())
    assert "psnr_gain_db" in summary
    assert run(["--out-dir", out, "psf"]) == 0
    assert (tmp_path / "psf_learned.svg").is_file() and (tmp_path / "psf_fixed.raw").is_file()
    assert run(["--out-dir", out, "plot"]) == 0
    for f in ("trajectory.svg", "curves_learned.svg", "curves_fixed.svg"):
        assert (tmp_path / f).read_text().startswith("<svg")
    assert run(["--out-dir", out, "export-gradients", "--checkpoint", str(tmp_path / "learned")]) == 0


def test_train_is_repeatable(tmp_path):
    for d in ("a", "b"):
        assert run(["--out-dir", str(tmp_path / d), "--seed", "3", *_TINY, "train"]) == 0
    a = (tmp_path / "a" / "learned" / "history.csv").read_bytes()
    assert a == (tmp_path / "b" / "learned" / "history.csv").read_bytes()
