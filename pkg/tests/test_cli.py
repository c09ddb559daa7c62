import subprocess
import sys

import numpy as np
import pytest

from scoredenoise.cli import InputError, main, parse_config
from scoredenoise.geometry import read_xyz, write_xyz
from scoredenoise.mesh import make_cube, make_icosphere, write_obj
from scoredenoise.network import NetworkConfig, init_params, load_checkpoint, param_count, save_checkpoint

SMALL_NET = ["--graph-k", "4", "--block-widths", "8,8", "--score-hidden", "16"]


@pytest.fixture
def cube_obj(tmp_path):
    path = tmp_path / "cube.obj"
    write_obj(path, make_cube())
    return path


@pytest.fixture
def sphere_data(tmp_path):
    path = tmp_path / "sphere.obj"
    write_obj(path, make_icosphere(2))
    out = tmp_path / "data"
    assert main(["make-data", "--mesh", str(path), "--out-dir", str(out), "--count", "600", "--noise",
                 "gaussian:0.02", "--seed", "1"]) == 0
    return out


@pytest.fixture
def zero_ckpt(tmp_path):
    cfg = NetworkConfig(graph_k=4, block_widths=(8, 8), score_hidden=(16,))
    path = tmp_path / "zero.ckpt"
    save_checkpoint(path, init_params(cfg, 0), cfg)
    return path


def lines(path):
    return path.read_text().splitlines()


class TestMakeData:
    def test_counts(self, tmp_path, cube_obj, capsys):
        assert main(["make-data", "--mesh", str(cube_obj), "--out-dir", str(tmp_path / "o"), "--count", "2000"]) == 0
        assert len(lines(tmp_path / "o/cube_clean.xyz")) == 2000
        assert len(lines(tmp_path / "o/cube_noisy.xyz")) == 2000
        assert (tmp_path / "o/cube_mesh.obj").exists()
        out = capsys.readouterr().out
        assert "normalization" in out and "noise gaussian:0.01" in out

    def test_zero_noise(self, tmp_path, cube_obj):
        main(["make-data", "--mesh", str(cube_obj), "--out-dir", str(tmp_path), "--count", "300", "--noise",
              "gaussian:0"])
        assert (tmp_path / "cube_clean.xyz").read_bytes() == (tmp_path / "cube_noisy.xyz").read_bytes()

    def test_bad_mesh_and_noise(self, tmp_path, cube_obj, capsys):
        bad = tmp_path / "bad.obj"
        bad.write_text("v 0 0 0\nf 1 2 3\n")
        assert main(["make-data", "--mesh", str(bad), "--out-dir", str(tmp_path)]) == 2
        assert main(["make-data", "--mesh", str(tmp_path / "missing.obj"), "--out-dir", str(tmp_path)]) == 2
        assert main(["make-data", "--mesh", str(cube_obj), "--out-dir", str(tmp_path), "--noise", "pink:1"]) == 2
        assert "error:" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_and_csv(self, tmp_path, sphere_data):
        ckpt = tmp_path / "m.ckpt"
        argv = ["train", "--data-dir", str(sphere_data), "--out", str(ckpt), "--iterations", "200", "--patch-size",
                "200", "--seed", "3", "--loss", "point-only", *SMALL_NET]
        assert main(argv) == 0
        params, cfg, meta = load_checkpoint(ckpt)
        assert cfg == NetworkConfig(graph_k=4, block_widths=(8, 8), score_hidden=(16,))
        assert meta["loss"] == "point-only" and meta["iterations"] == "200"
        csv = lines(tmp_path / "m.ckpt.loss.csv")
        assert csv[0] == "step,loss" and len(csv) == 201
        assert np.abs(params).max() > 0

    def test_empty_dir(self, tmp_path):
        assert main(["train", "--data-dir", str(tmp_path), "--out", str(tmp_path / "m.ckpt")]) == 2

    def test_divergence_exit_code(self, tmp_path, sphere_data, capsys):
        argv = ["train", "--data-dir", str(sphere_data), "--out", str(tmp_path / "m.ckpt"), "--iterations", "50",
                "--patch-size", "200", "--lr", "1e300", *SMALL_NET]
        assert main(argv) == 3
        assert "diverged" in capsys.readouterr().err
        assert not (tmp_path / "m.ckpt").exists()


class TestDenoise:
    def test_zero_checkpoint_identity(self, tmp_path, sphere_data, zero_ckpt):
        noisy = sphere_data / "sphere_noisy.xyz"
        out = tmp_path / "d.xyz"
        assert main(["denoise", "--input", str(noisy), "--checkpoint", str(zero_ckpt), "--output", str(out),
                     "--patch-size", "200"]) == 0
        assert out.read_bytes() == noisy.read_bytes()

    def test_overrides_and_rejections(self, tmp_path, sphere_data, zero_ckpt):
        base = ["denoise", "--input", str(sphere_data / "sphere_noisy.xyz"), "--checkpoint", str(zero_ckpt),
                "--output", str(tmp_path / "d.xyz")]
        assert main(base + ["--steps", "0"]) == 2
        assert main(base + ["--gamma", "1.5"]) == 2
        assert main(base + ["--K", "0"]) == 2
        assert main(base + ["--mode", "direct", "--K", "1", "--alpha1", "0.5", "--steps", "3"]) == 0
        with pytest.raises(SystemExit) as info:
            main(base + ["--bogus"])
        assert info.value.code == 2

    def test_numeric_failure(self, tmp_path, sphere_data):
        cfg = NetworkConfig(graph_k=4, block_widths=(8, 8), score_hidden=(16,))
        ckpt = tmp_path / "huge.ckpt"
        save_checkpoint(ckpt, np.full(param_count(cfg), 3e38), cfg)
        code = main(["denoise", "--input", str(sphere_data / "sphere_noisy.xyz"), "--checkpoint", str(ckpt),
                     "--output", str(tmp_path / "d.xyz"), "--patch-size", "200"])
        assert code == 4

    def test_error_dump(self, tmp_path, sphere_data, zero_ckpt):
        err = tmp_path / "err.txt"
        assert main(["denoise", "--input", str(sphere_data / "sphere_clean.xyz"), "--checkpoint", str(zero_ckpt),
                     "--output", str(tmp_path / "d.xyz"), "--error-dump", str(err), "--mesh",
                     str(sphere_data / "sphere_mesh.obj"), "--patch-size", "200"]) == 0
        vals = np.loadtxt(err)
        assert vals.shape == (600, 4) and vals[:, 3].max() < 1e-5


class TestEvaluate:
    def test_clean_against_itself(self, sphere_data, capsys):
        clean = str(sphere_data / "sphere_clean.xyz")
        assert main(["evaluate", "--denoised", clean, "--clean", clean, "--mesh",
                     str(sphere_data / "sphere_mesh.obj")]) == 0
        head, row = capsys.readouterr().out.splitlines()
        rec = dict(zip(head.split(","), row.split(",")))
        assert rec["cd"] == "0.000" and rec["p2m"] == "0.000"
        assert main(["evaluate", "--denoised", clean, "--clean", clean, "--format", "table"]) == 0
        assert capsys.readouterr().out.splitlines()[1].split()[-1] == "0.000"

    def test_frame_mismatch(self, tmp_path, sphere_data):
        shifted = tmp_path / "shifted.xyz"
        write_xyz(shifted, read_xyz(sphere_data / "sphere_clean.xyz") * 3 + 1)
        assert main(["evaluate", "--denoised", str(shifted), "--clean", str(shifted)]) == 5
        other = tmp_path / "cube.obj"
        write_obj(other, make_cube())
        clean = str(sphere_data / "sphere_clean.xyz")
        assert main(["evaluate", "--denoised", clean, "--clean", clean, "--mesh", str(other)]) == 5


class TestUpsampleAndField:
    def test_upsample_size(self, tmp_path, sphere_data, zero_ckpt):
        out = tmp_path / "u.xyz"
        assert main(["upsample", "--input", str(sphere_data / "sphere_clean.xyz"), "--checkpoint", str(zero_ckpt),
                     "--output", str(out), "--ratio", "4", "--patch-size", "500"]) == 0
        assert len(lines(out)) == 2400

    def test_plane_oracle_field(self, tmp_path):
        out = tmp_path / "f.txt"
        assert main(["score-field", "--plane-oracle", "--sigma", "0.1", "--output", str(out), "--grid-n", "5"]) == 0
        d = np.loadtxt(out)
        assert d.shape == (125, 6)
        expect = np.column_stack([np.zeros(125), np.zeros(125), -d[:, 2] / 0.01])
        np.testing.assert_allclose(d[:, 3:], expect, rtol=1e-5, atol=1e-12)

    def test_network_field(self, tmp_path, sphere_data, zero_ckpt):
        out = tmp_path / "f.txt"
        assert main(["score-field", "--checkpoint", str(zero_ckpt), "--input", str(sphere_data / "sphere_noisy.xyz"),
                     "--output", str(out), "--grid-n", "3", "--patch-size", "200"]) == 0
        d = np.loadtxt(out)
        assert d.shape == (27, 6) and not d[:, 3:].any()
        assert main(["score-field", "--output", str(out)]) == 2


class TestConfig:
    def test_grammar(self):
        cfg = parse_config("# comment\nseed = 4\nnoise = gaussian:0.02  # trailing\n\nblock_widths = 4,5\n")
        assert cfg == {"seed": 4, "noise": "gaussian:0.02", "block_widths": (4, 5)}
        for bad in ("[train]\n", "nonsense\n", "colour = red\n", "seed = x\n"):
            with pytest.raises(InputError):
                parse_config(bad)

    def test_file_and_override(self, tmp_path, cube_obj):
        conf = tmp_path / "run.conf"
        conf.write_text("count = 150\nnoise = gaussian:0\n")
        out = tmp_path / "o"
        assert main(["make-data", "--mesh", str(cube_obj), "--out-dir", str(out), "--config", str(conf)]) == 0
        assert len(lines(out / "cube_clean.xyz")) == 150
        assert main(["make-data", "--mesh", str(cube_obj), "--out-dir", str(out), "--config", str(conf), "--count",
                     "120"]) == 0
        assert len(lines(out / "cube_clean.xyz")) == 120
        conf.write_text("colour = red\n")
        assert main(["make-data", "--mesh", str(cube_obj), "--out-dir", str(out), "--config", str(conf)]) == 2


@pytest.mark.parametrize("cmd", ["make-data", "train", "denoise", "evaluate", "upsample", "score-field"])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    assert "--" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "scoredenoise", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "0.1.0"
