import math
import shutil
import subprocess
import sys

import numpy as np
import pytest

from pcdnf.cli import ConfigError, main, read_config, resolve_seed
from pcdnf.dataset import read_xyz


def run(*argv):
    return main([*argv, "--workers", "1"])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> train -> denoise -> eval -> errormap, run twice in the same place."""
    root = tmp_path_factory.mktemp("run")
    snapshots = []
    for _ in range(2):
        shutil.rmtree(root)
        root.mkdir()
        assert run("gen-data", "--shapes", "sphere,cube", "--n-points", "300", "--noise-levels", "0.01",
                   "--seed", "4", "--out-dir", str(root / "data")) == 0
        (root / "train.cfg").write_text("# tiny run\nepochs = 1\ncenters_per_cloud = 16\nbatch_size = 16\n"
                                        "lr_start = 0.01\nlr_end = 0.001\n")
        assert run("train", "--data", str(root / "data"), "--config", str(root / "train.cfg"),
                   "--seed", "4", "--out-checkpoint", str(root / "model.npz")) == 0
        assert run("denoise", "--in", str(root / "data/noisy/sphere_0.01.xyz"), "--checkpoint",
                   str(root / "model.npz"), "--iterations", "2", "--seed", "4", "--out", str(root / "den")) == 0
        assert run("eval", "--pred", str(root / "den/iter1.xyz"), str(root / "den/iter2.xyz"),
                   "--clean", str(root / "data/clean/sphere.xyz"), "--shape", "sphere",
                   "--noise-level", "0.01", "--report", str(root / "report.csv")) == 0
        assert run("errormap", "--pred", str(root / "den/iter1.xyz"), "--clean",
                   str(root / "data/clean/sphere.xyz"), "--out", str(root / "err.xyz")) == 0
        snapshots.append(tree_bytes(root))
    return root, snapshots


class TestPipeline:
    def test_files_exist(self, pipeline):
        root = pipeline[0]
        for name in ("data/manifest.csv", "data/clean/cube.xyz", "data/noisy/cube_0.01.xyz", "model.npz",
                     "model.npz.history.csv", "den/iter1.xyz", "den/iter2.xyz", "den/config.txt",
                     "report.csv", "err.xyz"):
            assert (root / name).is_file(), name

    def test_byte_reproducible(self, pipeline):
        a, b = pipeline[1]
        assert a.keys() == b.keys()
        assert [k for k in a if a[k] != b[k]] == []

    def test_config_echoed(self, pipeline):
        root = pipeline[0]
        history = (root / "model.npz.history.csv").read_text()
        assert "# centers_per_cloud=16" in history and "# seed=4" in history and "# lambda1=100.0" in history
        assert "seed=4" in (root / "den/config.txt").read_text()
        report = (root / "report.csv").read_text()
        assert "# shape=sphere" in report

    def test_report_rows(self, pipeline):
        lines = (pipeline[0] / "report.csv").read_text().splitlines()
        rows = [line.split(",") for line in lines if not line.startswith("#")]
        assert rows[0] == ["shape", "noise_level", "iteration", "CD", "P2S", "RMSE_deg"]
        assert [r[2] for r in rows[1:]] == ["1", "2"]
        assert all(math.isfinite(float(v)) for r in rows[1:] for v in r[3:])

    def test_errormap_columns(self, pipeline):
        data = np.loadtxt(pipeline[0] / "err.xyz")
        assert data.shape == (300, 6)
        assert np.all((data[:, 3:] >= 0) & (data[:, 3:] <= 1))


class TestGenData:
    def test_defaults_count_contract(self, tmp_path):
        assert run("gen-data", "--n-points", "200", "--out-dir", str(tmp_path)) == 0
        assert len(list((tmp_path / "noisy").glob("*.xyz"))) == 25
        assert len(list((tmp_path / "clean").glob("*.xyz"))) == 5
        rows = [l for l in (tmp_path / "manifest.csv").read_text().splitlines() if not l.startswith("#")]
        assert len(rows) == 26

    def test_zero_noise_copies_points(self, tmp_path):
        assert run("gen-data", "--shapes", "torus", "--n-points", "200", "--noise-levels", "0",
                   "--out-dir", str(tmp_path)) == 0
        clean = read_xyz(tmp_path / "clean/torus.xyz")
        noisy = read_xyz(tmp_path / "noisy/torus_0.xyz")
        np.testing.assert_array_equal(noisy.points, clean.points)

    def test_manifest_reproducible(self, tmp_path):
        for d in ("a", "b"):
            assert run("gen-data", "--shapes", "cube", "--n-points", "150", "--noise-levels", "0.005,0.01",
                       "--seed", "9", "--out-dir", str(tmp_path / d)) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PCDNF_SEED", "9")
        assert run("gen-data", "--shapes", "cube", "--n-points", "150", "--noise-levels", "0.005,0.01",
                   "--out-dir", str(tmp_path / "env")) == 0
        assert run("gen-data", "--shapes", "cube", "--n-points", "150", "--noise-levels", "0.005,0.01",
                   "--seed", "9", "--out-dir", str(tmp_path / "flag")) == 0
        assert tree_bytes(tmp_path / "env") == tree_bytes(tmp_path / "flag")


class TestEval:
    def test_identical_pred_and_clean(self, tmp_path):
        assert run("gen-data", "--shapes", "sphere", "--n-points", "200", "--noise-levels", "0",
                   "--out-dir", str(tmp_path)) == 0
        clean = str(tmp_path / "clean/sphere.xyz")
        assert run("eval", "--pred", clean, "--clean", clean, "--report", str(tmp_path / "r.csv")) == 0
        last = (tmp_path / "r.csv").read_text().splitlines()[-1].split(",")
        assert [float(v) for v in last[3:]] == [0.0, 0.0, 0.0]


class TestErrors:
    def test_missing_file(self, tmp_path, capsys):
        code = run("eval", "--pred", str(tmp_path / "nope.xyz"), "--clean", str(tmp_path / "nope.xyz"),
                   "--report", str(tmp_path / "r.csv"))
        err = capsys.readouterr().err
        assert code != 0 and err.startswith("pcdnf: error:") and err.count("\n") == 1

    def test_malformed_xyz(self, tmp_path, capsys):
        (tmp_path / "bad.xyz").write_text("1 2 3\n1 2\n")
        code = run("errormap", "--pred", str(tmp_path / "bad.xyz"), "--clean", str(tmp_path / "bad.xyz"),
                   "--out", str(tmp_path / "e.xyz"))
        assert code != 0 and "bad.xyz:2" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("epochs = ten\n")
        (tmp_path / "data").mkdir()
        code = run("train", "--data", str(tmp_path / "data"), "--config", str(tmp_path / "c.cfg"),
                   "--out-checkpoint", str(tmp_path / "m.npz"))
        assert code != 0 and "epochs" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path, capsys):
        code = run("train", "--data", str(tmp_path), "--out-checkpoint", str(tmp_path / "m.npz"))
        assert code != 0 and "manifest.csv" in capsys.readouterr().err

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "pcdnf", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "gen-data" in proc.stdout


class TestConfig:
    def test_parse(self, tmp_path):
        (tmp_path / "c.cfg").write_text("epochs=3  # short\n\nlr_start = 0.5\ndtype=float64\nK=128\n")
        assert read_config(tmp_path / "c.cfg") == {"epochs": 3, "lr_start": 0.5, "dtype": "float64", "K": 128}

    @pytest.mark.parametrize("text, match", [("bogus = 1\n", "unknown key"), ("epochs\n", "key=value"),
                                             ("alpha = x\n", "float")])
    def test_errors_name_line(self, tmp_path, text, match):
        (tmp_path / "c.cfg").write_text(text)
        with pytest.raises(ConfigError, match=match):
            read_config(tmp_path / "c.cfg")

    def test_seed_precedence(self, monkeypatch):
        monkeypatch.setenv("PCDNF_SEED", "5")
        assert resolve_seed(3, {"seed": 4}) == 3
        assert resolve_seed(None, {"seed": 4}) == 4
        assert resolve_seed(None, {}) == 5
        monkeypatch.delenv("PCDNF_SEED")
        assert resolve_seed(None) == 0
