import csv
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from anisospde import cli
from anisospde.fem import build_rect_mesh
from anisospde.inference import Theta
from anisospde.simstudy import simulate_observation


def run(*argv):
    return cli.main([str(a) for a in argv])


def grid(path):
    t = np.loadtxt(path, delimiter=",", skiprows=1)
    n = int(round(math.sqrt(len(t))))
    return t[:, 0].reshape(n, n)[:, 0], t[:, 2].reshape(n, n)


def test_config_hash_is_order_independent():
    assert cli.config_hash({"a": 1, "b": [1, 2]}) == cli.config_hash({"b": [1, 2], "a": 1})
    assert cli.config_hash({"a": 1}) != cli.config_hash({"a": 2})


def test_isotropic_spectral_covariance_is_radially_symmetric(tmp_path):
    assert run("sample", "--method", "spectral", "--kappa", 2, "--grid-n", 256, "--covariance",
               "--out", tmp_path) == 0
    lags, cov = grid(tmp_path / "covariance.csv")
    c = lags.size // 2
    assert lags[c] == 0.0 and cov[c, c] == pytest.approx(1.0, abs=0.01)
    for k in (5, 20, 40):
        assert cov[c + k, c] == pytest.approx(cov[c, c + k], rel=1e-8)
        assert cov[c - k, c] == pytest.approx(cov[c + k, c], rel=1e-8)


def test_same_seed_gives_identical_bytes(tmp_path):
    args = ("sample", "--method", "spectral", "--kappa", 1.5, "--v1", 0.4, "--grid-n", 256)
    assert run(*args, "--seed", 3, "--out", tmp_path / "a") == 0
    assert run(*args, "--seed", 3, "--out", tmp_path / "b") == 0
    assert run(*args, "--seed", 4, "--out", tmp_path / "c") == 0
    a = (tmp_path / "a" / "field.csv").read_bytes()
    assert a == (tmp_path / "b" / "field.csv").read_bytes()
    assert a != (tmp_path / "c" / "field.csv").read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"] and ma["files"] == mb["files"]
    assert ma["seed"] == 3 and ma["schema_version"] == 1


def test_fem_and_spectral_covariances_agree(tmp_path):
    common = ("--kappa", 2, "--v1", 0.5, "--v2", -0.3, "--box", 9.0, "--covariance")
    assert run("sample", "--method", "spectral", *common, "--grid-n", 256, "--out", tmp_path / "s") == 0
    assert run("sample", "--method", "fem", *common, "--grid-n", 64, "--out", tmp_path / "f") == 0
    ls, cs = grid(tmp_path / "s" / "covariance.csv")
    lf, cf = grid(tmp_path / "f" / "covariance.csv")
    # the FEM lattice is every fourth spectral lag
    cs_, cf_ = ls.size // 2, lf.size // 2
    for i, j in [(0, 0), (4, 0), (0, 4), (8, 4), (-4, 8), (12, -12)]:
        assert lf[cf_ + i] == pytest.approx(ls[cs_ + 4 * i])
        s, f = cs[cs_ + 4 * i, cs_ + 4 * j], cf[cf_ + i, cf_ + j]
        assert f == pytest.approx(s, rel=0.05, abs=0.01)


def test_fem_sample_exports_precision(tmp_path):
    assert run("sample", "--method", "fem", "--kappa", 3, "--grid-n", 16, "--export-precision",
               "--out", tmp_path) == 0
    assert (tmp_path / "precision.mtx").read_text().startswith("%%MatrixMarket")


def test_prior_outputs(tmp_path):
    assert run("prior", "--samples", 2000, "--out", tmp_path) == 0
    info = json.loads((tmp_path / "hyperparameters.json").read_text())
    assert info["pc"]["lambda_v"] == pytest.approx(0.4374, abs=1e-4)
    assert info["pc"]["lambda_theta"] == pytest.approx(0.5368, abs=1e-4)
    assert info["pc"]["p_ratio_above_a0"] == pytest.approx(0.01)
    assert info["pc"]["p_range_below_rho0"] == pytest.approx(0.01)
    for name in ("density_kappa.csv", "density_r.csv"):
        t = np.loadtxt(tmp_path / name, delimiter=",", skiprows=1)
        assert np.all(t[:, 1:] >= 0) and np.all(np.diff(t[:, 0]) > 0)
    s = np.loadtxt(tmp_path / "samples_pc.csv", delimiter=",", skiprows=1)
    assert s.shape == (2000, 3)
    # empirical tail of the ratio matches the 1% target
    r = np.hypot(s[:, 1], s[:, 2])
    assert np.mean(r > math.log(10)) == pytest.approx(0.01, abs=0.0075)


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(1)
    locs = rng.uniform(0, 10, (15, 2))
    mesh = build_rect_mesh((0, 10), (0, 10), 0.5, 2.5)
    y = simulate_observation(Theta.from_natural(1.0, (0.5, 0.2), 1.0, 0.3), mesh, locs, 3) + 1.0
    h = rng.random(15)
    path = d / "obs.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "h", "obs"])
        w.writerows([(*p, hh, o) for p, hh, o in zip(locs, h, y)])
    return path


@pytest.fixture(scope="module")
def fit_dir(data_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit") / "run"
    assert run("fit", "--data", data_csv, "--mesh-edge", 0.8, "--mesh-extension", 2.0, "--S", 200,
               "--export-precision", "--out", out) == 0
    return out


def test_fit_outputs(fit_dir):
    post = np.loadtxt(fit_dir / "posterior.csv", delimiter=",", skiprows=1)
    assert post.shape == (200, 6)
    assert post[:, 5].sum() == pytest.approx(1.0, abs=1e-6)
    diag = json.loads((fit_dir / "diagnostics.json").read_text())
    assert set(diag["ci"]) == {"log_kappa", "v1", "v2", "log_sigma_u", "log_sigma_eps"}
    assert diag["ess"] > 1 and "map_converged" in diag
    assert (fit_dir / "precision_map.mtx").exists()
    m = json.loads((fit_dir / "manifest.json").read_text())
    assert m["command"] == "fit" and m["config"]["S"] == 200


def test_fit_without_covariate_column(tmp_path, data_csv):
    rows = list(csv.DictReader(open(data_csv)))
    p = tmp_path / "noh.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "obs"])
        w.writerows([(r["x"], r["y"], r["obs"]) for r in rows[:8]])
    assert run("fit", "--data", p, "--prior", "iso_pc", "--mesh-edge", 1.0, "--S", 100, "--out", tmp_path / "o") == 0
    post = np.loadtxt(tmp_path / "o" / "posterior.csv", delimiter=",", skiprows=1)
    assert np.all(post[:, 1:3] == 0)


def test_score_from_fit(fit_dir, tmp_path):
    assert run("score", "--fit", fit_dir, "--out", tmp_path) == 0
    agg = json.loads((tmp_path / "scores.json").read_text())
    assert agg["n"] == 15 and agg["n_failed"] == 0
    assert math.isfinite(agg["mean_crps"]) and agg["mean_crps"] > 0
    with open(tmp_path / "scores.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 15


def test_simstudy_command(tmp_path):
    cfg = {"study": "prior_comparison", "domain": [0, 2, 0, 2], "mesh_edge": 0.5, "mesh_extension": 1.0,
           "m": 5, "priors": ["pc", "eg"], "J": 5, "S": 500}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert run("simstudy", p, "--J", 2, "--S", 100, "--seed", 9, "--out", tmp_path / "o") == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert set(summary["priors"]) == {"pc", "eg"}
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["config"]["J"] == 2 and m["config"]["S"] == 100 and m["config"]["master_seed"] == 9
    assert {f["path"] for f in m["files"]} == {"records.csv", "sbc.csv", "scores.csv", "summary.json"}


def test_invalid_flags_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        run("sample", "--method", "nope", "--kappa", 1, "--out", tmp_path / "x")
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        run("frobnicate")
    assert e.value.code == 2
    assert run("sample", "--method", "fem", "--kappa", -1, "--out", tmp_path / "y") == 2
    assert run("prior", "--a0", 0.5, "--out", tmp_path / "z") == 2
    assert "anisospde prior" in capsys.readouterr().err
    # nothing left behind
    assert not (tmp_path / "y").exists() and not (tmp_path / "z").exists()


def test_bad_data_exit_2(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,y\n1,2\n")
    assert run("fit", "--data", p, "--out", tmp_path / "o") == 2
    p.write_text("x,y,obs\n1,2,abc\n")
    assert run("fit", "--data", p, "--out", tmp_path / "o") == 2
    assert run("score", "--fit", tmp_path / "missing", "--out", tmp_path / "s") == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"study": "other"}))
    assert run("simstudy", cfg, "--out", tmp_path / "m") == 2
    assert not any((tmp_path / d).exists() for d in ("o", "s", "m"))


def test_numerical_failure_exit_3_and_cleanup(tmp_path, monkeypatch, capsys):
    from anisospde.errors import CholeskyFailure

    def boom(model, S, seed, init=None):
        raise CholeskyFailure("not positive definite")

    monkeypatch.setattr(cli, "fit_model", boom)
    p = tmp_path / "d.csv"
    p.write_text("x,y,obs\n0,0,1\n1,1,2\n")
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("user file")
    assert run("fit", "--data", p, "--mesh-edge", 0.5, "--out", out) == 3
    assert "numerical failure" in capsys.readouterr().err
    assert sorted(x.name for x in out.iterdir()) == ["keep.txt"]


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "anisospde.cli", "prior", "--samples", "10", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "anisospde.cli", "--threads", "0", "prior", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 2


def test_fit_default_settings_within_budget(data_csv, tmp_path):
    t0 = time.perf_counter()
    assert run("fit", "--data", data_csv, "--out", tmp_path) == 0
    assert time.perf_counter() - t0 < 300
    assert json.loads((tmp_path / "diagnostics.json").read_text())["ess"] > 1
