import csv
import json
import math

import numpy as np
import pytest

from anisospde import simstudy
from anisospde.errors import CholeskyFailure
from anisospde.fem import StationaryPrecision, build_rect_mesh, interpolation_matrix
from anisospde.inference import LatentGaussianModel, SafetyBox, Theta
from anisospde.linalg import cholesky
from anisospde.pcprior import cdf_kappa
from anisospde.simstudy import (
    ExperimentConfig,
    LinearModelData,
    ReplicationRecord,
    SubsampleConfig,
    build_linear_model,
    draw_theta_true,
    fit_and_score,
    run_replication,
    run_study,
    sbc_uniformity,
    simulate_observation,
    subsample_study,
    substream,
)

SMALL = dict(domain=(0, 2, 0, 2), mesh_edge=0.4, mesh_extension=1.0, S=100)


def small_config(**kw):
    return ExperimentConfig(**{**SMALL, **kw})


def test_config_validation_and_roundtrip(tmp_path):
    with pytest.raises(ValueError):
        ExperimentConfig(sim_prior="uniform")
    with pytest.raises(ValueError):
        ExperimentConfig(J=0)
    with pytest.raises(ValueError):
        ExperimentConfig(priors=("pc", "nope"))
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"J": 3, "bogus": 1})
    cfg = ExperimentConfig(J=3, prior_specs={"wide_eg": {"type": "eg", "lambda_kappa": 0.5, "sigma_v": 3.0}},
                           priors=("pc", "wide_eg"))
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.from_json(p) == cfg
    assert cfg.theta_prior("wide_eg").kv.sigma_v == 3.0


def test_substreams_are_distinct_and_stable():
    a = np.random.default_rng(substream(7, 3, 1)).random(4)
    b = np.random.default_rng(substream(7, 3, 1)).random(4)
    c = np.random.default_rng(substream(7, 4, 1)).random(4)
    d = np.random.default_rng(substream(7, 3, "pc")).random(4)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c) and not np.allclose(a, d)


@pytest.fixture(scope="module")
def mesh():
    return build_rect_mesh((0, 2), (0, 2), 0.2, 1.0)


def test_simulate_observation_noise_limit_and_seed(mesh):
    locs = np.array([[0.5, 0.5], [1.3, 0.2], [1.9, 1.9]])
    t = Theta.from_natural(2.0, (0.3, -0.2), 1.3, 1e-9)
    y, u = simulate_observation(t, mesh, locs, 5, return_field=True)
    np.testing.assert_allclose(y, interpolation_matrix(mesh, locs) @ u, atol=1e-6)
    np.testing.assert_array_equal(y, simulate_observation(t, mesh, locs, 5))
    assert not np.allclose(y, simulate_observation(t, mesh, locs, 6))


def test_simulated_variance(mesh):
    # MC variance vs the exact discrete variance, which in turn is close to sigma_u^2 + sigma_eps^2
    t = Theta.from_natural(3.0, (0.0, 0.0), 1.0, 0.5)
    loc = np.array([[1.0, 1.0]])
    N = 1000
    ys = np.array([simulate_observation(t, mesh, loc, s)[0] for s in range(N)])
    A = interpolation_matrix(mesh, loc)
    Q = StationaryPrecision(mesh).precision(t.params)
    a = A.toarray().ravel()
    exact = a @ cholesky(Q).solve(a) + t.sigma_eps**2
    se = exact * math.sqrt(2.0 / (N - 1))
    assert abs(ys.var(ddof=1) - exact) <= 3 * se
    assert exact == pytest.approx(t.sigma_u**2 + t.sigma_eps**2, rel=0.1)


def test_draw_theta_true():
    cfg = small_config(J=5)
    draws = [draw_theta_true(cfg, j) for j in range(5)]
    assert all(SafetyBox().contains(d) for d in draws)
    assert len({d[0] for d in draws}) == 5
    assert draw_theta_true(cfg, 2) == draws[2]
    beta = small_config(J=3, sim_prior="beta", sim_beta_width=0.5)
    assert SafetyBox().contains(draw_theta_true(beta, 0))


def test_no_data_replication_recovers_prior():
    # with m = 0 the posterior is the prior, so a_0 is the prior CDF of kappa at the true value
    cfg = ExperimentConfig(**{**SMALL, "S": 1000}, J=1, m=0, priors=("pc", "eg"))
    rec = run_replication(cfg, 0)
    pc = rec.results["pc"]
    assert pc.ok, pc.error
    hyper = cfg.kv_priors()["pc"].hyper
    expected = cdf_kappa(math.exp(rec.theta_true[0]), hyper)
    assert pc.sbc[0] == pytest.approx(expected, abs=0.06)
    for r in rec.results.values():
        assert np.all((r.sbc >= 0) & (r.sbc <= 1))
        assert np.all(r.ci_lo <= r.ci_hi)
    with pytest.raises(ValueError):
        run_replication(cfg, 1)


def test_replications_are_exchangeable():
    a = run_replication(small_config(J=3, m=6, priors=("pc",)), 2)
    b = run_replication(small_config(J=9, m=6, priors=("pc",)), 2)
    np.testing.assert_array_equal(a.theta_true, b.theta_true)
    np.testing.assert_array_equal(a.results["pc"].theta_map, b.results["pc"].theta_map)
    np.testing.assert_array_equal(a.results["pc"].sbc, b.results["pc"].sbc)


def test_failure_is_flagged_not_raised(monkeypatch):
    real = simstudy.fit_model

    def flaky(model, S, seed, init=None):
        if model.prior.kv.type == "eg":
            raise CholeskyFailure("boom")
        return real(model, S, seed, init)

    monkeypatch.setattr(simstudy, "fit_model", flaky)
    rec = run_replication(small_config(J=1, m=6, priors=("pc", "eg")), 0)
    assert rec.results["pc"].ok
    assert not rec.results["eg"].ok and "boom" in rec.results["eg"].error
    assert np.all(np.isnan(rec.interval_scores("eg")))


def test_sbc_uniformity_examples():
    assert sbc_uniformity([0.5], 0).ks_stat == pytest.approx(0.5)
    z = sbc_uniformity(np.zeros(20), 0)
    assert z.ks_stat == 1.0 and z.p_value < 1e-10
    rng = np.random.default_rng(0)
    passes = sum(sbc_uniformity(rng.random(10_000), 0).p_value > 0.01 for _ in range(100))
    assert passes >= 95
    s = sbc_uniformity(rng.random(50), 0)
    assert np.all(np.diff(s.ecdf) >= 0) and s.ecdf[0] >= 0 and s.ecdf[-1] == 1.0
    assert s.grid[0] == 0.0 and s.grid[-1] == 1.0
    with pytest.raises(ValueError):
        sbc_uniformity([1.5], 0)


@pytest.fixture(scope="module")
def coarse():
    return build_rect_mesh((0, 2), (0, 2), 0.4, 1.0)


def linear_data(mesh, n=20, seed=0, h=None, y=None):
    rng = np.random.default_rng(seed)
    locs = rng.uniform(0, 2, (n, 2))
    h = rng.random(n) if h is None else h
    y = rng.normal(size=n) if y is None else y
    return LinearModelData(locs, h, y)


def test_build_linear_model(mesh):
    data = linear_data(mesh)
    obs = build_linear_model(data, mesh)
    assert obs.full_design.shape == (20, mesh.n + 2)
    assert obs.tau_beta == 1e-4
    with pytest.raises(ValueError):
        LinearModelData(data.locations, data.h[:3], data.y)
    with pytest.raises(ValueError):
        LinearModelData(data.locations, data.h, data.y, tau_beta=0.0)


def test_linear_model_conjugate_intercept(mesh):
    # y = c everywhere with tiny noise: the intercept takes all of it and the slope none
    c = 2.7
    data = linear_data(mesh, n=25, h=np.zeros(25), y=np.full(25, c))
    model = LatentGaussianModel(build_linear_model(data, mesh), mesh=mesh)
    post = model.latent_posterior(Theta.from_natural(2.0, (0.2, 0.1), 1.0, 1e-3))
    beta = post.mean[mesh.n:]
    assert beta[0] == pytest.approx(c, rel=1e-3)
    assert abs(beta[1]) < 1e-6


def test_subsample_full_size_equals_direct_fit(coarse):
    mesh = coarse
    data = linear_data(mesh, n=15, seed=3)
    cfg = SubsampleConfig(sizes=(15,), pool_size=15, repeats=1, priors=("aniso_pc",), S=100)
    priors = cfg.theta_priors()
    rows = subsample_study(data, [15], 1, priors, mesh, S=100, master_seed=4)
    direct = fit_and_score(data, mesh, priors["aniso_pc"], 100, substream(4, "psis", 15, 0, "aniso_pc"))
    assert len(rows) == 1 and rows[0]["ok"] == 1
    for k in ("rmse", "mean_crps", "mean_dss"):
        assert rows[0][k] == direct[k]
    again = subsample_study(data, [15], 1, priors, mesh, S=100, master_seed=4)
    assert again == rows
    with pytest.raises(ValueError):
        subsample_study(data, [16], 1, priors, mesh)


def test_subsample_rows_and_gaps(coarse, tmp_path):
    mesh = coarse
    data = linear_data(mesh, n=30, seed=5)
    cfg = SubsampleConfig(sizes=(10, 20), pool_size=30, repeats=2, S=100)
    out = tmp_path / "scores.csv"
    rows = subsample_study(data, cfg.sizes, 2, cfg.theta_priors(), mesh, S=100, theta_true=Theta(0, 0, 0, 0, 0),
                           out_csv=out)
    assert len(rows) == 2 * 2 * 2
    with open(out) as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == simstudy.SUBSAMPLE_COLUMNS
    iso = [r for r in rows if r["prior"] == "iso_pc" and r["ok"]]
    assert all(math.isnan(r["is_v1"]) for r in iso)
    gaps = simstudy.paired_crps_gaps(rows)
    assert set(gaps) == {10, 20}
    med = simstudy.crps_gap_medians(rows)
    assert set(med) == {"10", "20"}


def test_study_outputs(tmp_path):
    cfg = small_config(J=2, m=6, priors=("pc", "beta"))
    res = run_study(cfg, workers=1, out_dir=tmp_path)
    assert [r.j for r in res.records] == [0, 1]
    names = {p.name for p in tmp_path.iterdir()}
    assert {"records.csv", "sbc.csv", "scores.csv", "summary.json"} <= names
    with open(tmp_path / "records.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and rows[0]["j"] == "0" and "sbc_v1" in rows[0]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema_version"] == 1
    assert set(summary["priors"]) == {"pc", "beta"}
    with open(tmp_path / "sbc.csv") as fh:
        sbc = list(csv.DictReader(fh))
    pc_kappa = [float(r["ecdf"]) for r in sbc if r["prior"] == "pc" and r["parameter"] == "log_kappa"]
    assert np.all(np.diff(pc_kappa) >= 0)


def test_parallel_matches_serial():
    cfg = small_config(J=2, m=5, priors=("pc",))
    a = run_study(cfg, workers=1)
    b = run_study(cfg, workers=2)
    for ra, rb in zip(a.records, b.records):
        assert isinstance(rb, ReplicationRecord)
        np.testing.assert_array_equal(ra.results["pc"].sbc, rb.results["pc"].sbc)
        np.testing.assert_array_equal(ra.theta_true, rb.theta_true)
