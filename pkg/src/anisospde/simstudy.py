"""Replication driver for the prior-comparison experiment and the
subsampled linear-model study.

Each replication draws ``theta_true`` from a generator prior, simulates
``y = A u + eps`` on a FEM mesh and fits every comparison prior by MAP,
Gaussian approximation and PSIS.  Random numbers come from independent
substreams keyed by ``(master seed, replication, stage)``, so replications
are exchangeable and can run in any order or process.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats

from .errors import AnisoSpdeError
from .fem import StationaryPrecision, TriMesh, build_rect_mesh, interpolation_matrix, sample_field
from .inference import (
    THETA_NAMES,
    FitResult,
    LatentGaussianModel,
    ObsModel,
    SafetyBox,
    Theta,
    ThetaPrior,
    fit_model,
    kld_vs_gaussian,
    posterior_summary,
    weighted_ci,
)
from .pcprior import IsoPCPrior, PCPrior, QuantileTargets, default_priors, prior_from_dict
from .scoring import interval_score, loo_score_table

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FIT_ERRORS = (AnisoSpdeError, ArithmeticError, ValueError, np.linalg.LinAlgError)

# stage tags for seed substreams
STAGE_THETA, STAGE_LOCATIONS, STAGE_FIELD, STAGE_NOISE, STAGE_SUBSAMPLE = 0, 1, 2, 3, 4


def substream(master_seed: int, *key) -> np.random.SeedSequence:
    """Independent seed sequence for ``key``; strings are hashed with CRC32."""
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in key)
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=spawn)


# ------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """Knobs of the prior-comparison study.  JSON keys match field names.

    ``prior_specs`` may add or override priors by name using the
    ``prior_from_dict`` schema; the built-in names are ``pc``, ``eg``,
    ``uniform``, ``beta`` and ``iso_pc``.
    """
    domain: tuple = (0.0, 10.0, 0.0, 10.0)
    mesh_edge: float = 0.5
    mesh_extension: float = 2.5
    m: int = 15
    priors: tuple = ("pc", "eg", "uniform", "beta")
    sim_prior: str = "pc"
    sim_beta_width: float = 1.0
    J: int = 20
    S: int = 1000
    master_seed: int = 0
    a0: float = 10.0
    beta: float = 0.01
    rho0: float = 1.0
    alpha: float = 0.01
    sigma0: float = 10.0
    sigma1: float = 1.5
    level: float = 0.95
    prior_specs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.domain = tuple(float(x) for x in self.domain)
        self.priors = tuple(self.priors)
        self.validate()

    def validate(self) -> None:
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ValueError("domain must be (x0, x1, y0, y1) with x1 > x0 and y1 > y0")
        if self.J < 1:
            raise ValueError("J must be at least 1")
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if self.S < 100:
            raise ValueError("S must be at least 100")
        if not (self.mesh_edge > 0 and self.mesh_extension >= 0):
            raise ValueError("mesh_edge must be positive and mesh_extension non-negative")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if not self.priors:
            raise ValueError("at least one prior is required")
        table = self.kv_priors()
        for name in (*self.priors, self.sim_prior):
            if name not in table:
                raise ValueError(f"unknown prior {name!r}")
        if table[self.sim_prior].type == "uniform":
            raise ValueError("the improper uniform prior cannot generate theta_true")

    @property
    def targets(self) -> QuantileTargets:
        return QuantileTargets(self.a0, self.beta, self.rho0, self.alpha)

    @property
    def domain_length(self) -> float:
        x0, x1, y0, y1 = self.domain
        return max(x1 - x0, y1 - y0)

    def kv_priors(self) -> dict:
        table = default_priors(self.targets, self.domain_length)
        table["iso_pc"] = IsoPCPrior.from_targets(self.targets)
        for name, spec in self.prior_specs.items():
            table[name] = prior_from_dict(spec)
        return table

    def theta_prior(self, name: str) -> ThetaPrior:
        return ThetaPrior.from_quantiles(self.kv_priors()[name], self.sigma0, self.sigma1)

    def mesh(self) -> TriMesh:
        return _cached_mesh(self.domain, self.mesh_edge, self.mesh_extension)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = list(self.domain)
        d["priors"] = list(self.priors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@lru_cache(maxsize=8)
def _cached_mesh(domain, edge, extension) -> TriMesh:
    x0, x1, y0, y1 = domain
    return build_rect_mesh((x0, x1), (y0, y1), edge, extension)


# -------------------------------------------------------------- simulation


def simulate_observation(theta_true, mesh: TriMesh, locations, seed, return_field: bool = False):
    """``y = A u + eps`` with ``u`` drawn from the FEM precision at ``theta_true``.

    ``seed`` (int or SeedSequence) is split into independent field and noise
    streams, so the field does not depend on the number of locations.
    """
    theta = Theta(*theta_true)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    field_seed, noise_seed = ss.spawn(2)
    A = interpolation_matrix(mesh, locations)
    Q = _stationary(mesh).precision(theta.params)
    u = sample_field(Q, field_seed, mesh).weights
    eps = np.random.default_rng(noise_seed).standard_normal(A.shape[0]) * theta.sigma_eps
    y = A @ u + eps
    return (y, u) if return_field else y


_STAT_CACHE: list = []


def _stationary(mesh: TriMesh) -> StationaryPrecision:
    # meshes are unhashable; reuse by identity
    for m, sp_ in _STAT_CACHE:
        if m is mesh:
            return sp_
    sp_ = StationaryPrecision(mesh)
    _STAT_CACHE.append((mesh, sp_))
    del _STAT_CACHE[:-4]
    return sp_


def draw_theta_true(config: ExperimentConfig, j: int, safety: SafetyBox = SafetyBox(), max_tries: int = 1000):
    """Generator draw for replication ``j``; draws outside the safety box are redrawn."""
    kv = config.kv_priors()[config.sim_prior]
    prior = config.theta_prior(config.sim_prior)
    rng = np.random.default_rng(substream(config.master_seed, j, STAGE_THETA))
    for _ in range(max_tries):
        seed = int(rng.integers(2**63))
        if kv.type == "beta":
            lk, v = kv.sample(seed, 1, width=config.sim_beta_width)
        else:
            lk, v = kv.sample(seed, 1)
        su = rng.exponential(1.0 / prior.lambda_sigma_u)
        se = rng.exponential(1.0 / prior.lambda_sigma_eps)
        t = np.array([lk[0], v[0, 0], v[0, 1], math.log(su), math.log(se)])
        if safety.contains(t):
            return Theta(*t)
    raise AnisoSpdeError("generator prior keeps drawing outside the safety box")


# ---------------------------------------------------------------- records


@dataclass
class PriorResult:
    """Posterior summaries of one replication under one comparison prior."""
    prior: str
    ok: bool
    error: str = ""
    theta_map: np.ndarray = field(default_factory=lambda: np.full(5, np.nan))
    ci_lo: np.ndarray = field(default_factory=lambda: np.full(5, np.nan))
    ci_hi: np.ndarray = field(default_factory=lambda: np.full(5, np.nan))
    sbc: np.ndarray = field(default_factory=lambda: np.full(5, np.nan))
    sbc_gauss: np.ndarray = field(default_factory=lambda: np.full(5, np.nan))
    complexity: float = math.nan
    kld: float = math.nan
    pareto_k: float = math.nan
    ess: float = math.nan
    map_converged: bool = False
    n_evals: int = 0

    @property
    def ci_length(self) -> np.ndarray:
        return self.ci_hi - self.ci_lo


@dataclass
class ReplicationRecord:
    j: int
    theta_true: np.ndarray
    results: dict

    def abs_error(self, prior: str) -> np.ndarray:
        return np.abs(self.results[prior].theta_map - self.theta_true)

    def covered(self, prior: str) -> np.ndarray:
        r = self.results[prior]
        return (r.ci_lo <= self.theta_true) & (self.theta_true <= r.ci_hi)

    def interval_scores(self, prior: str, level: float = 0.95) -> np.ndarray:
        r = self.results[prior]
        if not r.ok:
            return np.full(5, np.nan)
        return interval_score(r.ci_lo, r.ci_hi, 1 - level, self.theta_true)


def summarize_fit(fit: FitResult, theta_true, name: str, level: float) -> PriorResult:
    wp = fit.posterior
    s, w = wp.samples, wp.weights
    truth = np.asarray(theta_true, dtype=float)
    ci = np.array([weighted_ci(s[:, i], w, level) for i in range(5)])
    sd = fit.approx.sd()
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (truth - np.asarray(fit.map.theta)) / sd
    gauss = stats.norm.cdf(z)
    # a fixed coordinate is a point mass at the mode
    gauss[sd == 0] = (truth >= np.asarray(fit.map.theta))[sd == 0].astype(float)
    return PriorResult(
        prior=name,
        ok=True,
        theta_map=np.asarray(fit.map.theta, dtype=float),
        ci_lo=ci[:, 0],
        ci_hi=ci[:, 1],
        sbc=np.clip([w @ (s[:, i] <= truth[i]) for i in range(5)], 0.0, 1.0),  # rounding can exceed 1
        sbc_gauss=gauss,
        complexity=posterior_summary(wp).complexity,
        kld=kld_vs_gaussian(wp),
        pareto_k=float(wp.pareto_k),
        ess=wp.ess,
        map_converged=fit.map.converged,
        n_evals=fit.map.n_evals,
    )


def run_replication(config: ExperimentConfig, j: int) -> ReplicationRecord:
    """Simulate one data set and fit it under every comparison prior.

    Failures of a single prior (non-finite posterior, indefinite Hessian,
    degenerate weights) are recorded in its ``PriorResult`` and do not
    abort the replication.
    """
    if not 0 <= j < config.J:
        raise ValueError(f"replication index {j} outside [0, {config.J})")
    mesh = config.mesh()
    theta_true = draw_theta_true(config, j)
    x0, x1, y0, y1 = config.domain
    loc_rng = np.random.default_rng(substream(config.master_seed, j, STAGE_LOCATIONS))
    locs = np.column_stack([loc_rng.uniform(x0, x1, config.m), loc_rng.uniform(y0, y1, config.m)])
    y = simulate_observation(theta_true, mesh, locs, substream(config.master_seed, j, STAGE_FIELD))
    obs = ObsModel(interpolation_matrix(mesh, locs), y)
    results = {}
    for name in config.priors:
        model = LatentGaussianModel(obs, config.theta_prior(name), mesh=mesh)
        seed = substream(config.master_seed, j, "psis", name)
        try:
            fit = fit_model(model, config.S, seed)
            results[name] = summarize_fit(fit, theta_true, name, config.level)
        except FIT_ERRORS as exc:
            log.info("replication %d, prior %s failed: %s", j, name, exc)
            results[name] = PriorResult(name, False, f"{type(exc).__name__}: {exc}")
    return ReplicationRecord(j, np.asarray(theta_true, dtype=float), results)


# --------------------------------------------------------------------- SBC


@dataclass
class SbcResult:
    grid: np.ndarray
    ecdf: np.ndarray
    ks_stat: float
    p_value: float
    n: int


def sbc_uniformity(records, index: int, prior: str | None = None, grid_size: int = 101) -> SbcResult:
    """Kolmogorov-Smirnov test of SBC probabilities against U(0, 1).

    ``records`` is either a sequence of ``ReplicationRecord`` (then ``prior``
    selects the fit) or the probabilities themselves.  Failed fits are dropped.
    The p-value uses the asymptotic Kolmogorov distribution.
    """
    if prior is not None:
        a = np.array([r.results[prior].sbc[index] for r in records if r.results[prior].ok], dtype=float)
    else:
        a = np.asarray(records, dtype=float).ravel()
    a = a[np.isfinite(a)]
    if a.size == 0:
        raise ValueError("no SBC probabilities to test")
    if np.any((a < 0) | (a > 1)):
        raise ValueError("SBC probabilities must lie in [0, 1]")
    ks = stats.kstest(a, "uniform", method="asymp")
    grid = np.linspace(0.0, 1.0, grid_size)
    ecdf = np.searchsorted(np.sort(a), grid, side="right") / a.size
    return SbcResult(grid, ecdf, float(ks.statistic), float(ks.pvalue), int(a.size))


# ------------------------------------------------------------------- study


@dataclass
class StudyResult:
    config: ExperimentConfig
    records: list

    def summary(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "config": self.config.to_dict(), "priors": {}}
        for name in self.config.priors:
            res = [r.results[name] for r in self.records]
            ok = [r for r, x in zip(self.records, res) if x.ok]
            entry = {"n_ok": len(ok), "n_failed": len(res) - len(ok)}
            if ok:
                cil = np.array([r.results[name].ci_length for r in ok])
                cov = np.array([r.covered(name) for r in ok])
                err = np.array([r.abs_error(name) for r in ok])
                entry.update(
                    mean_ci_length=dict(zip(THETA_NAMES, map(float, cil.mean(axis=0)))),
                    coverage=dict(zip(THETA_NAMES, map(float, cov.mean(axis=0)))),
                    mean_abs_error=dict(zip(THETA_NAMES, map(float, err.mean(axis=0)))),
                    mean_complexity=float(np.mean([r.results[name].complexity for r in ok])),
                    mean_kld=float(np.mean([r.results[name].kld for r in ok])),
                    map_converged=int(sum(r.results[name].map_converged for r in ok)),
                )
                sbc = {}
                for i, pname in enumerate(THETA_NAMES):
                    s = sbc_uniformity(ok, i, name)
                    sbc[pname] = {"ks_stat": s.ks_stat, "p_value": s.p_value, "n": s.n}
                entry["sbc"] = sbc
            out["priors"][name] = entry
        return out

    def write(self, out_dir) -> list:
        """Write ``records.csv``, ``sbc.csv``, ``scores.csv`` and ``summary.json``."""
        os.makedirs(out_dir, exist_ok=True)
        paths = [os.path.join(out_dir, f) for f in ("records.csv", "sbc.csv", "scores.csv", "summary.json")]
        self._write_records(paths[0])
        self._write_sbc(paths[1])
        self._write_scores(paths[2])
        with open(paths[3], "w") as fh:
            json.dump(_finite(self.summary()), fh, indent=2)
        return paths

    def _write_records(self, path):
        cols = ["true", "map", "abs_err", "ci_lo", "ci_hi", "ci_len", "covered", "sbc", "sbc_gauss"]
        header = ["j", "prior", "ok"] + [f"{c}_{p}" for c in cols for p in THETA_NAMES]
        header += ["complexity", "kld", "pareto_k", "ess", "map_converged", "n_evals", "error"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for rec in self.records:
                for name in self.config.priors:
                    r = rec.results[name]
                    vecs = [rec.theta_true, r.theta_map, rec.abs_error(name), r.ci_lo, r.ci_hi, r.ci_length,
                            rec.covered(name).astype(float) if r.ok else np.full(5, np.nan), r.sbc, r.sbc_gauss]
                    row = [rec.j, name, int(r.ok)] + [_fmt(x) for v in vecs for x in v]
                    row += [_fmt(r.complexity), _fmt(r.kld), _fmt(r.pareto_k), _fmt(r.ess),
                            int(r.map_converged), r.n_evals, r.error]
                    w.writerow(row)

    def _write_sbc(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["prior", "parameter", "t", "ecdf", "ks_stat", "p_value", "n"])
            for name in self.config.priors:
                if not any(r.results[name].ok for r in self.records):
                    continue
                for i, pname in enumerate(THETA_NAMES):
                    s = sbc_uniformity(self.records, i, name)
                    for t, e in zip(s.grid, s.ecdf):
                        w.writerow([name, pname, _fmt(t), _fmt(e), _fmt(s.ks_stat), _fmt(s.p_value), s.n])

    def _write_scores(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "prior", "parameter", "interval_score"])
            for rec in self.records:
                for name in self.config.priors:
                    sc = rec.interval_scores(name, self.config.level)
                    for pname, v in zip(THETA_NAMES, sc):
                        w.writerow([rec.j, name, pname, _fmt(v)])


def _fmt(x) -> str:
    return f"{float(x):.9g}"


def _finite(obj):
    """JSON-safe copy with non-finite floats replaced by None."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _parallel_map(fn, args, workers):
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=min(workers, len(args))) as ex:
        # chunksize 1 lets idle workers pick up the next task; results come back in order
        return list(ex.map(_star, [(fn, a) for a in args], chunksize=1))


def _star(packed):
    fn, a = packed
    return fn(*a)


def run_study(config: ExperimentConfig, workers: int | None = 1, out_dir=None) -> StudyResult:
    """All ``J`` replications, in parallel when ``workers > 1``."""
    records = _parallel_map(run_replication, [(config, j) for j in range(config.J)], workers)
    result = StudyResult(config, records)
    if out_dir is not None:
        result.write(out_dir)
    return result


# ------------------------------------------------------ linear-model study


@dataclass
class LinearModelData:
    """Observations ``y_i = beta_0 + beta_1 h_i + u(x_i) + eps_i``."""
    locations: np.ndarray
    h: np.ndarray
    y: np.ndarray
    tau_beta: float = 1e-4

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        self.h = np.asarray(self.h, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.locations.shape[0]
        if self.h.size != n or self.y.size != n:
            raise ValueError("locations, h and y must have the same length")
        if not (np.all(np.isfinite(self.locations)) and np.all(np.isfinite(self.h)) and np.all(np.isfinite(self.y))):
            raise ValueError("data must be finite")
        if not self.tau_beta > 0:
            raise ValueError("tau_beta must be positive")

    def __len__(self) -> int:
        return self.y.size

    def subset(self, rows) -> "LinearModelData":
        rows = np.asarray(rows)
        return LinearModelData(self.locations[rows], self.h[rows], self.y[rows], self.tau_beta)


def build_linear_model(data: LinearModelData, mesh: TriMesh) -> ObsModel:
    """Observation model with latent ``(u, beta_0, beta_1)`` and ``beta ~ N(0, I / tau_beta)``."""
    A = interpolation_matrix(mesh, data.locations)
    X = np.column_stack([np.ones(len(data)), data.h])
    return ObsModel(A, data.y, X, data.tau_beta)


def terrain(locations, domain=(0.0, 10.0, 0.0, 10.0)) -> np.ndarray:
    """Smooth synthetic elevation in [0, 1] used as the covariate ``h``."""
    p = np.asarray(locations, dtype=float).reshape(-1, 2)
    x0, x1, y0, y1 = domain
    s = (p[:, 0] - x0) / (x1 - x0)
    t = (p[:, 1] - y0) / (y1 - y0)
    ridge = np.exp(-((s - 0.3) ** 2) / 0.02 - ((t - 0.6) ** 2) / 0.2)
    hill = np.exp(-((s - 0.75) ** 2 + (t - 0.25) ** 2) / 0.03)
    slope = 0.3 * s
    return (ridge + 0.7 * hill + slope) / 2.0


# ground truths on [0, 10]^2: the rainfall-study estimates rescaled so that
# the range keeps its ratio to the domain side (about 500 km)
ANISO_TRUTH = dict(theta=Theta.from_natural(math.sqrt(8) / 4.0, (-0.45, 0.03), 0.63, 0.14), beta=(0.96, 0.67))
ISO_TRUTH = dict(theta=Theta.from_natural(math.sqrt(8) / 2.64, (0.0, 0.0), 0.65, 0.13), beta=(0.93, 0.66))


def synthetic_linear_data(theta, beta, mesh: TriMesh, n: int, seed, domain=(0.0, 10.0, 0.0, 10.0),
                          tau_beta: float = 1e-4) -> LinearModelData:
    """``n`` uniform locations with ``y = beta_0 + beta_1 h + u + eps``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    loc_seed, sim_seed = ss.spawn(2)
    rng = np.random.default_rng(loc_seed)
    x0, x1, y0, y1 = domain
    locs = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    h = terrain(locs, domain)
    y = simulate_observation(theta, mesh, locs, sim_seed) + beta[0] + beta[1] * h
    return LinearModelData(locs, h, y, tau_beta)


@dataclass
class SubsampleConfig:
    """Knobs of the subsampled linear-model study (JSON keys match field names)."""
    domain: tuple = (0.0, 10.0, 0.0, 10.0)
    mesh_edge: float = 0.5
    mesh_extension: float = 3.0
    truth: str = "aniso"
    pool_size: int = 1000
    sizes: tuple = (25, 50, 100)
    repeats: int = 10
    priors: tuple = ("aniso_pc", "iso_pc")
    S: int = 300
    master_seed: int = 0
    a0: float = 10.0
    beta: float = 0.01
    rho0: float = 1.0
    alpha: float = 0.01
    sigma0: float = 10.0
    sigma1: float = 1.5
    level: float = 0.95
    tau_beta: float = 1e-4

    def __post_init__(self):
        self.domain = tuple(float(x) for x in self.domain)
        self.sizes = tuple(int(s) for s in self.sizes)
        self.priors = tuple(self.priors)
        if self.truth not in ("aniso", "iso"):
            raise ValueError("truth must be 'aniso' or 'iso'")
        if self.repeats < 1 or not self.sizes or min(self.sizes) < 2 or max(self.sizes) > self.pool_size:
            raise ValueError("need repeats >= 1 and 2 <= sizes <= pool_size")
        if self.S < 100:
            raise ValueError("S must be at least 100")
        for p in self.priors:
            if p not in SUBSAMPLE_PRIORS:
                raise ValueError(f"unknown prior {p!r}; choose from {sorted(SUBSAMPLE_PRIORS)}")

    @property
    def targets(self) -> QuantileTargets:
        return QuantileTargets(self.a0, self.beta, self.rho0, self.alpha)

    def theta_priors(self) -> dict:
        return {p: ThetaPrior.from_quantiles(SUBSAMPLE_PRIORS[p](self.targets), self.sigma0, self.sigma1)
                for p in self.priors}

    def mesh(self) -> TriMesh:
        return _cached_mesh(self.domain, self.mesh_edge, self.mesh_extension)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(domain=list(self.domain), sizes=list(self.sizes), priors=list(self.priors))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SubsampleConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def data(self) -> LinearModelData:
        truth = ANISO_TRUTH if self.truth == "aniso" else ISO_TRUTH
        return synthetic_linear_data(truth["theta"], truth["beta"], self.mesh(), self.pool_size,
                                     substream(self.master_seed, "pool"), self.domain, self.tau_beta)


SUBSAMPLE_PRIORS = {
    "aniso_pc": PCPrior.from_targets,
    "iso_pc": IsoPCPrior.from_targets,
    "eg": lambda t: default_priors(t)["eg"],
}

SUBSAMPLE_COLUMNS = ["size", "repeat", "prior", "ok", "rmse", "mean_crps", "mean_dss", "n_failed",
                     "pareto_k", "map_converged", *[f"is_{p}" for p in THETA_NAMES], "error"]


def fit_and_score(data: LinearModelData, mesh: TriMesh, prior: ThetaPrior, S: int, seed,
                  theta_true=None, level: float = 0.95) -> dict:
    """Fit one data set and score it by leave-one-out; one long-format row."""
    model = LatentGaussianModel(build_linear_model(data, mesh), prior, mesh=mesh)
    row = {"ok": 0, "rmse": math.nan, "mean_crps": math.nan, "mean_dss": math.nan, "n_failed": len(data),
           "pareto_k": math.nan, "map_converged": 0, "error": ""}
    row.update({f"is_{p}": math.nan for p in THETA_NAMES})
    try:
        fit = fit_model(model, S, seed)
        table = loo_score_table(fit.posterior, model)
    except FIT_ERRORS as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    row.update(ok=1, rmse=table.rmse, mean_crps=table.mean_crps, mean_dss=table.mean_dss,
               n_failed=table.n_failed, pareto_k=float(fit.posterior.pareto_k),
               map_converged=int(fit.map.converged))
    if theta_true is not None:
        wp = fit.posterior
        for i in prior.free:
            lo, hi = weighted_ci(wp.samples[:, i], wp.weights, level)
            row[f"is_{THETA_NAMES[i]}"] = interval_score(lo, hi, 1 - level, theta_true[i])
    return row


def _subsample_cell(data, mesh, priors, size, rep, S, master_seed, theta_true, level):
    rng = np.random.default_rng(substream(master_seed, STAGE_SUBSAMPLE, size, rep))
    rows = np.sort(rng.choice(len(data), size=size, replace=False))
    sub = data.subset(rows)
    out = []
    for name, prior in priors.items():
        seed = substream(master_seed, "psis", size, rep, name)
        r = fit_and_score(sub, mesh, prior, S, seed, theta_true, level)
        out.append({"size": size, "repeat": rep, "prior": name, **r})
    return out


def subsample_study(data: LinearModelData, sizes, repeats: int, priors: dict, mesh: TriMesh, S: int = 300,
                    master_seed: int = 0, theta_true=None, level: float = 0.95, workers: int | None = 1,
                    out_csv=None) -> list:
    """Score curves from repeated uniform subsamples of ``data``.

    Every prior sees the same subsample in a given ``(size, repeat)`` cell,
    so differences between priors are paired.  Returns long-format rows
    (one per size, repeat and prior).
    """
    sizes = [int(s) for s in sizes]
    if any(s > len(data) for s in sizes):
        raise ValueError("subsample size exceeds the data size")
    args = [(data, mesh, priors, s, r, S, master_seed, theta_true, level) for s in sizes for r in range(repeats)]
    rows = [row for cell in _parallel_map(_subsample_cell, args, workers) for row in cell]
    if out_csv is not None:
        write_long_csv(rows, out_csv)
    return rows


def write_long_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUBSAMPLE_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (int, str)) else _fmt(r[c]) for c in SUBSAMPLE_COLUMNS])


def run_subsample(config: SubsampleConfig, workers: int | None = 1, out_dir=None) -> list:
    data = config.data()
    truth = ANISO_TRUTH if config.truth == "aniso" else ISO_TRUTH
    out_csv = os.path.join(out_dir, "scores.csv") if out_dir is not None else None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    rows = subsample_study(data, config.sizes, config.repeats, config.theta_priors(), config.mesh(), config.S,
                           config.master_seed, truth["theta"], config.level, workers, out_csv)
    if out_dir is not None:
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(_finite({"schema_version": SCHEMA_VERSION, "config": config.to_dict(),
                               "median_crps_gap": crps_gap_medians(rows)}), fh, indent=2)
    return rows


def crps_gap_medians(rows, first: str = "iso_pc", second: str = "aniso_pc") -> dict:
    """Median over repeats of ``mean_crps[first] - mean_crps[second]`` per size."""
    gaps = paired_crps_gaps(rows, first, second)
    return {str(s): float(np.median(g)) if len(g) else math.nan for s, g in gaps.items()}


def paired_crps_gaps(rows, first: str = "iso_pc", second: str = "aniso_pc") -> dict:
    """Per size, the list of paired CRPS differences over repeats where both fits succeeded."""
    cells = {}
    for r in rows:
        if r["ok"]:
            cells.setdefault((r["size"], r["repeat"]), {})[r["prior"]] = r["mean_crps"]
    out = {}
    for (size, _), c in sorted(cells.items()):
        out.setdefault(size, [])
        if first in c and second in c:
            out[size].append(c[first] - c[second])
    return out
