"""Command-line interface: ``anisospde {sample,prior,fit,score,simstudy}``.

Every command writes into ``--out DIR`` and finishes with ``manifest.json``
(config hash, seed, version, timestamps, output files).  Exit codes: 0 on
success, 2 for invalid flags or inputs, 3 for numerical failure.  Files
written by a failed command are removed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
from contextlib import nullcontext
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .anisotropy import StationaryParams, h_matrix
from .errors import AnisoSpdeError
from .fem import StationaryPrecision, build_rect_mesh, export_matrix_market, interpolation_matrix, sample_field
from .inference import (
    LatentGaussianModel,
    ObsModel,
    Theta,
    ThetaPrior,
    WeightedPosterior,
    fit_model,
)
from .linalg import BandedCholesky
from .pcprior import (
    IsoPCPrior,
    QuantileTargets,
    calibrate,
    calibrate_eg,
    cdf_kappa,
    cdf_r,
    default_priors,
    pdf_kappa,
    pdf_r,
    sample_pc,
)
from .scoring import loo_score_table
from .spectral import FreqGrid, GridField, covariance_grid, spectral_sample
from .simstudy import ExperimentConfig, SubsampleConfig, run_study, run_subsample

log = logging.getLogger("anisospde")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SCHEMA_VERSION = 1
FIT_PRIORS = ("pc", "eg", "uniform", "beta", "iso_pc")


class UsageError(Exception):
    """Invalid flags or inputs (exit code 2)."""


# ------------------------------------------------------------------ outputs


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form; independent of key order."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_json_atomic(path, obj) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str = __version__
    started: str = field(default_factory=lambda: _now())
    finished: str | None = None
    files: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "command": self.command, "config": self.config,
                "config_hash": self.config_hash, "seed": self.seed, "version": self.version,
                "started": self.started, "finished": self.finished, "files": self.files}

    def write(self, path) -> None:
        self.finished = _now()
        write_json_atomic(path, self.to_dict())


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class OutputDir:
    """Tracks files a command writes so a failure can remove them."""

    def __init__(self, path):
        self.path = path
        self.created_dir = not os.path.isdir(path)
        os.makedirs(path, exist_ok=True)
        self.files: list[str] = []

    def __call__(self, name: str) -> str:
        p = os.path.join(self.path, name)
        self.files.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.files:
            if os.path.exists(p):
                os.unlink(p)
        if self.created_dir:
            try:
                os.rmdir(self.path)
            except OSError:
                pass

    def listing(self) -> list:
        out = []
        for p in self.files:
            if os.path.exists(p):
                with open(p, "rb") as fh:
                    digest = hashlib.sha256(fh.read()).hexdigest()
                out.append({"path": os.path.basename(p), "bytes": os.path.getsize(p), "sha256": digest})
        return out


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.9g}" if isinstance(x, float) else x for x in r])


# ------------------------------------------------------------------- sample


def _sample_params(a) -> StationaryParams:
    if not (a.kappa > 0 and a.sigma_u > 0):
        raise UsageError("--kappa and --sigma-u must be positive")
    if not math.isfinite(a.v1) or not math.isfinite(a.v2):
        raise UsageError("--v1 and --v2 must be finite")
    return StationaryParams.make(a.kappa, (a.v1, a.v2), a.sigma_u)


def _auto_box(p: StationaryParams) -> float:
    # five major-axis ranges: one more than the spectral wrap-around minimum
    return 5.0 * p.range * math.exp(0.5 * p.v.norm)


def _fem_grid(p: StationaryParams, box: float, n: int, mesh_edge: float | None):
    H = h_matrix(p.v)
    edge = mesh_edge or 0.21 / p.kappa * math.exp(-0.5 * p.v.norm)
    ext = (1.5 * p.range * math.sqrt(H.h11), 1.5 * p.range * math.sqrt(H.h22))
    mesh = build_rect_mesh((0.0, box), (0.0, box), edge, ext)
    Q = StationaryPrecision(mesh).precision(p)
    return mesh, Q


def cmd_sample(a, out: OutputDir) -> dict:
    p = _sample_params(a)
    n = a.grid_n
    box = a.box or _auto_box(p)
    if not box > 0:
        raise UsageError("--box must be positive")
    if a.method == "spectral":
        grid = FreqGrid(n, n, box, box)
        spectral_sample(p, grid, a.seed).to_csv(out("field.csv"))
        if a.covariance:
            covariance_grid(p, grid).to_csv(out("covariance.csv"))
    else:
        if n < 2:
            raise UsageError("--grid-n must be at least 2")
        mesh, Q = _fem_grid(p, box, n, a.mesh_edge)
        F = BandedCholesky(Q)
        xs = np.arange(n) * (box / n)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        A = interpolation_matrix(mesh, np.column_stack([X.ravel(), Y.ravel()]))
        u = sample_field(Q, a.seed, mesh, F).weights
        GridField((A @ u).reshape(n, n), xs, xs).to_csv(out("field.csv"))
        if a.covariance:
            lags = (np.arange(n) - n // 2) * (box / n)
            c = np.array([[box / 2, box / 2]])
            LX, LY = np.meshgrid(lags, lags, indexing="ij")
            pts = np.column_stack([LX.ravel(), LY.ravel()]) + c
            a_c = interpolation_matrix(mesh, c).toarray().ravel()
            cov = interpolation_matrix(mesh, pts) @ F.solve(a_c)
            GridField(cov.reshape(n, n), lags, lags).to_csv(out("covariance.csv"))
        if a.export_precision:
            export_matrix_market(Q, out("precision.mtx"))
    return {"method": a.method, "kappa": a.kappa, "v1": a.v1, "v2": a.v2, "sigma_u": a.sigma_u,
            "grid_n": n, "box": box, "seed": a.seed, "covariance": bool(a.covariance)}


# -------------------------------------------------------------------- prior


def _targets(a) -> QuantileTargets:
    try:
        return QuantileTargets(a.a0, a.beta, a.rho0, a.alpha)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_prior(a, out: OutputDir) -> dict:
    t = _targets(a)
    if a.samples < 1:
        raise UsageError("--samples must be positive")
    hyper = calibrate(t)
    lam_k, sigma_v = calibrate_eg(t)
    iso = IsoPCPrior.from_targets(t)
    kappa0 = math.sqrt(8.0) / t.rho0
    info = {
        "schema_version": SCHEMA_VERSION,
        "targets": {"a0": t.a0, "beta": t.beta, "rho0": t.rho0, "alpha": t.alpha},
        "pc": {"lambda_theta": hyper.lambda_theta, "lambda_v": hyper.lambda_v,
               "p_ratio_above_a0": 1.0 - cdf_r(math.log(t.a0), hyper),
               "p_range_below_rho0": 1.0 - cdf_kappa(kappa0, hyper)},
        "eg": {"lambda_kappa": lam_k, "sigma_v": sigma_v},
        "iso_pc": {"lambda_iso": iso.lambda_iso, "constant": iso.constant},
    }
    write_json_atomic(out("hyperparameters.json"), info)
    # density curves up to the 0.999 quantiles
    kmax = kappa0 * 3.0
    kap = np.linspace(kmax / 400, kmax, 400)
    _write_rows(out("density_kappa.csv"), ["kappa", "pc", "eg"],
                zip(kap, pdf_kappa(kap, hyper), lam_k * np.exp(-lam_k * kap)))
    r = np.linspace(math.log(t.a0) * 1.5 / 400, math.log(t.a0) * 1.5, 400)
    _write_rows(out("density_r.csv"), ["r", "pc", "eg"],
                zip(r, pdf_r(r, hyper), r / sigma_v**2 * np.exp(-0.5 * r * r / sigma_v**2)))
    k, v = sample_pc(hyper, a.seed, a.samples)
    _write_rows(out("samples_pc.csv"), ["kappa", "v1", "v2"], zip(k, v[:, 0], v[:, 1]))
    eg = default_priors(t)["eg"]
    lk, v = eg.sample(a.seed, a.samples)
    _write_rows(out("samples_eg.csv"), ["kappa", "v1", "v2"], zip(np.exp(lk), v[:, 0], v[:, 1]))
    return {"targets": info["targets"], "samples": a.samples, "seed": a.seed}


# ---------------------------------------------------------------------- fit


def read_observations(path):
    """CSV with columns ``x,y,obs`` and optional ``h``."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise UsageError(f"{path} has no data rows")
    cols = set(rows[0])
    missing = {"x", "y", "obs"} - cols
    if missing:
        raise UsageError(f"{path} lacks columns {sorted(missing)}")
    try:
        xy = np.array([[float(r["x"]), float(r["y"])] for r in rows])
        obs = np.array([float(r["obs"]) for r in rows])
        h = np.array([float(r["h"]) for r in rows]) if "h" in cols else None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"non-numeric entry in {path}: {exc}") from None
    if not (np.all(np.isfinite(xy)) and np.all(np.isfinite(obs)) and (h is None or np.all(np.isfinite(h)))):
        raise UsageError(f"non-finite entry in {path}")
    return xy, obs, h


def _fit_settings(a, xy) -> dict:
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    extent = float(max(hi - lo)) or 1.0
    return {
        "prior": a.prior, "S": a.S, "seed": a.seed,
        "a0": a.a0, "beta": a.beta, "rho0": a.rho0, "alpha": a.alpha,
        "sigma0": a.sigma0, "sigma1": a.sigma1, "tau_beta": a.tau_beta,
        "box": [float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])],
        "mesh_edge": a.mesh_edge or extent / 30.0,
        "mesh_extension": a.mesh_extension if a.mesh_extension is not None else extent / 4.0,
    }


def _build_fit_model(settings: dict, xy, obs, h):
    x0, x1, y0, y1 = settings["box"]
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    mesh = build_rect_mesh((x0, x1), (y0, y1), settings["mesh_edge"], settings["mesh_extension"])
    A = interpolation_matrix(mesh, xy)
    X = np.ones((len(obs), 1)) if h is None else np.column_stack([np.ones(len(obs)), h])
    o = ObsModel(A, obs, X, settings["tau_beta"])
    t = QuantileTargets(settings["a0"], settings["beta"], settings["rho0"], settings["alpha"])
    kv_table = default_priors(t, max(x1 - x0, y1 - y0))
    kv_table["iso_pc"] = IsoPCPrior.from_targets(t)
    prior = ThetaPrior.from_quantiles(kv_table[settings["prior"]], settings["sigma0"], settings["sigma1"])
    return LatentGaussianModel(o, prior, mesh=mesh), mesh


def cmd_fit(a, out: OutputDir) -> dict:
    xy, obs, h = read_observations(a.data)
    if a.S < 100:
        raise UsageError("--S must be at least 100")
    settings = _fit_settings(a, xy)
    _targets(a)
    model, mesh = _build_fit_model(settings, xy, obs, h)
    fit = fit_model(model, a.S, a.seed)
    fit.posterior.to_csv(out("posterior.csv"))
    diag = fit.posterior.diagnostics(fit.map.theta)
    diag["map_converged"] = fit.map.converged
    diag["map_log_posterior"] = fit.map.value
    write_json_atomic(out("diagnostics.json"), diag)
    _write_rows(out("data.csv"), ["x", "y", "h", "obs"] if h is not None else ["x", "y", "obs"],
                (tuple(xy[i]) + ((h[i],) if h is not None else ()) + (obs[i],) for i in range(len(obs))))
    write_json_atomic(out("fit.json"), {"schema_version": SCHEMA_VERSION, **settings})
    if a.export_precision:
        export_matrix_market(model.latent_posterior(fit.map.theta).Q_prior, out("precision_map.mtx"))
    return settings


# -------------------------------------------------------------------- score


def read_posterior(path) -> WeightedPosterior:
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read posterior {path}: {exc}") from None
    if table.shape[1] != 6:
        raise UsageError(f"{path} must have six columns")
    w = table[:, 5]
    return WeightedPosterior(table[:, :5], w / w.sum(), math.nan)


def cmd_score(a, out: OutputDir) -> dict:
    fit_dir = a.fit
    try:
        with open(os.path.join(fit_dir, "fit.json")) as fh:
            settings = json.load(fh)
    except (OSError, ValueError) as exc:
        raise UsageError(f"{fit_dir} is not a fit directory: {exc}") from None
    xy, obs, h = read_observations(os.path.join(fit_dir, "data.csv"))
    wp = read_posterior(os.path.join(fit_dir, "posterior.csv"))
    model, _ = _build_fit_model(settings, xy, obs, h)
    table = loo_score_table(wp, model, min_weight=a.min_weight)
    table.to_csv(out("scores.csv"))
    table.write_json(out("scores.json"))
    return {"fit": os.path.abspath(fit_dir), "min_weight": a.min_weight, "fit_config": settings}


# ----------------------------------------------------------------- simstudy


def cmd_simstudy(a, out: OutputDir) -> dict:
    try:
        with open(a.config) as fh:
            raw = json.load(fh)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {a.config}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    raw = dict(raw)
    study = raw.pop("study", "prior_comparison")
    # flags override the file
    for flag, key in (("J", "J"), ("S", "S"), ("seed", "master_seed")):
        val = getattr(a, flag)
        if val is not None:
            raw[key] = val
    if study == "prior_comparison":
        cfg = ExperimentConfig.from_dict(raw)
        res = run_study(cfg, workers=a.threads)
        for name in ("records.csv", "sbc.csv", "scores.csv", "summary.json"):
            out(name)
        res.write(out.path)
        return {"study": study, **cfg.to_dict()}
    if study == "subsample":
        cfg = SubsampleConfig.from_dict(raw)
        out("scores.csv"), out("summary.json")
        run_subsample(cfg, workers=a.threads, out_dir=out.path)
        return {"study": study, **cfg.to_dict()}
    raise UsageError(f"unknown study {study!r}")


# --------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anisospde", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=1, help="worker processes and BLAS threads (default 1)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sample", help="draw a field on a regular grid")
    s.add_argument("--method", choices=["fem", "spectral"], required=True)
    s.add_argument("--kappa", type=float, required=True)
    s.add_argument("--v1", type=float, default=0.0)
    s.add_argument("--v2", type=float, default=0.0)
    s.add_argument("--sigma-u", type=float, default=1.0)
    s.add_argument("--grid-n", type=int, default=128)
    s.add_argument("--box", type=float, default=None, help="square side; default five major-axis ranges")
    s.add_argument("--mesh-edge", type=float, default=None, help="FEM only; default 0.21/kappa")
    s.add_argument("--covariance", action="store_true", help="also write K(lag) centred at lag 0")
    s.add_argument("--export-precision", action="store_true", help="FEM only; Matrix Market file of Q")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    def add_targets(q):
        q.add_argument("--a0", type=float, default=10.0)
        q.add_argument("--beta", type=float, default=0.01)
        q.add_argument("--rho0", type=float, default=1.0)
        q.add_argument("--alpha", type=float, default=0.01)

    q = sub.add_parser("prior", help="calibrate PC priors, write densities and samples")
    add_targets(q)
    q.add_argument("--samples", type=int, default=10_000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)

    f = sub.add_parser("fit", help="MAP and PSIS posterior for x,y,obs[,h] data")
    f.add_argument("--data", required=True)
    f.add_argument("--prior", choices=FIT_PRIORS, default="pc")
    add_targets(f)
    f.add_argument("--sigma0", type=float, default=10.0)
    f.add_argument("--sigma1", type=float, default=1.5)
    f.add_argument("--tau-beta", type=float, default=1e-4)
    f.add_argument("--mesh-edge", type=float, default=None)
    f.add_argument("--mesh-extension", type=float, default=None)
    f.add_argument("--S", type=int, default=1000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--export-precision", action="store_true")
    f.add_argument("--out", required=True)

    c = sub.add_parser("score", help="leave-one-out scores of a fit")
    c.add_argument("--fit", required=True, help="output directory of 'fit'")
    c.add_argument("--min-weight", type=float, default=0.0)
    c.add_argument("--out", required=True)

    m = sub.add_parser("simstudy", help="run a JSON-configured study")
    m.add_argument("config")
    m.add_argument("--J", type=int, default=None)
    m.add_argument("--S", type=int, default=None)
    m.add_argument("--seed", type=int, default=None)
    m.add_argument("--out", required=True)
    return p


COMMANDS = {"sample": cmd_sample, "prior": cmd_prior, "fit": cmd_fit, "score": cmd_score, "simstudy": cmd_simstudy}


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # optional at runtime
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=a.log_level, format="%(levelname)s %(name)s: %(message)s")
    if a.threads < 1:
        parser.error("--threads must be at least 1")
    out = OutputDir(a.out)
    seed = getattr(a, "seed", None)
    manifest = RunManifest(a.command, {}, seed)
    try:
        with _thread_limit(a.threads):
            manifest.config = COMMANDS[a.command](a, out)
    except (UsageError, ValueError) as exc:
        out.cleanup()
        print(f"anisospde {a.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AnisoSpdeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        out.cleanup()
        print(f"anisospde {a.command}: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BaseException:
        out.cleanup()
        raise
    manifest.files = out.listing()
    manifest.write(os.path.join(out.path, "manifest.json"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
