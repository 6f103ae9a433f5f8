"""Posterior inference for theta = (log kappa, v1, v2, log sigma_u, log sigma_eps).

Observations follow ``y = A u + X beta + eps`` with ``eps ~ N(0, sigma_eps^2 I)``.
The latent vector is ``x = (u, beta)``; fixed effects, if any, are stored as
trailing dense columns so the sparse factorization keeps its band.  Given
theta everything is Gaussian, so the marginal posterior of theta is known
up to a constant:

    l(theta | y) = l(theta) + l(x | theta) + l(y | x, theta) - l(x | theta, y)

for any x.  It is evaluated at the conditional mean, where the last
quadratic form vanishes.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.optimize as so
import scipy.sparse as sp

from .anisotropy import StationaryParams
from .errors import (
    AllWeightsDegenerate,
    CholeskyFailure,
    HessianIndefinite,
    MaxIterations,
)
from .fem import StationaryPrecision, TriMesh
from .linalg import BandedCholesky, BandOrdering
from .pcprior import distance
from .psis import effective_sample_size, smooth_weights

log = logging.getLogger(__name__)

THETA_NAMES = ("log_kappa", "v1", "v2", "log_sigma_u", "log_sigma_eps")
ISOTROPIC_FREE = (0, 3, 4)
ALL_FREE = (0, 1, 2, 3, 4)


class Theta(NamedTuple):
    log_kappa: float
    v1: float
    v2: float
    log_sigma_u: float
    log_sigma_eps: float

    @classmethod
    def from_natural(cls, kappa, v=(0.0, 0.0), sigma_u=1.0, sigma_eps=1.0) -> "Theta":
        return cls(math.log(kappa), float(v[0]), float(v[1]), math.log(sigma_u), math.log(sigma_eps))

    @property
    def kappa(self) -> float:
        return math.exp(self.log_kappa)

    @property
    def v(self) -> tuple[float, float]:
        return (self.v1, self.v2)

    @property
    def sigma_u(self) -> float:
        return math.exp(self.log_sigma_u)

    @property
    def sigma_eps(self) -> float:
        return math.exp(self.log_sigma_eps)

    @property
    def params(self) -> StationaryParams:
        return StationaryParams.make(self.kappa, self.v, self.sigma_u)

    def array(self) -> np.ndarray:
        return np.array(self, dtype=float)


@dataclass
class ObsModel:
    """``y = A u + X beta + eps`` with ``beta ~ N(0, tau_beta^-1 I)``.

    ``m = 0`` is allowed and means no data (the posterior is the prior).
    """
    A: sp.csr_matrix
    y: np.ndarray
    X: np.ndarray | None = None
    tau_beta: float = 1e-4

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        m = self.A.shape[0]
        if self.y.size != m:
            raise ValueError(f"y has {self.y.size} entries but A has {m} rows")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observations must be finite")
        if self.X is None:
            self.X = np.zeros((m, 0))
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.X.shape[0] != m:
            raise ValueError("X must have one row per observation")
        if self.X.shape[1] and not self.tau_beta > 0:
            raise ValueError("tau_beta must be positive")

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n_fixed(self) -> int:
        return self.X.shape[1]

    @property
    def full_design(self) -> sp.csr_matrix:
        return sp.hstack([self.A, sp.csr_matrix(self.X)], format="csr")

    def subset(self, rows) -> "ObsModel":
        rows = np.asarray(rows)
        return ObsModel(self.A[rows], self.y[rows], self.X[rows], self.tau_beta)


@dataclass(frozen=True)
class ThetaPrior:
    """(kappa, v) prior plus exponential priors on sigma_u and sigma_eps.

    ``lambda_sigma_u = -log(0.01) / 10`` and ``lambda_sigma_eps = -log(0.01) / 1.5``
    give P[sigma_u > 10] = P[sigma_eps > 1.5] = 0.01.
    """
    kv: object
    lambda_sigma_u: float = -math.log(0.01) / 10.0
    lambda_sigma_eps: float = -math.log(0.01) / 1.5

    @classmethod
    def from_quantiles(cls, kv, sigma0: float = 10.0, sigma1: float = 1.5, prob: float = 0.01) -> "ThetaPrior":
        return cls(kv, -math.log(prob) / sigma0, -math.log(prob) / sigma1)

    @property
    def isotropic(self) -> bool:
        return bool(getattr(self.kv, "isotropic", False))

    @property
    def free(self) -> tuple[int, ...]:
        return ISOTROPIC_FREE if self.isotropic else ALL_FREE

    def log_density(self, theta) -> float:
        t = np.asarray(theta, dtype=float)
        if self.isotropic and (t[1] != 0.0 or t[2] != 0.0):
            return -math.inf
        out = float(self.kv.log_density(t[0], t[1], t[2]))
        for lam, ls in ((self.lambda_sigma_u, t[3]), (self.lambda_sigma_eps, t[4])):
            out += math.log(lam) - lam * math.exp(ls) + ls
        return out

    def to_dict(self) -> dict:
        return {"kv": self.kv.to_dict(), "lambda_sigma_u": self.lambda_sigma_u,
                "lambda_sigma_eps": self.lambda_sigma_eps}


@dataclass(frozen=True)
class SafetyBox:
    """Numerical guard rails; theta outside gets zero posterior mass."""
    log_kappa: tuple[float, float] = (-6.0, 6.0)
    max_v_norm: float = 10.0
    log_sigma: tuple[float, float] = (-12.0, 12.0)

    def contains(self, t) -> bool:
        return bool(
            np.all(np.isfinite(t))
            and self.log_kappa[0] <= t[0] <= self.log_kappa[1]
            and math.hypot(t[1], t[2]) <= self.max_v_norm
            and self.log_sigma[0] <= t[3] <= self.log_sigma[1]
            and self.log_sigma[0] <= t[4] <= self.log_sigma[1]
        )


@dataclass
class LatentPosterior:
    """``x | theta, y ~ N(mean, Q_post^-1)`` with ``x = (u, beta)``."""
    Q_post: sp.csr_matrix
    mean: np.ndarray
    factor: BandedCholesky
    Q_prior: sp.csr_matrix
    prior_logdet: float
    noise_precision: float


class LatentGaussianModel:
    """Latent Gaussian model for one observation set.

    Either give a mesh (the stationary SPDE precision is used) or a
    ``precision_fn(theta) -> sparse Q_u`` for custom latent models.
    """

    def __init__(self, obs: ObsModel, prior: ThetaPrior | None = None, mesh: TriMesh | None = None,
                 precision_fn: Callable | None = None, safety: SafetyBox = SafetyBox()):
        if (mesh is None) == (precision_fn is None):
            raise ValueError("give exactly one of mesh or precision_fn")
        self.obs = obs
        self.prior = prior
        self.mesh = mesh
        self.safety = safety
        self._precision_fn = precision_fn
        A = obs.A
        self._AtA = (A.T @ A).tocsr()
        self._AtX = np.asarray(A.T @ obs.X)
        self._XtX = obs.X.T @ obs.X
        self._Aty = np.asarray(A.T @ obs.y).ravel()
        self._Xty = obs.X.T @ obs.y
        if mesh is not None:
            if A.shape[1] != mesh.n:
                raise ValueError("A must have one column per mesh node")
            self._stat = StationaryPrecision(mesh, extra=[self._AtA])
            self._ata_data = self._stat.part(0)
            p = obs.n_fixed
            pattern = sp.block_diag([self._stat.pattern, sp.identity(p)]) if p else self._stat.pattern
            self._post_order = BandOrdering(pattern, n_dense=p)
            self.n_latent = mesh.n
        else:
            self._stat = None
            self._post_order = None
            self.n_latent = A.shape[1]

    @property
    def n(self) -> int:
        return self.n_latent + self.obs.n_fixed

    # ------------------------------------------------------------ algebra

    def _latent_parts(self, theta: Theta):
        if self._stat is not None:
            data = self._stat.data(theta.kappa, theta.v, theta.sigma_u)
            return data, self._stat.matrix(data)
        Qu = sp.csr_matrix(self._precision_fn(theta), dtype=float)
        return None, Qu

    def latent_posterior(self, theta) -> LatentPosterior:
        theta = Theta(*theta)
        obs = self.obs
        q = math.exp(-2.0 * theta.log_sigma_eps)
        data, Qu = self._latent_parts(theta)
        if data is not None:
            prior_logdet = self._stat.logdet(theta.kappa, theta.v, theta.sigma_u)
            sparse_post = self._stat.matrix(data + q * self._ata_data)
        else:
            prior_logdet = BandedCholesky(Qu).logdet
            sparse_post = (Qu + q * self._AtA).tocsr()
        p = obs.n_fixed
        if p:
            prior_logdet += p * math.log(obs.tau_beta)
        if p:
            tau = obs.tau_beta * sp.identity(p)
            Q_prior = sp.block_diag([Qu, tau], format="csr")
            Q_post = sp.bmat([[sparse_post, sp.csr_matrix(q * self._AtX)],
                              [sp.csr_matrix(q * self._AtX.T), tau + q * self._XtX]], format="csr")
            rhs = q * np.concatenate([self._Aty, self._Xty])
        else:
            Q_prior = Qu
            Q_post = sparse_post
            rhs = q * self._Aty
        F = BandedCholesky(Q_post, self._post_order, n_dense=p)
        mean = F.solve(rhs)
        # one step of iterative refinement
        mean = mean + F.solve(rhs - Q_post @ mean)
        return LatentPosterior(Q_post, mean, F, Q_prior, prior_logdet, q)

    def log_posterior(self, theta, u=None) -> float:
        """Unnormalized log posterior of theta; ``-inf`` off support or on failure.

        ``u`` (a full latent vector) defaults to the conditional mean; any
        other value gives the same result up to rounding.
        """
        t = np.asarray(theta, dtype=float)
        if not self.safety.contains(t):
            return -math.inf
        lp = self.prior.log_density(t) if self.prior is not None else 0.0
        if not np.isfinite(lp):
            return -math.inf
        try:
            post = self.latent_posterior(Theta(*t))
        except CholeskyFailure as exc:
            log.warning("zero posterior mass at theta=%s: %s", np.array2string(t, precision=4), exc)
            return -math.inf
        return lp + self._gaussian_terms(post, t[4], u)

    def _gaussian_terms(self, post: LatentPosterior, log_sigma_eps: float, u=None) -> float:
        obs = self.obs
        x = post.mean if u is None else np.asarray(u, dtype=float)
        q = post.noise_precision
        resid = obs.y - obs.A @ x[: self.n_latent]
        if obs.n_fixed:
            resid = resid - obs.X @ x[self.n_latent:]
        prior_quad = float(x @ (post.Q_prior @ x))
        val = 0.5 * (post.prior_logdet - prior_quad)
        val += 0.5 * (-2.0 * obs.m * log_sigma_eps - q * float(resid @ resid) - obs.m * math.log(2 * math.pi))
        val -= 0.5 * post.factor.logdet
        if u is not None:
            d = x - post.mean
            val += 0.5 * float(d @ (post.Q_post @ d))
        return val

    def __call__(self, theta) -> float:
        return self.log_posterior(theta)


def latent_posterior(theta, model: LatentGaussianModel) -> LatentPosterior:
    return model.latent_posterior(theta)


def log_posterior_unnorm(theta, model: LatentGaussianModel, u=None) -> float:
    return model.log_posterior(theta, u)


# --------------------------------------------------------------- optimization


def _embed(free_vals, base, free):
    t = np.array(base, dtype=float)
    t[list(free)] = free_vals
    return t


def fd_gradient(f, x, rel_step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient with step ``rel_step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_hessian(f, x, rel_step: float = 1e-4, f0: float | None = None) -> np.ndarray:
    """Central second differences, symmetric by construction."""
    x = np.asarray(x, dtype=float)
    k = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    f0 = f(x) if f0 is None else f0
    H = np.empty((k, k))
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h[i] * h[j])
    return H


@dataclass
class MapResult:
    theta: Theta
    value: float
    grad_norm: float
    converged: bool
    n_evals: int
    free: tuple[int, ...] = ALL_FREE


def map_estimate(model, init, free=None, max_evals: int = 4000, raise_on_failure: bool = False) -> MapResult:
    """Local maximizer of ``model(theta)`` (the unnormalized log posterior).

    Nelder-Mead with one restart locates the basin; BFGS on central
    finite-difference gradients refines it.  ``converged`` reports whether
    the gradient-norm criterion ``|g| <= 1e-4 (1 + |l|)`` holds.
    """
    init = np.asarray(init, dtype=float)
    if not np.all(np.isfinite(init)):
        raise ValueError("init must be finite")
    if free is None:
        prior = getattr(model, "prior", None)
        free = prior.free if prior is not None else ALL_FREE
    free = tuple(free)
    count = [0]

    def neg(z):
        count[0] += 1
        val = model(_embed(z, init, free))
        return -val if np.isfinite(val) else 1e300

    z0 = init[list(free)]
    if neg(z0) >= 1e300:
        raise ValueError("log posterior is -inf at the initial value")

    def grad(z):
        return fd_gradient(neg, z)

    best = z0
    for xatol, fatol in ((3e-2, 1e-3), (1e-4, 1e-7)):
        # a coarse simplex search finds the basin, BFGS polishes; one finer restart if needed
        nm_opts = dict(xatol=xatol, fatol=fatol, maxfev=max_evals // 4, adaptive=True)
        best = so.minimize(neg, best, method="Nelder-Mead", options=nm_opts).x
        gtol = 1e-6 * (1 + abs(neg(best)))
        # the line search divides by infinite slopes when a trial step leaves the safety box
        with np.errstate(invalid="ignore", over="ignore"):
            res = so.minimize(neg, best, jac=grad, method="BFGS", options=dict(gtol=gtol, maxiter=100))
        if res.fun <= neg(best):
            best = res.x
        value = -neg(best)
        gnorm = float(np.linalg.norm(grad(best)))
        ok = bool(np.isfinite(value) and gnorm <= 1e-4 * (1 + abs(value)))
        if ok:
            break
    out = MapResult(Theta(*_embed(best, init, free)), value, gnorm, ok, count[0], free)
    if not ok and raise_on_failure:
        raise MaxIterations(f"gradient norm {gnorm:.3g} above tolerance at l={value:.6g}")
    return out


@dataclass
class GaussianApprox:
    """``N(mode, covariance)`` on the free coordinates ``free`` of theta."""
    mode: Theta
    covariance: np.ndarray
    free: tuple[int, ...] = ALL_FREE
    jitter: float = 0.0

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=float)
        self._chol = sla.cholesky(self.covariance, lower=True)

    @property
    def mean_free(self) -> np.ndarray:
        return np.asarray(self.mode)[list(self.free)]

    def sample(self, seed, count: int) -> np.ndarray:
        """``count`` full theta vectors (fixed coordinates copied from the mode)."""
        z = np.random.default_rng(seed).standard_normal((count, len(self.free)))
        out = np.tile(np.asarray(self.mode, dtype=float), (count, 1))
        out[:, list(self.free)] = self.mean_free + z @ self._chol.T
        return out

    def log_density(self, thetas) -> np.ndarray:
        t = np.atleast_2d(np.asarray(thetas, dtype=float))[:, list(self.free)]
        d = sla.solve_triangular(self._chol, (t - self.mean_free).T, lower=True)
        k = len(self.free)
        logdet = 2 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (np.sum(d * d, axis=0) + logdet + k * math.log(2 * math.pi))

    def sd(self) -> np.ndarray:
        """Marginal standard deviations for all five coordinates (0 when fixed)."""
        out = np.zeros(5)
        out[list(self.free)] = np.sqrt(np.diag(self.covariance))
        return out


def gaussian_approx(model, theta_hat, free=None, rel_step: float = 1e-4) -> GaussianApprox:
    """Gaussian with precision ``-Hessian`` of ``model`` at ``theta_hat``."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    if free is None:
        prior = getattr(model, "prior", None)
        free = prior.free if prior is not None else ALL_FREE
    free = tuple(free)

    def f(z):
        return model(_embed(z, theta_hat, free))

    z = theta_hat[list(free)]
    f0 = f(z)
    with np.errstate(invalid="ignore"):  # -inf stencil points give nan, rejected below
        H = fd_hessian(f, z, rel_step, f0)
    if not np.all(np.isfinite(H)):
        raise HessianIndefinite("log posterior is not finite around the mode")
    M = -0.5 * (H + H.T)
    jitter = 0.0
    base = 1e-8 * (1 + np.max(np.abs(np.diag(M))))
    while True:
        try:
            L = np.linalg.cholesky(M + jitter * np.eye(len(free)))
            break
        except np.linalg.LinAlgError:
            jitter = base if jitter == 0.0 else 2 * jitter
            if jitter > 1e-2:
                raise HessianIndefinite("negative Hessian is not positive definite at theta_hat") from None
    Linv = sla.solve_triangular(L, np.eye(len(free)), lower=True)
    cov = Linv.T @ Linv
    cov = 0.5 * (cov + cov.T)
    return GaussianApprox(Theta(*theta_hat), cov, free, jitter)


# --------------------------------------------------------- importance sampling


@dataclass
class WeightedPosterior:
    samples: np.ndarray
    weights: np.ndarray
    pareto_k: float
    log_ratios: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.samples.shape[0] != self.weights.size:
            raise ValueError("one weight per sample required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")

    @property
    def ess(self) -> float:
        return effective_sample_size(self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.samples

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*THETA_NAMES, "weight"])
            for row, wt in zip(self.samples, self.weights):
                w.writerow([f"{x:.9g}" for x in row] + [f"{wt:.9g}"])

    def diagnostics(self, map_theta=None, level: float = 0.95) -> dict:
        ci = {name: list(weighted_ci(self.samples[:, i], self.weights, level)) for i, name in enumerate(THETA_NAMES)}
        return {
            "schema_version": 1,
            "pareto_k": _json_float(self.pareto_k),
            "ess": self.ess,
            "map": dict(zip(THETA_NAMES, map(float, map_theta))) if map_theta is not None else None,
            "ci": ci,
            "ci_level": level,
        }

    def write_diagnostics(self, path, map_theta=None, level: float = 0.95) -> None:
        with open(path, "w") as fh:
            json.dump(self.diagnostics(map_theta, level), fh, indent=2)


def _json_float(x):
    return float(x) if np.isfinite(x) else None


def importance_sample(log_target, approx: GaussianApprox, S: int, seed, smooth: bool = True) -> WeightedPosterior:
    """Self-normalized importance sampling from the proposal ``approx``.

    ``log_target`` maps a full theta vector to an unnormalized log density.
    """
    if S < 100:
        raise ValueError("S must be at least 100")
    thetas = approx.sample(seed, S)
    lt = np.array([log_target(t) for t in thetas], dtype=float)
    lr = lt - approx.log_density(thetas)
    lr[np.isnan(lr)] = -np.inf
    if smooth:
        sw = smooth_weights(lr)
        w, k = sw.weights, sw.pareto_k
    else:
        w = np.exp(lr - lr.max())
        w, k = w / w.sum(), float("nan")
    if w.max() > 0.999:
        raise AllWeightsDegenerate(f"one importance weight carries {w.max():.4f} of the mass")
    return WeightedPosterior(thetas, w, k, lr)


def psis_posterior(model: LatentGaussianModel, approx: GaussianApprox, S: int = 1000, seed=0) -> WeightedPosterior:
    return importance_sample(model.log_posterior, approx, S, seed)


def weighted_quantile(x, weights, q):
    """Weighted quantile with linear interpolation between sample points.

    Sample ``i`` (sorted) sits at cumulative probability ``c_i - w_i / 2``;
    values outside the first/last midpoint are clamped.  Uniform weights on
    1..100 give 5.5 and 95.5 at 0.05 and 0.95.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(weights, dtype=float)
    keep = w > 0
    x, w = x[keep], w[keep]
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order] / w.sum()
    mid = np.cumsum(w) - 0.5 * w
    return np.interp(q, mid, x)


def weighted_ci(x, weights, level: float = 0.95) -> tuple[float, float]:
    lo, hi = weighted_quantile(x, weights, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


class PosteriorSummary(NamedTuple):
    mean: float
    ci: tuple[float, float]
    complexity: float


def posterior_summary(wp: WeightedPosterior, g=None, level: float = 0.95) -> PosteriorSummary:
    """Weighted mean and equal-tailed interval of ``g(theta)`` plus E[d(kappa, v)].

    ``g`` defaults to the identity on the first coordinate (log kappa).
    """
    s = wp.samples
    vals = np.array([g(t) for t in s], dtype=float) if g is not None else s[:, 0]
    mean = float(wp.weights @ vals)
    kappa = np.exp(s[:, 0])
    d = np.array([distance(k, (a, b)) for k, a, b in zip(kappa, s[:, 1], s[:, 2])])
    return PosteriorSummary(mean, weighted_ci(vals, wp.weights, level), float(wp.weights @ d))


def kld_vs_gaussian(wp: WeightedPosterior) -> float:
    """``sum_s w_s log(S w_s)``, the importance estimate of KL(posterior || proposal)."""
    w = wp.weights
    S = w.size
    nz = w > 0
    return float(np.sum(w[nz] * np.log(S * w[nz])))


# ------------------------------------------------------------------ pipeline


def default_init(model: LatentGaussianModel) -> Theta:
    """Data-scaled starting point: range a third of the data extent, ``sigma_eps = sigma_u / 2``."""
    obs = model.obs
    if obs.m >= 2:
        sd = float(np.std(obs.y - obs.y.mean())) or 1.0
    else:
        sd = 1.0
    if model.mesh is not None:
        pts = model.mesh.nodes[model.mesh.core] if model.mesh.core.any() else model.mesh.nodes
        extent = float(np.max(np.ptp(pts, axis=0)))
    else:
        extent = 1.0
    kappa = math.sqrt(8.0) / (extent / 3.0)
    return Theta(math.log(kappa), 0.0, 0.0, math.log(sd), math.log(0.5 * sd))


@dataclass
class FitResult:
    map: MapResult
    approx: GaussianApprox
    posterior: WeightedPosterior


def fit_model(model: LatentGaussianModel, S: int = 1000, seed=0, init=None) -> FitResult:
    """MAP, Gaussian approximation at the MAP, then PSIS with ``S`` draws."""
    init = default_init(model) if init is None else Theta(*init)
    mp = map_estimate(model, init)
    approx = gaussian_approx(model, mp.theta, mp.free)
    wp = psis_posterior(model, approx, S, seed)
    return FitResult(mp, approx, wp)
