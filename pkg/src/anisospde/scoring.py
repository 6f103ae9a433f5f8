"""Proper scoring rules and leave-one-out predictive moments.

Leaving out observation ``i`` is a rank-one downdate of the latent posterior
precision, ``Q_post - q b_i b_i^T`` with ``q = sigma_eps^-2``.  With
``V_i = b_i Q_post^-1 b_i^T`` and ``eta_i = b_i m`` Sherman-Morrison gives

    mean_i = y_i + (eta_i - y_i) / (1 - q V_i)
    var_i  = sigma_eps^2 / (1 - q V_i)

for the predictive distribution of ``y_i`` given the other observations.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

from .errors import NumericallySingularDowndate

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
DOWNDATE_TOL = 1e-12


def _phi(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def crps_gaussian(mean, std, y):
    """CRPS of N(mean, std^2) at y: ``std [z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)]``."""
    std = np.asarray(std, dtype=float)
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    z = (np.asarray(y, dtype=float) - mean) / std
    out = std * (z * (2 * ndtr(z) - 1) + 2 * _phi(z) - _INV_SQRT_PI)
    return out if np.ndim(out) else float(out)


def _A(mu, var):
    s = np.sqrt(var)
    return mu * (2 * ndtr(mu / s) - 1) + 2 * s * _phi(mu / s)


class PredictiveMixture(NamedTuple):
    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray

    @classmethod
    def make(cls, means, stds, weights=None) -> "PredictiveMixture":
        means = np.atleast_1d(np.asarray(means, dtype=float))
        stds = np.atleast_1d(np.asarray(stds, dtype=float))
        w = np.full(means.size, 1.0 / means.size) if weights is None else np.asarray(weights, dtype=float)
        if means.shape != stds.shape or w.shape != means.shape:
            raise ValueError("means, stds and weights must have equal length")
        if np.any(stds <= 0) or np.any(w < 0) or abs(w.sum() - 1) > 1e-10:
            raise ValueError("invalid mixture")
        return cls(means, stds, w)

    @property
    def mean(self) -> float:
        return float(self.weights @ self.means)

    @property
    def variance(self) -> float:
        """Law of total variance."""
        return float(self.weights @ (self.stds**2 + self.means**2) - self.mean**2)

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        return np.sum(self.weights * ndtr((t[..., None] - self.means) / self.stds), axis=-1)


def crps_mixture(mix: PredictiveMixture, y: float) -> float:
    """Exact CRPS of a Gaussian mixture.

    ``sum_i w_i A(y - mu_i, s_i^2) - 1/2 sum_ij w_i w_j A(mu_i - mu_j, s_i^2 + s_j^2)``
    with ``A(mu, s^2) = mu (2 Phi(mu/s) - 1) + 2 s phi(mu/s)``.
    """
    keep = mix.weights > 0
    mu, s, w = mix.means[keep], mix.stds[keep], mix.weights[keep]
    first = w @ _A(y - mu, s * s)
    second = w @ _A(mu[:, None] - mu[None, :], s[:, None] ** 2 + s[None, :] ** 2) @ w
    return float(first - 0.5 * second)


def dss(mean, variance, y):
    """Dawid-Sebastiani score ``log(variance) + (y - mean)^2 / variance``."""
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0):
        raise ValueError("variance must be positive")
    out = np.log(variance) + (np.asarray(y, dtype=float) - mean) ** 2 / variance
    return out if np.ndim(out) else float(out)


def interval_score(lo, hi, level_alpha, y):
    """``(hi - lo) + (2/alpha)(lo - y)[y < lo] + (2/alpha)(y - hi)[y > hi]``."""
    if not 0 < level_alpha < 1:
        raise ValueError("level_alpha must lie in (0, 1)")
    lo, hi, y = (np.asarray(a, dtype=float) for a in (lo, hi, y))
    if np.any(lo > hi):
        raise ValueError("lo must not exceed hi")
    k = 2.0 / level_alpha
    out = (hi - lo) + k * np.maximum(lo - y, 0.0) + k * np.maximum(y - hi, 0.0)
    return out if np.ndim(out) else float(out)


# ------------------------------------------------------------------- LOO


class LooMoments(NamedTuple):
    mean: np.ndarray
    var: np.ndarray
    eta: np.ndarray
    V: np.ndarray


def loo_moments(theta, model, strict: bool = True) -> LooMoments:
    """Per-observation leave-one-out predictive mean and variance of ``y_i``.

    One factorization of ``Q_post`` serves all ``i``: ``V_i = b_i x_i`` with
    ``Q_post x_i = b_i^T``.  With ``strict=False`` rows failing the downdate
    check become NaN instead of raising.
    """
    post = model.latent_posterior(theta)
    obs = model.obs
    B = obs.full_design
    q = post.noise_precision
    X = post.factor.solve(B.T.toarray())
    V = np.asarray(B.multiply(X.T).sum(axis=1)).ravel()
    eta = B @ post.mean
    denom = 1.0 - q * V
    bad = ~(denom > DOWNDATE_TOL)
    if strict and np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise NumericallySingularDowndate(f"observation {i} nearly interpolates itself (1 - qV = {denom[i]:.3g})")
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = obs.y + (eta - obs.y) / denom
        var = (1.0 / q) / denom
    mean[bad] = np.nan
    var[bad] = np.nan
    return LooMoments(mean, var, eta, V)


def sherman_morrison_downdate(cov, b, q):
    """Covariance after removing ``q b b^T`` from the precision."""
    cb = cov @ b
    return cov + q * np.outer(cb, cb) / (1.0 - q * b @ cb)


@dataclass
class ScoreTable:
    loo_mean: np.ndarray
    loo_var: np.ndarray
    se: np.ndarray
    crps: np.ndarray
    dss: np.ndarray
    interval: dict = field(default_factory=dict)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.se) & np.isfinite(self.crps) & np.isfinite(self.dss)

    @property
    def n_failed(self) -> int:
        return int(np.sum(~self.valid))

    @property
    def rmse(self) -> float:
        return float(math.sqrt(np.mean(self.se[self.valid])))

    @property
    def mean_crps(self) -> float:
        return float(np.mean(self.crps[self.valid]))

    @property
    def mean_dss(self) -> float:
        return float(np.mean(self.dss[self.valid]))

    def aggregates(self) -> dict:
        return {"schema_version": 1, "rmse": self.rmse, "mean_crps": self.mean_crps, "mean_dss": self.mean_dss,
                "n": int(self.se.size), "n_failed": self.n_failed, "interval": self.interval}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["obs_id", "loo_mean", "loo_var", "se", "crps", "dss"])
            for i in range(self.se.size):
                w.writerow([i] + [f"{a[i]:.9g}" for a in (self.loo_mean, self.loo_var, self.se, self.crps, self.dss)])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.aggregates(), fh, indent=2)


def loo_score_table(wp, model, min_weight: float = 0.0) -> ScoreTable:
    """LOO scores of the importance-weighted predictive mixture.

    Every sample with weight above ``min_weight`` contributes one Gaussian
    component ``N(mean_i(theta_s), var_i(theta_s))`` with weight ``w_s``;
    the posterior given all data stands in for the one without ``y_i``.
    """
    y = model.obs.y
    keep = np.flatnonzero(wp.weights > min_weight)
    w = wp.weights[keep] / wp.weights[keep].sum()
    means = np.empty((keep.size, y.size))
    vars_ = np.empty_like(means)
    for r, s in enumerate(keep):
        lm = loo_moments(wp.samples[s], model, strict=False)
        means[r], vars_[r] = lm.mean, lm.var
    mix_mean = w @ means
    mix_var = w @ (vars_ + means**2) - mix_mean**2
    se = (y - mix_mean) ** 2
    crps = np.full(y.size, np.nan)
    ds = np.full(y.size, np.nan)
    for i in range(y.size):
        if np.all(np.isfinite(means[:, i])) and mix_var[i] > 0:
            mix = PredictiveMixture(means[:, i], np.sqrt(vars_[:, i]), w)
            crps[i] = crps_mixture(mix, y[i])
            ds[i] = dss(mix_mean[i], mix_var[i], y[i])
        else:
            se[i] = np.nan
    return ScoreTable(mix_mean, mix_var, se, crps, ds)
