"""Pareto-smoothed self-normalized importance weights.

The largest ``M = min(ceil(0.2 S), ceil(3 sqrt(S)))`` raw weights are replaced
by quantiles of a generalized Pareto distribution fitted to their excess
over the largest non-tail weight.  The fit uses probability-weighted
moments, which is closed form and cheap.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class GpdFit(NamedTuple):
    """Generalized Pareto fit; ``shape`` is the usual tail index k-hat."""
    sigma: float
    shape: float


class SmoothedWeights(NamedTuple):
    weights: np.ndarray
    pareto_k: float
    tail_size: int


def tail_size(S: int) -> int:
    return min(math.ceil(0.2 * S), math.ceil(3.0 * math.sqrt(S)))


def fit_gpd_pwm(excess) -> GpdFit:
    """Probability-weighted-moment estimate for exceedances ``excess >= 0``.

    With ``a0 = E[X]`` and ``a1 = E[X (1 - F(X))]`` the estimates are
    ``k = 2 - a0 / (a0 - 2 a1)`` and ``sigma = 2 a0 a1 / (a0 - 2 a1)``.
    """
    x = np.sort(np.asarray(excess, dtype=float))
    n = x.size
    if n < 2:
        raise ValueError("need at least two exceedances")
    a0 = x.mean()
    a1 = np.sum(x * (n - 1 - np.arange(n)) / (n - 1)) / n
    denom = a0 - 2.0 * a1
    if not (denom > 0 and a1 > 0):
        raise ValueError("degenerate exceedances")
    return GpdFit(2.0 * a0 * a1 / denom, 2.0 - a0 / denom)


def gpd_quantile(p, fit: GpdFit):
    p = np.asarray(p, dtype=float)
    k = fit.shape
    if abs(k) < 1e-12:
        return -fit.sigma * np.log1p(-p)
    return fit.sigma * np.expm1(-k * np.log1p(-p)) / k


def smooth_weights(log_ratios) -> SmoothedWeights:
    """Normalized Pareto-smoothed weights from unnormalized log ratios.

    ``-inf`` entries (zero target mass) get weight 0.  When the tail is
    exactly flat nothing is smoothed and ``pareto_k`` is ``-inf``.
    """
    lr = np.asarray(log_ratios, dtype=float)
    S = lr.size
    if np.any(np.isnan(lr)) or np.any(lr == np.inf):
        raise ValueError("log ratios must be finite or -inf")
    top = lr.max()
    if top == -np.inf:
        raise ValueError("all log ratios are -inf")
    w = np.exp(lr - top)
    M = tail_size(S)
    if S <= M + 1:
        return SmoothedWeights(w / w.sum(), float("nan"), 0)
    order = np.argsort(w, kind="stable")
    tail = order[-M:]
    cut = w[order[-M - 1]]
    excess = w[tail] - cut
    k = float("-inf")
    if excess.max() > 0:
        try:
            fit = fit_gpd_pwm(excess)
        except ValueError:
            fit = None
            k = float("inf")
        if fit is not None:
            k = fit.shape
            q = cut + gpd_quantile((np.arange(1, M + 1) - 0.5) / M, fit)
            # never exceed the largest raw weight
            w = w.copy()
            w[tail] = np.minimum(q, w[tail[-1]])
    return SmoothedWeights(w / w.sum(), k, M)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))
