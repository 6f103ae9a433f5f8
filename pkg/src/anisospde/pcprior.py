"""Penalized-complexity priors for (kappa, v) and the comparison priors.

Distances are measured from the base model kappa -> 0, v -> 0 by the order-2
Sobolev pseudometric, which factorizes as ``d(kappa, v) = f(|v|) kappa``.
Priors expose ``log_density(log_kappa, v1, v2)`` on the inference scale
(log kappa, v), Jacobian included.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import betaln, ellipe, log_ndtr

from .errors import DegenerateTargets, MaxIterations, OutOfRange

F0 = math.sqrt(4 * math.pi / 3)
SQRT8 = math.sqrt(8.0)
#: alternative constant of the isotropic distance used with the linear model
ISO_CONSTANT_ALT = 1 / math.sqrt(12 * math.pi)


def f_of_r(r):
    r = np.asarray(r, dtype=float)
    out = np.sqrt(math.pi / 3 * (3 * np.cosh(2 * r) + 1))
    return out if out.ndim else float(out)


def f_prime(r):
    r = np.asarray(r, dtype=float)
    out = math.sqrt(math.pi) * np.sinh(2 * r) / np.sqrt(np.cosh(2 * r) + 1 / 3)
    return out if out.ndim else float(out)


def _log_ffprime_over_2pi_r(r):
    # f f' = pi sinh(2r) exactly, so f f' / (2 pi r) = sinh(2r) / (2r)
    x = 2 * np.asarray(r, dtype=float)
    small = x < 1e-4
    safe = np.where(small, 1.0, x)
    return np.where(small, x * x / 6, np.log(np.sinh(safe) / safe))


def f_inverse(x):
    """Inverse of :func:`f_of_r`: ``r = arccosh(x^2/pi - 1/3) / 2``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < F0 - 1e-12):
        raise OutOfRange(f"f_inverse needs x >= f(0) = {F0:.6f}")
    # arccosh(1 + d) written via log1p: exact at x = f(0)
    d = np.maximum((x - F0) * (x + F0) / math.pi, 0.0)
    out = 0.5 * np.log1p(d + np.sqrt(d * (d + 2.0)))
    return out if out.ndim else float(out)


def distance(kappa, v) -> float:
    """Pseudometric distance to the base model, ``f(|v|) kappa``."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    return f_of_r(math.hypot(v[0], v[1])) * kappa


def _halley_log(logx: float, w: float, tol: float, max_iter: int) -> float:
    # solve w + log w = log x, valid for x > e
    for _ in range(max_iter):
        g = w + math.log(w) - logx
        g1 = 1 + 1 / w
        g2 = -1 / (w * w)
        step = 2 * g * g1 / (2 * g1 * g1 - g * g2)
        w -= step
        if abs(step) <= tol * max(1.0, abs(w)):
            return w
    raise MaxIterations(f"Lambert W did not converge for log x={logx}")


def lambert_w0(x: float, tol: float = 1e-12, max_iter: int = 100) -> float:
    """Principal branch of Lambert W by Halley iteration from ``log(1 + x)``.

    For ``x > e`` the iteration runs on ``w + log w = log x`` to avoid
    overflow of ``w e^w``.
    """
    x = float(x)
    if x < 0:
        raise ValueError("lambert_w0 is implemented for x >= 0")
    if x == 0.0:
        return 0.0
    w = math.log1p(x)
    if x > math.e:
        return _halley_log(math.log(x), w, tol, max_iter)
    for _ in range(max_iter):
        ew = math.exp(w)
        g = w * ew - x
        g1 = ew * (w + 1)
        step = 2 * g * g1 / (2 * g1 * g1 - g * ew * (w + 2))
        w -= step
        if abs(step) <= tol * max(1.0, abs(w)):
            return w
    raise MaxIterations(f"Lambert W did not converge for x={x}")


def lambert_w0_of_log(logx: float, tol: float = 1e-12, max_iter: int = 100) -> float:
    """W0(exp(logx)) without forming exp(logx)."""
    if logx <= 1.0:
        return lambert_w0(math.exp(logx), tol, max_iter)
    return _halley_log(logx, logx, tol, max_iter)


@dataclass(frozen=True)
class PcHyper:
    lambda_theta: float
    lambda_v: float

    def __post_init__(self):
        if not (self.lambda_theta > 0 and self.lambda_v > 0):
            raise ValueError("PC hyperparameters must be positive")


@dataclass(frozen=True)
class QuantileTargets:
    """P[a > a0] = beta and P[rho < rho0] = alpha."""
    a0: float = 10.0
    beta: float = 0.01
    rho0: float = 1.0
    alpha: float = 0.01

    def __post_init__(self):
        for p in (self.beta, self.alpha):
            if not 0 < p < 1:
                raise ValueError("target probabilities must lie in (0, 1)")
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")


def calibrate(targets: QuantileTargets) -> PcHyper:
    if not targets.a0 > 1:
        raise DegenerateTargets("a0 must exceed 1")
    lam_v = -math.log(targets.beta) / (f_of_r(math.log(targets.a0)) - F0)
    if not math.isfinite(lam_v):
        raise DegenerateTargets("a0 too close to 1")
    log_z = lam_v * F0 + math.log(lam_v * F0 / targets.alpha)
    lam_t = targets.rho0 / SQRT8 * (lambert_w0_of_log(log_z) / F0 - lam_v)
    return PcHyper(lam_t, lam_v)


def cdf_r(r0: float, hyper: PcHyper) -> float:
    """P[|v| <= r0]; the rate is lambda_v (see f-marginal of the prior)."""
    if r0 <= 0:
        return 0.0
    return -math.expm1(-hyper.lambda_v * (f_of_r(r0) - F0))


def cdf_kappa(kappa0: float, hyper: PcHyper) -> float:
    if kappa0 <= 0:
        return 0.0
    lt, lv = hyper.lambda_theta, hyper.lambda_v
    return 1.0 - lv * math.exp(-F0 * lt * kappa0) / (lt * kappa0 + lv)


def pdf_kappa(kappa, hyper: PcHyper):
    """Marginal PC density of kappa, the derivative of ``cdf_kappa``."""
    k = np.asarray(kappa, dtype=float)
    lt, lv = hyper.lambda_theta, hyper.lambda_v
    kp = np.where(k > 0, k, 0.0)
    d = lt * kp + lv
    out = lv * lt * np.exp(-F0 * lt * kp) * (F0 * d + 1.0) / (d * d)
    out = np.where(k > 0, out, 0.0)
    return out if out.ndim else float(out)


def pdf_r(r, hyper: PcHyper):
    """Marginal PC density of ``|v|``: ``lambda_v f'(r) exp(-lambda_v (f(r) - f(0)))``."""
    r = np.asarray(r, dtype=float)
    rp = np.where(r > 0, r, 0.0)
    out = hyper.lambda_v * f_prime(rp) * np.exp(-hyper.lambda_v * (f_of_r(rp) - F0))
    out = np.where(r > 0, out, 0.0)
    return out if out.ndim else float(out)


def log_density_pc(kappa, v, hyper: PcHyper):
    """Joint PC log density in (kappa, v1, v2) coordinates."""
    kappa = np.asarray(kappa, dtype=float)
    v = np.asarray(v, dtype=float)
    r = np.hypot(v[..., 0], v[..., 1])
    f = f_of_r(r)
    lt, lv = hyper.lambda_theta, hyper.lambda_v
    out = (math.log(lt * lv) + _log_ffprime_over_2pi_r(r)
           - lv * (f - F0) - lt * f * np.where(kappa > 0, kappa, 1.0))
    out = np.where(kappa > 0, out, -np.inf)
    return out if out.ndim else float(out)


def sample_pc(hyper: PcHyper, seed, count: int):
    """Exact draws: returns ``(kappa, v)`` with shapes (count,) and (count, 2)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((count, 3))
    A = np.hypot(Y[:, 0], Y[:, 1])
    B = F0 + 0.5 * A * A / hyper.lambda_v
    scale = f_inverse(B) / A
    v = Y[:, :2] * scale[:, None]
    kappa = -log_ndtr(-Y[:, 2]) / (hyper.lambda_theta * B)
    return kappa, v


def calibrate_eg(targets: QuantileTargets) -> tuple[float, float]:
    """Exponential rate for kappa and Gaussian scale for v matching the targets.

    P[kappa > sqrt(8)/rho0] = alpha gives the rate; |v| is Rayleigh, whose
    tail exp(-r0^2 / (2 s^2)) = beta gives the scale.
    """
    if not targets.a0 > 1:
        raise DegenerateTargets("a0 must exceed 1")
    lam = -targets.rho0 * math.log(targets.alpha) / SQRT8
    sigma_v = math.log(targets.a0) / math.sqrt(-2 * math.log(targets.beta))
    return lam, sigma_v


def log_density_eg(kappa, v, lambda_kappa: float, sigma_v: float):
    kappa = np.asarray(kappa, dtype=float)
    v = np.asarray(v, dtype=float)
    q = (v[..., 0] ** 2 + v[..., 1] ** 2) / sigma_v**2
    out = (math.log(lambda_kappa) - lambda_kappa * np.where(kappa > 0, kappa, 1.0)
           - math.log(2 * math.pi * sigma_v**2) - 0.5 * q)
    out = np.where(kappa > 0, out, -np.inf)
    return out if out.ndim else float(out)


def log_density_uniform(log_kappa, v):
    """Improper flat density on (log kappa, v): identically 0."""
    return 0.0 * np.asarray(log_kappa, dtype=float)


def _log_beta_scaled(x, lo, hi, shape):
    t = (np.asarray(x, dtype=float) - lo) / (hi - lo)
    inside = (t > 0) & (t < 1)
    ts = np.where(inside, t, 0.5)
    val = (shape - 1) * (np.log(ts) + np.log1p(-ts)) - betaln(shape, shape) - math.log(hi - lo)
    return np.where(inside, val, -np.inf)


def iso_pc_rate(rho0: float = 1.0, alpha: float = 0.01, constant: float = F0) -> float:
    """Rate on the isotropic distance ``constant * kappa`` with P[rho < rho0] = alpha."""
    return -math.log(alpha) * rho0 / (SQRT8 * constant)


def alt_distance(kappa: float, v) -> float:
    """Alternative half-order distance ``2 pi E(1 - e^{2|v|}) e^{-|v|/2} kappa``."""
    r = math.hypot(v[0], v[1])
    return 2 * math.pi * float(ellipe(1 - math.exp(2 * r))) * math.exp(-r / 2) * kappa


def wasserstein_iso(kappa_a: float, kappa_b: float) -> float:
    """Limiting Wasserstein distance between isotropic unit-variance models.

    With t = log(kappa_a/kappa_b) the closed form equals 2(1 - t/sinh t).
    """
    t = math.log(kappa_a / kappa_b)
    if abs(t) < 1e-4:
        return 2 * (t * t / 6 - 7 * t**4 / 360)
    return 2 * (1 - t / math.sinh(t))


# ---------------------------------------------------------------- prior specs


class _Prior:
    type = "abstract"
    isotropic = False

    def log_density(self, log_kappa, v1=0.0, v2=0.0):
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"type": self.type, **asdict(self)}


@dataclass(frozen=True)
class PCPrior(_Prior):
    lambda_theta: float
    lambda_v: float
    type = "pc"

    @property
    def hyper(self) -> PcHyper:
        return PcHyper(self.lambda_theta, self.lambda_v)

    @classmethod
    def from_targets(cls, targets: QuantileTargets) -> "PCPrior":
        h = calibrate(targets)
        return cls(h.lambda_theta, h.lambda_v)

    def log_density(self, log_kappa, v1=0.0, v2=0.0):
        v = np.stack(np.broadcast_arrays(np.asarray(v1, float), np.asarray(v2, float)), axis=-1)
        return log_density_pc(np.exp(log_kappa), v, self.hyper) + np.asarray(log_kappa)

    def sample(self, seed, count):
        kappa, v = sample_pc(self.hyper, seed, count)
        return np.log(kappa), v


@dataclass(frozen=True)
class ExpGaussPrior(_Prior):
    lambda_kappa: float
    sigma_v: float
    type = "eg"

    @classmethod
    def from_targets(cls, targets: QuantileTargets) -> "ExpGaussPrior":
        return cls(*calibrate_eg(targets))

    def log_density(self, log_kappa, v1=0.0, v2=0.0):
        v = np.stack(np.broadcast_arrays(np.asarray(v1, float), np.asarray(v2, float)), axis=-1)
        return log_density_eg(np.exp(log_kappa), v, self.lambda_kappa, self.sigma_v) + np.asarray(log_kappa)

    def sample(self, seed, count):
        rng = np.random.default_rng(seed)
        kappa = rng.exponential(1 / self.lambda_kappa, count)
        return np.log(kappa), rng.normal(scale=self.sigma_v, size=(count, 2))


@dataclass(frozen=True)
class UniformPrior(_Prior):
    type = "uniform"

    def log_density(self, log_kappa, v1=0.0, v2=0.0):
        return log_density_uniform(log_kappa, (v1, v2))

    def sample(self, seed, count):
        raise ValueError("the improper uniform prior cannot be sampled")


@dataclass(frozen=True)
class BetaBoxPrior(_Prior):
    """Beta(shape, shape) on log kappa and on each v_i, linearly rescaled.

    The range sqrt(8)/kappa lives in [rho0/w, w L]; v_i in [-w a0, w a0].
    """
    rho0: float = 1.0
    a0: float = 10.0
    width_w: float = 20.0
    domain_length: float = 10.0
    shape: float = 1.1
    type = "beta"

    def bounds(self, width=None):
        w = self.width_w if width is None else width
        lk = (math.log(SQRT8 / (w * self.domain_length)), math.log(SQRT8 * w / self.rho0))
        return lk, (-w * self.a0, w * self.a0)

    def log_density(self, log_kappa, v1=0.0, v2=0.0):
        (klo, khi), (vlo, vhi) = self.bounds()
        out = (_log_beta_scaled(log_kappa, klo, khi, self.shape)
               + _log_beta_scaled(v1, vlo, vhi, self.shape)
               + _log_beta_scaled(v2, vlo, vhi, self.shape))
        return out if np.ndim(out) else float(out)

    def sample(self, seed, count, width=None):
        """Draws with an optionally narrower box (``width`` replaces w)."""
        rng = np.random.default_rng(seed)
        (klo, khi), (vlo, vhi) = self.bounds(width)
        t = rng.beta(self.shape, self.shape, size=(count, 3))
        return klo + (khi - klo) * t[:, 0], vlo + (vhi - vlo) * t[:, 1:]


@dataclass(frozen=True)
class IsoPCPrior(_Prior):
    """Exponential prior on the isotropic distance ``constant * kappa``."""
    lambda_iso: float
    constant: float = F0
    type = "iso_pc"
    isotropic = True

    @classmethod
    def from_targets(cls, targets: QuantileTargets, constant: float = F0) -> "IsoPCPrior":
        return cls(iso_pc_rate(targets.rho0, targets.alpha, constant), constant)

    def log_density(self, log_kappa, v1=0.0, v2=0.0):
        rate = self.lambda_iso * self.constant
        return math.log(rate) - rate * np.exp(log_kappa) + np.asarray(log_kappa)

    def sample(self, seed, count):
        rng = np.random.default_rng(seed)
        kappa = rng.exponential(1 / (self.lambda_iso * self.constant), count)
        return np.log(kappa), np.zeros((count, 2))


PRIOR_TYPES = {c.type: c for c in (PCPrior, ExpGaussPrior, UniformPrior, BetaBoxPrior, IsoPCPrior)}


def prior_from_dict(d: dict):
    d = dict(d)
    try:
        cls = PRIOR_TYPES[d.pop("type")]
    except KeyError as exc:
        raise ValueError(f"unknown prior type {exc}") from None
    return cls(**d)


def default_priors(targets: QuantileTargets | None = None, domain_length: float = 10.0) -> dict:
    """The four comparison priors keyed by name."""
    t = targets or QuantileTargets()
    return {
        "pc": PCPrior.from_targets(t),
        "eg": ExpGaussPrior.from_targets(t),
        "uniform": UniformPrior(),
        "beta": BetaBoxPrior(t.rho0, t.a0, 20.0, domain_length),
    }
