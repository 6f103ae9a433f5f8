"""Spectral density, FFT covariance and spectral simulation of stationary fields."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import k1

from .anisotropy import StationaryParams, h_matrix
from .errors import GridTooCoarse

#: fraction of spectral mass the Nyquist box must capture
MASS_COVERAGE = 0.999
#: minimum box side in units of the (major-axis) correlation range
BOX_RANGES = 4.0


@dataclass(frozen=True)
class FreqGrid:
    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        for n in (self.nx, self.ny):
            if n < 8 or n & (n - 1):
                raise ValueError(f"grid counts must be powers of two >= 8, got {n}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("box sides must be positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def cell_area_freq(self) -> float:
        return 1.0 / (self.lx * self.ly)

    def frequencies(self):
        fx = np.fft.fftfreq(self.nx, d=self.dx)
        fy = np.fft.fftfreq(self.ny, d=self.dy)
        return np.meshgrid(fx, fy, indexing="ij")


@dataclass(frozen=True)
class GridField:
    values: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.x.size, self.y.size):
            raise ValueError("values shape does not match coordinates")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def at(self, x: float, y: float) -> float:
        i = int(np.argmin(np.abs(self.x - x)))
        j = int(np.argmin(np.abs(self.y - y)))
        return float(self.values[i, j])

    def to_csv(self, path) -> None:
        X, Y = np.meshgrid(self.x, self.y, indexing="ij")
        table = np.column_stack([X.ravel(), Y.ravel(), self.values.ravel()])
        np.savetxt(path, table, fmt="%.9g", delimiter=",", header="x,y,value", comments="")


def spectral_density(xi, params: StationaryParams):
    """S(xi) = 4 pi kappa^2 sigma^2 / (kappa^2 + 4 pi^2 xi^T H xi)^2, vectorised over xi[..., 2]."""
    xi = np.asarray(xi, dtype=float)
    H = h_matrix(params.v)
    q = H.h11 * xi[..., 0] ** 2 + 2 * H.h12 * xi[..., 0] * xi[..., 1] + H.h22 * xi[..., 1] ** 2
    k2 = params.kappa**2
    return 4 * math.pi * k2 * params.sigma_u**2 / (k2 + 4 * math.pi**2 * q) ** 2


def spectral_mass_within(radius: float, params: StationaryParams) -> float:
    """Integral of S over the ellipse xi^T H xi <= radius^2 (closed-form radial integral)."""
    a = 4 * math.pi**2 * radius**2
    return params.sigma_u**2 * a / (params.kappa**2 + a)


def matern_correlation(distance, kappa):
    """Matern correlation with smoothness 1: ``kappa h K1(kappa h)``."""
    x = kappa * np.asarray(distance, dtype=float)
    if np.any(x < 0):
        raise ValueError("distance must be non-negative")
    safe = np.where(x > 0, x, 1.0)
    out = np.where(x > 0, safe * k1(safe), 1.0)
    return out if out.ndim else float(out)


def stationary_correlation(lags, params: StationaryParams):
    """Exact correlation at lag vectors ``lags[..., 2]``: Matern in the H^-1 metric."""
    lags = np.asarray(lags, dtype=float)
    H = h_matrix(params.v)
    # H^-1 = [[h22, -h12], [-h12, h11]] because det H = 1
    q = H.h22 * lags[..., 0] ** 2 - 2 * H.h12 * lags[..., 0] * lags[..., 1] + H.h11 * lags[..., 1] ** 2
    return matern_correlation(np.sqrt(np.maximum(q, 0.0)), params.kappa)


def check_grid(params: StationaryParams, grid: FreqGrid) -> float:
    """Validate resolution and box size; returns the captured spectral mass fraction.

    The Nyquist box contains the ellipse xi^T H xi <= R^2 with
    ``R = min(f_x / sqrt(H^-1_11), f_y / sqrt(H^-1_22))``, so the mass inside
    that ellipse is a lower bound on what the grid resolves.
    """
    H = h_matrix(params.v)
    fx, fy = grid.nx / (2 * grid.lx), grid.ny / (2 * grid.ly)
    R = min(fx / math.sqrt(H.h22), fy / math.sqrt(H.h11))
    frac = spectral_mass_within(R, params) / params.sigma_u**2
    if frac < MASS_COVERAGE:
        raise GridTooCoarse(f"Nyquist box captures {frac:.5f} of the spectral mass (< {MASS_COVERAGE})")
    need = BOX_RANGES * params.range * math.exp(0.5 * params.v.norm)
    if min(grid.lx, grid.ly) < need:
        raise GridTooCoarse(f"box side {min(grid.lx, grid.ly):.4g} below {need:.4g} (4 major-axis ranges)")
    return frac


def _density_on_grid(params: StationaryParams, grid: FreqGrid) -> np.ndarray:
    FX, FY = grid.frequencies()
    return spectral_density(np.stack([FX, FY], axis=-1), params)


def covariance_grid(params: StationaryParams, grid: FreqGrid) -> GridField:
    """Covariance at lags on the grid, centred so that lag 0 is at index (nx/2, ny/2)."""
    check_grid(params, grid)
    S = _density_on_grid(params, grid) * grid.cell_area_freq
    cov = np.fft.ifft2(S).real * (grid.nx * grid.ny)
    cov = np.fft.fftshift(cov)
    x = (np.arange(grid.nx) - grid.nx // 2) * grid.dx
    y = (np.arange(grid.ny) - grid.ny // 2) * grid.dy
    return GridField(cov, x, y)


def spectral_sample(params: StationaryParams, grid: FreqGrid, seed) -> GridField:
    """One realisation on the periodic grid.

    The FFT of real white noise supplies Hermitian complex Gaussians with
    unit variance per frequency; scaling by sqrt(S dxi) gives the spectral
    increments.
    """
    check_grid(params, grid)
    rng = np.random.default_rng(seed)
    n = grid.nx * grid.ny
    amp = np.sqrt(_density_on_grid(params, grid) * grid.cell_area_freq)
    w = rng.standard_normal((grid.nx, grid.ny))
    u = np.fft.ifft2(amp * np.fft.fft2(w)).real * math.sqrt(n)
    return GridField(u, np.arange(grid.nx) * grid.dx, np.arange(grid.ny) * grid.dy)
