"""Identifiable half-angle parameterization of 2-D anisotropy matrices.

A vector ``v`` in the plane maps to the symmetric, positive definite,
determinant-one matrix

    H_v = cosh(|v|) I + sinh(|v|)/|v| [[v1, v2], [v2, -v1]]

whose leading eigenvector points along the half-angle vector of ``v`` with
eigenvalue ``exp(|v|)``.  The map is a bijection onto SPD matrices with unit
determinant, so it can be inverted (:func:`v_from_h`).
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import NotPositiveDefinite, NotUnitDeterminant

_SMALL_R = 1e-8
DET_TOL = 1e-9


class AnisoVector(NamedTuple):
    v1: float
    v2: float

    @property
    def norm(self) -> float:
        return math.hypot(self.v1, self.v2)

    @property
    def angle(self) -> float:
        """Argument of ``v`` in ``[0, 2*pi)``."""
        return math.atan2(self.v2, self.v1) % (2 * math.pi)


class AnisoMatrix(NamedTuple):
    h11: float
    h12: float
    h22: float

    @classmethod
    def from_array(cls, H) -> "AnisoMatrix":
        H = np.asarray(H, dtype=float)
        if H.shape != (2, 2):
            raise ValueError("expected a 2x2 matrix")
        if not np.isclose(H[0, 1], H[1, 0], rtol=1e-12, atol=1e-14):
            raise ValueError("matrix is not symmetric")
        return cls(float(H[0, 0]), float(H[0, 1]), float(H[1, 1]))

    def array(self) -> np.ndarray:
        return np.array([[self.h11, self.h12], [self.h12, self.h22]])

    @property
    def det(self) -> float:
        return self.h11 * self.h22 - self.h12 * self.h12

    def eigenvalues(self) -> tuple[float, float]:
        """(largest, smallest) eigenvalue.

        The largest is computed without cancellation; the smallest uses the
        unit-determinant invariant, which is far better conditioned than
        subtracting two numbers of size cosh(|v|).
        """
        mean = 0.5 * (self.h11 + self.h22)
        lam = mean + np.hypot(0.5 * (self.h11 - self.h22), self.h12)
        return lam, 1.0 / lam


class StationaryParams(NamedTuple):
    kappa: float
    v: AnisoVector
    sigma_u: float = 1.0

    @classmethod
    def make(cls, kappa: float, v=(0.0, 0.0), sigma_u: float = 1.0) -> "StationaryParams":
        if not (np.isfinite(kappa) and kappa > 0):
            raise ValueError(f"kappa must be positive and finite, got {kappa}")
        if not (np.isfinite(sigma_u) and sigma_u > 0):
            raise ValueError(f"sigma_u must be positive and finite, got {sigma_u}")
        return cls(float(kappa), AnisoVector(float(v[0]), float(v[1])), float(sigma_u))

    @property
    def anisotropy_ratio(self) -> float:
        return math.exp(self.v.norm)

    @property
    def range(self) -> float:
        return math.sqrt(8.0) / self.kappa

    @property
    def H(self) -> AnisoMatrix:
        return h_matrix(self.v)


def _sinhc(r):
    """sinh(r)/r, continuous through r = 0."""
    r = np.asarray(r, dtype=float)
    small = r < _SMALL_R
    safe = np.where(small, 1.0, r)
    return np.where(small, 1.0 + r * r / 6.0, np.sinh(safe) / safe)


def h_entries(v1, v2):
    """Vectorised H_v: returns the arrays ``(h11, h12, h22)``.

    Diagonal entries are formed as ``e^r cos^2 + e^-r sin^2`` of the half
    angle (sums of positive terms) so that ``cosh - sinh`` never cancels.
    """
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    r = np.hypot(v1, v2)
    small = r < _SMALL_R
    rs = np.where(small, 1.0, r)
    # squared cos/sin of the half angle without cancellation
    pos = v1 >= 0
    big = np.where(pos, rs + v1, rs - v1)
    other = v2 * v2 / (2 * rs * np.where(big > 0, big, 1.0))
    main = big / (2 * rs)
    c2 = np.where(pos, main, other)
    s2 = np.where(pos, other, main)
    ep, em = np.exp(rs), np.exp(-rs)
    h11 = ep * c2 + em * s2
    h22 = ep * s2 + em * c2
    h12 = np.sinh(rs) / rs * v2
    # Taylor branch near the origin
    c = 1.0 + r * r / 2.0
    s = _sinhc(r)
    h11 = np.where(small, c + s * v1, h11)
    h22 = np.where(small, c - s * v1, h22)
    h12 = np.where(small, s * v2, h12)
    return h11, h12, h22


def v_from_entries(h11, h12, h22):
    """Vectorised inverse of :func:`h_entries` (no validation).

    The principal axis angle is ``atan2(2 h12, h11 - h22) / 2``; doubling it
    gives ``arg(v)``.  ``|v|`` is the log of the top eigenvalue, obtained via
    ``asinh`` of the deviatoric part to stay accurate near the identity.
    """
    h11 = np.asarray(h11, dtype=float)
    h12 = np.asarray(h12, dtype=float)
    h22 = np.asarray(h22, dtype=float)
    a = 0.5 * (h11 - h22)
    dev = np.hypot(a, h12)
    r = np.arcsinh(dev)
    doubled = np.arctan2(h12, a)
    out_r = np.where(dev > 0, r, 0.0)
    return out_r * np.cos(doubled), out_r * np.sin(doubled)


def half_angle(v) -> AnisoVector:
    v = AnisoVector(*map(float, v))
    r = v.norm
    if r == 0.0:
        return AnisoVector(0.0, 0.0)
    half = 0.5 * v.angle
    return AnisoVector(r * math.cos(half), r * math.sin(half))


def h_matrix(v) -> AnisoMatrix:
    h11, h12, h22 = h_entries(v[0], v[1])
    return AnisoMatrix(float(h11), float(h12), float(h22))


def v_from_h(H) -> AnisoVector:
    """Recover ``v`` from an SPD unit-determinant matrix.

    Raises NotUnitDeterminant when ``|det - 1| > 1e-9`` and
    NotPositiveDefinite for indefinite or negative definite input.
    """
    if not isinstance(H, AnisoMatrix):
        H = AnisoMatrix.from_array(H)
    if not (H.h11 > 0 and H.h22 > 0):
        raise NotPositiveDefinite(f"{H} is not positive definite")
    det = H.det
    if det <= 0:
        raise NotPositiveDefinite(f"{H} is not positive definite (det={det})")
    # relative to the size of the cancelling products, see h_entries precision
    if abs(det - 1.0) > DET_TOL * max(1.0, H.h11 * H.h22):
        raise NotUnitDeterminant(f"det={det!r} differs from 1")
    v1, v2 = v_from_entries(H.h11, H.h12, H.h22)
    return AnisoVector(float(v1), float(v2))


class LegacyParams(NamedTuple):
    gamma: float
    beta: float
    unit_vector: AnisoVector | None

    @property
    def degenerate(self) -> bool:
        return self.unit_vector is None


def legacy_params(v) -> LegacyParams:
    """Express H_v as ``gamma I + beta w w^T`` with a unit vector ``w``.

    At ``v = 0`` the direction is not identifiable; ``unit_vector`` is None
    and ``degenerate`` is True.
    """
    v = AnisoVector(*map(float, v))
    r = v.norm
    gamma = math.exp(-r)
    beta = (1.0 - gamma * gamma) / gamma
    if r == 0.0:
        return LegacyParams(1.0, 0.0, None)
    ht = half_angle(v)
    return LegacyParams(gamma, beta, AnisoVector(ht.v1 / r, ht.v2 / r))
