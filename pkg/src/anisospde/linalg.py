"""Sparse symmetric positive definite factorization.

Precision matrices from P1 meshes have small bandwidth once reordered with
reverse Cuthill-McKee, so a banded LAPACK Cholesky handles them in
``O(n b^2)``.  A few trailing dense rows/columns (fixed effects coupled to
every observation) are eliminated through a Schur complement so they do
not destroy the band.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import lapack
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import CholeskyFailure


class BandOrdering:
    """Fill-reducing permutation and bandwidth for one sparsity pattern.

    The ordering only depends on the pattern, so it can be shared by all
    factorizations of matrices with the same (or a smaller) pattern.
    """

    def __init__(self, pattern, n_dense: int = 0):
        pattern = sp.csr_matrix(pattern)
        n = pattern.shape[0]
        if pattern.shape != (n, n):
            raise ValueError("pattern must be square")
        self.n = n
        self.n_dense = int(n_dense)
        self.n_sparse = n - self.n_dense
        core = pattern[: self.n_sparse, : self.n_sparse].tocsr(copy=True)
        # structural pattern: stored zeros count, nothing can cancel
        core.data = np.ones_like(core.data)
        core = (core + core.T).tocsr()
        self.perm = np.asarray(reverse_cuthill_mckee(core, symmetric_mode=True), dtype=np.intp)
        self.iperm = np.empty_like(self.perm)
        self.iperm[self.perm] = np.arange(self.n_sparse)
        coo = core.tocoo()
        diff = self.iperm[coo.col] - self.iperm[coo.row]
        self.bandwidth = int(diff.max()) if diff.size else 0
        self._plans = {}

    def _plan(self, Q: sp.csr_matrix) -> "_PackPlan":
        # scatter indices from CSR data into band and dense storage, cached per pattern
        key = (Q.indptr.tobytes(), Q.indices.tobytes())
        plan = self._plans.get(key)
        if plan is None:
            if len(self._plans) > 16:
                self._plans.clear()
            plan = self._plans[key] = _PackPlan.build(self, Q)
        return plan

    def factor(self, Q) -> "BandedCholesky":
        return BandedCholesky(Q, self)


class _PackPlan(NamedTuple):
    band_src: np.ndarray
    band_dst: np.ndarray
    outside: np.ndarray
    b_src: np.ndarray
    b_dst: np.ndarray
    d_src: np.ndarray
    d_dst: np.ndarray

    @classmethod
    def build(cls, o: BandOrdering, Q: sp.csr_matrix) -> "_PackPlan":
        ns, nd, u = o.n_sparse, o.n_dense, o.bandwidth
        if Q.shape != (o.n, o.n):
            raise ValueError("matrix size does not match the ordering")
        rows = np.repeat(np.arange(Q.shape[0]), np.diff(Q.indptr))
        cols = Q.indices
        k = np.arange(cols.size)
        sparse = (rows < ns) & (cols < ns)
        r, c = rows[sparse], cols[sparse]
        pi, pj = o.iperm[r], o.iperm[c]
        upper = pi <= pj
        inside = upper & (pj - pi <= u)
        band_src = k[sparse][inside]
        band_dst = (u + pi[inside] - pj[inside]) * ns + pj[inside]
        outside = k[sparse][upper & ~inside]
        bm = (rows < ns) & (cols >= ns)
        dm = (rows >= ns) & (cols >= ns)
        return cls(band_src, band_dst, outside, k[bm], rows[bm] * nd + (cols[bm] - ns),
                   k[dm], (rows[dm] - ns) * nd + (cols[dm] - ns))


class BandedCholesky:
    """Cholesky factor of an SPD matrix with an optional dense trailing block.

    Provides ``logdet``, ``solve`` and ``sample`` (draws from N(0, Q^-1)).
    Raises CholeskyFailure when Q is not numerically positive definite.
    """

    def __init__(self, Q, ordering: BandOrdering | None = None, n_dense: int = 0):
        Q = sp.csr_matrix(Q)
        if ordering is None:
            ordering = BandOrdering(Q, n_dense)
        self.ordering = ordering
        o = ordering
        ns, u = o.n_sparse, o.bandwidth
        if not Q.has_canonical_format:
            Q = Q.copy()
            Q.sum_duplicates()
        plan = o._plan(Q)
        data = Q.data
        if np.any(data[plan.outside] != 0):
            raise ValueError("matrix pattern exceeds the ordering bandwidth")
        ab = np.zeros((u + 1) * ns)
        ab[plan.band_dst] = data[plan.band_src]
        ab = ab.reshape(u + 1, ns)
        try:
            self._cb = sla.cholesky_banded(ab, lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise CholeskyFailure(f"sparse block not positive definite: {exc}") from None
        if not np.all(np.isfinite(self._cb[u])):
            raise CholeskyFailure("non-finite Cholesky factor")
        self._logdet = 2.0 * float(np.sum(np.log(self._cb[u])))
        self._schur = None
        if o.n_dense:
            nd = o.n_dense
            B = np.zeros(ns * nd)
            B[plan.b_dst] = data[plan.b_src]
            B = B.reshape(ns, nd)
            D = np.zeros(nd * nd)
            D[plan.d_dst] = data[plan.d_src]
            D = D.reshape(nd, nd)
            self._B = B
            AinvB = self._solve_sparse(B)
            S = D - B.T @ AinvB
            S = 0.5 * (S + S.T)
            try:
                self._schur = sla.cholesky(S, lower=True)
            except np.linalg.LinAlgError:
                raise CholeskyFailure("Schur complement not positive definite") from None
            self._AinvB = AinvB
            self._logdet += 2.0 * float(np.sum(np.log(np.diag(self._schur))))

    @property
    def n(self) -> int:
        return self.ordering.n

    @property
    def logdet(self) -> float:
        return self._logdet

    def _solve_sparse(self, b):
        p = self.ordering.perm
        x = sla.cho_solve_banded((self._cb, False), b[p], check_finite=False)
        out = np.empty_like(x)
        out[p] = x
        return out

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        ns = self.ordering.n_sparse
        if self._schur is None:
            return self._solve_sparse(b)
        b1, b2 = b[:ns], b[ns:]
        y = self._solve_sparse(b1)
        x2 = sla.cho_solve((self._schur, True), b2 - self._B.T @ y)
        x1 = y - self._AinvB @ x2
        return np.concatenate([x1, x2], axis=0)

    def _upper_solve(self, z):
        # U x = z with U the banded upper factor (A = U^T U)
        x, info = lapack.dtbtrs(self._cb, z, uplo="U", trans="N", diag="N")
        if info != 0:
            raise CholeskyFailure(f"triangular solve failed (info={info})")
        return x

    def sample(self, z) -> np.ndarray:
        """Map standard normals ``z`` (shape (n,) or (n, k)) to N(0, Q^-1) draws."""
        z = np.asarray(z, dtype=float)
        o = self.ordering
        ns = o.n_sparse
        # permuting z keeps Q = I mapping z to itself
        x1p = self._upper_solve(z[:ns][o.perm])
        x1 = np.empty_like(x1p)
        x1[o.perm] = x1p
        if self._schur is None:
            return x1
        # x2 ~ N(0, S^-1), then x1 | x2 ~ N(-A^-1 B x2, A^-1)
        x2 = sla.solve_triangular(self._schur, z[ns:], lower=True, trans="T")
        return np.concatenate([x1 - self._AinvB @ x2, x2], axis=0)


def cholesky(Q, n_dense: int = 0, ordering: BandOrdering | None = None) -> BandedCholesky:
    return BandedCholesky(Q, ordering=ordering, n_dense=n_dense)
