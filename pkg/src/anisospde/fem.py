"""P1 finite elements on triangulations and the SPDE precision matrix."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .anisotropy import AnisoMatrix, StationaryParams, h_matrix
from .errors import DegenerateTriangle, MeshTooLarge, PointOutsideMesh, SingularMass
from .linalg import BandOrdering, BandedCholesky

MAX_NODES = 50_000
_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


@dataclass(frozen=True)
class TriMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    core: np.ndarray = None

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        tris = np.asarray(self.triangles, dtype=np.intp)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "boundary", np.asarray(self.boundary, dtype=bool))
        core = np.ones(len(nodes), bool) if self.core is None else np.asarray(self.core, bool)
        object.__setattr__(self, "core", core)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise ValueError("nodes must be an (n, 2) array")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise ValueError("triangles must be a (t, 3) array")
        if tris.size and (tris.min() < 0 or tris.max() >= len(nodes)):
            raise ValueError("triangle index out of range")
        if len(np.unique(nodes, axis=0)) != len(nodes):
            raise ValueError("duplicate nodes")

    @property
    def n(self) -> int:
        return len(self.nodes)

    def areas(self) -> np.ndarray:
        """Signed areas (positive for counter-clockwise triangles)."""
        p = self.nodes[self.triangles]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def to_csv(self, nodes_path, triangles_path) -> None:
        idx = np.arange(self.n)
        np.savetxt(
            nodes_path,
            np.column_stack([idx, self.nodes, self.boundary.astype(int), self.core.astype(int)]),
            fmt=["%d", "%.9g", "%.9g", "%d", "%d"], delimiter=",",
            header="index,x,y,boundary,core", comments="",
        )
        np.savetxt(triangles_path, self.triangles, fmt="%d", delimiter=",", header="i,j,k", comments="")


def build_rect_mesh(x_range, y_range, target_edge: float, extension=0.0,
                    max_nodes: int = MAX_NODES) -> TriMesh:
    """Structured right-triangle mesh on the rectangle extended by ``extension``.

    ``extension`` is one length or an ``(ex, ey)`` pair for elongated fields.
    ``core`` marks nodes inside the original rectangle.
    """
    if not target_edge > 0:
        raise ValueError("target_edge must be positive")
    ex, ey = np.broadcast_to(np.asarray(extension, dtype=float), (2,))
    if ex < 0 or ey < 0:
        raise ValueError("extension must be non-negative")
    (x0, x1), (y0, y1) = x_range, y_range
    if not (x1 > x0 and y1 > y0):
        raise ValueError("empty rectangle")
    X0, X1, Y0, Y1 = x0 - ex, x1 + ex, y0 - ey, y1 + ey
    mx = max(1, math.ceil((X1 - X0) / target_edge - 1e-9))
    my = max(1, math.ceil((Y1 - Y0) / target_edge - 1e-9))
    n = (mx + 1) * (my + 1)
    if n > max_nodes:
        raise MeshTooLarge(f"{n} nodes exceeds cap {max_nodes}")
    xs, ys = np.linspace(X0, X1, mx + 1), np.linspace(Y0, Y1, my + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange(n).reshape(mx + 1, my + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
    tris = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    ii, jj = np.meshgrid(np.arange(mx + 1), np.arange(my + 1), indexing="ij")
    boundary = ((ii == 0) | (ii == mx) | (jj == 0) | (jj == my)).ravel()
    tol = 1e-9 * max(X1 - X0, Y1 - Y0)
    core = ((nodes[:, 0] >= x0 - tol) & (nodes[:, 0] <= x1 + tol)
            & (nodes[:, 1] >= y0 - tol) & (nodes[:, 1] <= y1 + tol))
    return TriMesh(nodes, tris, boundary, core)


@dataclass
class FemOperators:
    """Mass, lumped mass and stiffness for fixed (kappa, H).

    ``C`` and ``C_lumped`` are the plain mass matrices; ``c_kappa`` is the
    lumped diagonal of the kappa^2-weighted mass.
    """
    C: sp.csr_matrix
    C_lumped: sp.dia_matrix
    G: sp.csr_matrix
    c_kappa: np.ndarray
    kappa: np.ndarray | float
    H: object
    mesh: TriMesh = field(repr=False, default=None)


def _geometry(mesh: TriMesh):
    p = mesh.nodes[mesh.triangles]
    area = mesh.areas()
    if np.any(area < 1e-14):
        bad = int(np.argmin(area))
        raise DegenerateTriangle(f"triangle {bad} has area {area[bad]:.3g}")
    # gradient of barycentric coordinate i is rot90(opposite edge) / (2 area)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grad = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2 * area)[:, None, None]
    return area, grad


def _scatter(mesh: TriMesh, local: np.ndarray) -> sp.csr_matrix:
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n, mesh.n))


def _per_triangle(mesh: TriMesh, nodal):
    nodal = np.asarray(nodal, dtype=float)
    if nodal.ndim == 0:
        return np.full(len(mesh.triangles), float(nodal))
    if nodal.shape != (mesh.n,):
        raise ValueError("nodal parameter must be scalar or one value per node")
    return nodal[mesh.triangles].mean(axis=1)


def element_stiffness(mesh: TriMesh, h11, h12, h22) -> np.ndarray:
    area, grad = _geometry(mesh)
    h11, h12, h22 = (_per_triangle(mesh, h) for h in (h11, h12, h22))
    gx, gy = grad[..., 0], grad[..., 1]
    Hg_x = h11[:, None] * gx + h12[:, None] * gy
    Hg_y = h12[:, None] * gx + h22[:, None] * gy
    return area[:, None, None] * (gx[:, :, None] * Hg_x[:, None, :] + gy[:, :, None] * Hg_y[:, None, :])


def assemble(mesh: TriMesh, kappa, H) -> FemOperators:
    """Exact P1 mass and stiffness with per-triangle averaged kappa^2 and H.

    ``kappa`` is a scalar or one value per node; ``H`` an AnisoMatrix or a
    triple of per-node arrays ``(h11, h12, h22)``.
    """
    area, _ = _geometry(mesh)
    C = _scatter(mesh, area[:, None, None] * _MASS_REF)
    k2 = _per_triangle(mesh, np.asarray(kappa, dtype=float) ** 2)
    lumped = np.zeros(mesh.n)
    np.add.at(lumped, mesh.triangles.ravel(), np.repeat(area / 3.0, 3))
    c_kappa = np.zeros(mesh.n)
    np.add.at(c_kappa, mesh.triangles.ravel(), np.repeat(k2 * area / 3.0, 3))
    h11, h12, h22 = H
    G = _scatter(mesh, element_stiffness(mesh, h11, h12, h22))
    return FemOperators(C, sp.diags(lumped), G, c_kappa, kappa, H, mesh)


def precision(ops: FemOperators, params: StationaryParams) -> sp.csr_matrix:
    """Q = (C_k + G) C_k^-1 (C_k + G) / (4 pi sigma^2) with C_k the lumped kappa^2 mass.

    ``params`` must carry the kappa and anisotropy the operators were
    assembled with; only ``sigma_u`` is new information.
    """
    if np.ndim(ops.kappa) == 0 and not math.isclose(float(ops.kappa), params.kappa, rel_tol=1e-12):
        raise ValueError("params.kappa differs from the assembled kappa")
    if isinstance(ops.H, AnisoMatrix) and not np.allclose(ops.H, h_matrix(params.v), rtol=1e-12, atol=1e-14):
        raise ValueError("params.v differs from the assembled anisotropy")
    d = ops.c_kappa
    if np.any(d <= 0):
        raise SingularMass("lumped mass has non-positive entries")
    K = (sp.diags(d) + ops.G).tocsr()
    Q = (K @ sp.diags(1.0 / d) @ K) / (4 * math.pi * params.sigma_u**2)
    Q = 0.5 * (Q + Q.T)
    return Q.tocsr()


def _keys(M, n):
    M = M.tocoo()
    return M.row.astype(np.int64) * n + M.col, M.data


class StationaryPrecision:
    """Fast repeated precision construction for one mesh and varying (kappa, v, sigma).

    With G_H = h11 G11 + h12 G12 + h22 G22 the product G_H D^-1 G_H expands
    into six fixed sparse matrices, so Q is a linear combination of
    precomputed arrays on one shared sparsity pattern.
    """

    def __init__(self, mesh: TriMesh, extra=()):
        self.mesh = mesh
        n = mesh.n
        area, _ = _geometry(mesh)
        d = np.zeros(n)
        np.add.at(d, mesh.triangles.ravel(), np.repeat(area / 3.0, 3))
        if np.any(d <= 0):
            raise SingularMass("lumped mass has non-positive entries")
        self.lumped = d
        one, zero = np.ones(n), np.zeros(n)
        G = [_scatter(mesh, element_stiffness(mesh, *h)) for h in
             ((one, zero, zero), (zero, one, zero), (zero, zero, one))]
        Dinv = sp.diags(1.0 / d)
        prods = {}
        for a in range(3):
            for b in range(a, 3):
                P = G[a] @ Dinv @ G[b]
                prods[a, b] = P if a == b else P + P.T
        mats = [sp.diags(d)] + G + list(prods.values()) + [sp.csr_matrix(m) for m in extra]
        union = abs(mats[0])
        for m in mats[1:]:
            union = union + abs(m)
        union = union.tocsr()
        union.sort_indices()
        self.pattern = union
        ukeys = np.repeat(np.arange(n, dtype=np.int64), np.diff(union.indptr)) * n + union.indices
        self._parts = []
        for m in mats:
            k, v = _keys(m, n)
            arr = np.zeros(union.nnz)
            np.add.at(arr, np.searchsorted(ukeys, k), v)
            self._parts.append(arr)
        self._pairs = list(prods.keys())
        self.ordering = BandOrdering(union)
        # K = kappa^2 D + G_H on the one-ring pattern, for the log-determinant
        kmats = [sp.diags(d)] + G
        kpat = abs(kmats[0]) + abs(kmats[1]) + abs(kmats[2]) + abs(kmats[3])
        kpat = kpat.tocsr()
        kpat.sort_indices()
        self._k_pattern = kpat
        kkeys = np.repeat(np.arange(n, dtype=np.int64), np.diff(kpat.indptr)) * n + kpat.indices
        self._k_parts = []
        for m in kmats:
            k, v = _keys(m, n)
            arr = np.zeros(kpat.nnz)
            np.add.at(arr, np.searchsorted(kkeys, k), v)
            self._k_parts.append(arr)
        self._k_ordering = BandOrdering(kpat)
        self._log_lumped = float(np.sum(np.log(d)))

    def part(self, i) -> np.ndarray:
        """Data array of the ``extra`` matrix number ``i`` on the shared pattern."""
        return self._parts[10 + i]

    def data(self, kappa: float, v, sigma_u: float) -> np.ndarray:
        h = h_matrix(v)
        hv = (h.h11, h.h12, h.h22)
        k2 = kappa * kappa
        out = k2 * self._parts[0]
        for a in range(3):
            out += 2.0 * hv[a] * self._parts[1 + a]
        for i, (a, b) in enumerate(self._pairs):
            out += (hv[a] * hv[b] / k2) * self._parts[4 + i]
        out /= 4 * math.pi * sigma_u**2
        return out

    def logdet(self, kappa: float, v, sigma_u: float) -> float:
        """``log det Q`` from ``Q = K D^-1 K / (4 pi sigma^2 kappa^2)``, ``K = kappa^2 D + G_H``.

        K has the one-ring pattern, so its band is half that of Q.
        """
        h = h_matrix(v)
        k2 = kappa * kappa
        data = k2 * self._k_parts[0] + h.h11 * self._k_parts[1] + h.h12 * self._k_parts[2] + h.h22 * self._k_parts[3]
        u = self._k_pattern
        K = sp.csr_matrix((data, u.indices, u.indptr), shape=u.shape)
        n = self.mesh.n
        ld = BandedCholesky(K, self._k_ordering).logdet
        return 2.0 * ld - self._log_lumped - n * math.log(4 * math.pi * sigma_u**2 * k2)

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        u = self.pattern
        return sp.csr_matrix((data, u.indices, u.indptr), shape=u.shape)

    def precision(self, params: StationaryParams) -> sp.csr_matrix:
        return self.matrix(self.data(params.kappa, params.v, params.sigma_u))


@dataclass(frozen=True)
class LatentField:
    weights: np.ndarray
    mesh: TriMesh | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("latent field has non-finite weights")


def sample_field(Q, seed, mesh: TriMesh | None = None, factor: BandedCholesky | None = None) -> LatentField:
    """Draw from N(0, Q^-1) via ``U x = z`` with ``Q = U^T U``."""
    F = factor if factor is not None else BandedCholesky(Q)
    z = np.random.default_rng(seed).standard_normal(F.n)
    return LatentField(F.sample(z), mesh)


def interpolation_matrix(mesh: TriMesh, locations) -> sp.csr_matrix:
    """Barycentric P1 interpolation; row i holds the weights for location i."""
    pts = np.asarray(locations, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        return sp.csr_matrix((0, mesh.n))
    p = mesh.nodes[mesh.triangles]
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    scale = np.sqrt(np.abs(det)).max()
    tree = cKDTree(p.mean(axis=1))
    k = min(12, len(mesh.triangles))

    def bary(idx, q):
        aa, bb, cc, dd = a[idx], b[idx], c[idx], det[idx]
        l1 = ((q[..., 0] - aa[..., 0]) * (cc[..., 1] - aa[..., 1]) - (q[..., 1] - aa[..., 1]) * (cc[..., 0] - aa[..., 0])) / dd
        l2 = ((bb[..., 0] - aa[..., 0]) * (q[..., 1] - aa[..., 1]) - (bb[..., 1] - aa[..., 1]) * (q[..., 0] - aa[..., 0])) / dd
        return np.stack([1 - l1 - l2, l1, l2], axis=-1)

    _, cand = tree.query(pts, k=k)
    cand = cand.reshape(len(pts), k)
    lam = bary(cand, pts[:, None, :])
    tol = -1e-10
    ok = np.all(lam >= tol, axis=-1)
    rows, cols, vals = [], [], []
    for i in range(len(pts)):
        hits = np.flatnonzero(ok[i])
        if hits.size:
            t, w = cand[i, hits[0]], lam[i, hits[0]]
        else:
            w_all = bary(np.arange(len(mesh.triangles)), pts[i])
            inside = np.flatnonzero(np.all(w_all >= tol, axis=-1))
            if not inside.size:
                raise PointOutsideMesh(i, pts[i])
            t, w = inside[0], w_all[inside[0]]
        w = np.where(np.abs(w) < 1e-12 * max(1.0, scale), 0.0, w)
        w = np.clip(w, 0.0, None)
        w /= w.sum()
        rows.append(np.full(3, i))
        cols.append(mesh.triangles[t])
        vals.append(w)
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(pts), mesh.n)
    )
    A.eliminate_zeros()
    return A


def export_matrix_market(Q, path) -> None:
    from scipy.io import mmwrite

    mmwrite(str(path), sp.coo_matrix(Q), symmetry="symmetric", precision=17)
