"""Precision matrices of the stationary, Barrier and Neumann Matérn fields.

The field solves ``u - div(r(s)^2 / 8 grad u) = r(s) sqrt(pi/2) sigma_u W``
with a range ``r_q`` that is constant on each subdomain. Discretizing with
linear elements gives ``A u = eps`` where

    A = J + (1/8) sum_q r_q^2 D_q,     Cov(eps) ~ C = (pi/2) sum_q r_q^2 Clump_q,

so the precision of the node weights is ``Q = A C^{-1} A / sigma_u^2``.
The Barrier model uses two subdomains with ``r_2 = barrier_fraction * r``.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import gmrf
from .fem import FemMatrices, assemble
from .mesh import TriangleMesh, project_points, restrict_to_subdomain

__all__ = [
    "bessel_k1",
    "matern_correlation",
    "BarrierSpec",
    "PrecisionOperator",
    "assemble_A",
    "assemble_Q",
    "correlation_surface",
    "point_correlation",
    "marginal_sd",
    "rescale_to_unit_variance",
    "SpatialModel",
    "build_model",
    "write_field_csv",
    "write_pgm",
]

MODEL_KINDS = ("MS", "MB", "MN")

_EULER = 0.57721566490153286060651209


def _k1_series(x: float) -> float:
    y = 0.25 * x * x
    term = 1.0
    s_i = 0.0
    s_psi = 0.0
    h_k, h_k1 = 0.0, 1.0
    k = 0
    while True:
        s_i += term
        s_psi += term * (h_k + h_k1 - 2.0 * _EULER)
        k += 1
        term *= y / (k * (k + 1))
        h_k += 1.0 / k
        h_k1 += 1.0 / (k + 1)
        if term < 1e-17 * s_i:
            break
    return 1.0 / x + math.log(0.5 * x) * 0.5 * x * s_i - 0.25 * x * s_psi


def _k1_continued_fraction(x: float) -> float:
    # Steed's method on the Temme continued fraction, order zero
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = delh = d
    q1, q2 = 0.0, 1.0
    a1 = 0.25
    q = c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, 100000):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1, q2 = q2, qnew
        q += c * qnew
        b += 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h += delh
        dels = q * delh
        s += dels
        if abs(dels / s) < 1e-16:
            break
    h *= a1
    k0 = math.sqrt(math.pi / (2.0 * x)) * math.exp(-x) / s
    return k0 * (x + 0.5 - h) / x


def _k1_scalar(x: float) -> float:
    if not x > 0:
        raise ValueError("K1 is defined for x > 0")
    if x > 700.0:
        return 0.0
    return _k1_series(x) if x <= 2.0 else _k1_continued_fraction(x)


def bessel_k1(x):
    """Modified Bessel function of the second kind, order one, for ``x > 0``."""
    arr = np.asarray(x, dtype=float)
    out = np.array([_k1_scalar(v) for v in arr.ravel()]).reshape(arr.shape)
    return out if out.ndim else float(out)


def _xk1(x: float) -> float:
    if x == 0.0:
        return 1.0
    if x > 700.0:
        return 0.0
    return x * _k1_scalar(x)


def matern_correlation(d, r: float):
    """Matérn correlation with smoothness one, parameterized by the range.

    ``rho(d) = (d sqrt(8)/r) K1(d sqrt(8)/r)``; about 0.14 at ``d = r``.
    """
    if not r > 0:
        raise ValueError("range must be positive")
    arr = np.asarray(d, dtype=float)
    if np.any(arr < 0):
        raise ValueError("distances must be non-negative")
    x = arr * math.sqrt(8.0) / r
    out = np.array([_xk1(v) for v in x.ravel()]).reshape(x.shape)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class BarrierSpec:
    """Hyperparameters of the field.

    Parameters
    ----------
    range : float
        Range ``r`` in the normal subdomain.
    sigma_u : float
        Marginal standard-deviation scale.
    barrier_fraction : float
        ``r_b / r`` for the barrier subdomain.
    ranges : tuple of float, optional
        Explicit per-subdomain ranges; overrides ``range``/``barrier_fraction``.
    """

    range: float
    sigma_u: float = 1.0
    barrier_fraction: float = 0.1
    ranges: tuple | None = None

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError("range must be positive")
        if not self.sigma_u > 0:
            raise ValueError("sigma_u must be positive")
        if not 0 < self.barrier_fraction <= 1:
            raise ValueError("barrier_fraction must lie in (0, 1]")
        if self.ranges is not None:
            rs = tuple(float(v) for v in self.ranges)
            if any(v < 0 for v in rs):
                raise ValueError("subdomain ranges must be non-negative")
            object.__setattr__(self, "ranges", rs)

    @property
    def barrier_range(self) -> float:
        return self.barrier_fraction * self.range

    def subdomain_ranges(self, k: int) -> tuple:
        if self.ranges is not None:
            if len(self.ranges) != k:
                raise ValueError(f"{len(self.ranges)} ranges given for {k} subdomains")
            return self.ranges
        if k == 1:
            return (self.range,)
        if k == 2:
            return (self.range, self.barrier_range)
        raise ValueError(f"give explicit ranges for {k} subdomains")


def assemble_A(fem: FemMatrices, spec: BarrierSpec) -> sp.csr_matrix:
    """``J + (1/8) sum_q r_q^2 D_q``."""
    ranges = spec.subdomain_ranges(fem.subdomain_count)
    A = fem.J.copy()
    for rq, Dq in zip(ranges, fem.D):
        if rq:
            A = A + (rq * rq / 8.0) * Dq
    return A.tocsr()


def _lumped_noise_variance(fem: FemMatrices, ranges) -> np.ndarray:
    c = np.zeros(fem.node_count)
    for rq, cq in zip(ranges, fem.Clump):
        c += rq * rq * cq
    return 0.5 * math.pi * c


class PrecisionOperator:
    """Sparse SPD precision with a lazily computed, cached Cholesky factor.

    Solves against the cached factor may be issued from several threads;
    the factorization itself is guarded by a lock.
    """

    def __init__(self, Q, provenance: dict | None = None):
        self.Q = sp.csc_matrix(Q)
        self.Q.sort_indices()
        self.provenance = dict(provenance or {})
        self._factor = None
        self._lock = threading.Lock()

    @property
    def node_count(self) -> int:
        return self.Q.shape[0]

    @property
    def factor(self) -> gmrf.Factorization:
        if self._factor is None:
            with self._lock:
                if self._factor is None:
                    self._factor = gmrf.factorize(self.Q)
        return self._factor

    def solve(self, b):
        return self.factor.solve(b)

    def logdet(self) -> float:
        return self.factor.logdet

    def sample(self, rng, size=None):
        return self.factor.sample(rng, size=size)

    def marginal_variances(self) -> np.ndarray:
        return self.factor.marginal_variances()

    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(self.marginal_variances())

    def correlation_surface(self, node: int) -> np.ndarray:
        return correlation_surface(self, node)

    def __repr__(self):
        kind = self.provenance.get("kind", "?")
        return f"PrecisionOperator(kind={kind}, n={self.node_count}, nnz={self.Q.nnz})"


def assemble_Q(fem: FemMatrices, spec: BarrierSpec, provenance: dict | None = None) -> PrecisionOperator:
    """Precision ``A C^{-1} A / sigma_u^2`` for the given hyperparameters.

    Raises
    ------
    ValueError
        If some node has zero lumped noise variance (it touches no triangle
        with positive range).
    """
    ranges = spec.subdomain_ranges(fem.subdomain_count)
    c = _lumped_noise_variance(fem, ranges)
    if np.any(c <= 0):
        bad = np.flatnonzero(c <= 0)[:10].tolist()
        raise ValueError(f"zero lumped mass at nodes {bad}")
    A = assemble_A(fem, spec)
    Q = (A @ sp.diags(1.0 / (c * spec.sigma_u**2)) @ A).tocsc()
    Q = 0.5 * (Q + Q.T)
    prov = {"spec": spec, "ranges": ranges}
    prov.update(provenance or {})
    return PrecisionOperator(Q, prov)


def correlation_surface(Qop: PrecisionOperator, node: int) -> np.ndarray:
    """Correlation between every node and ``node`` under ``N(0, Q^{-1})``."""
    n = Qop.node_count
    if not 0 <= node < n:
        raise IndexError(f"node {node} out of range for {n} nodes")
    e = np.zeros(n)
    e[node] = 1.0
    col = Qop.solve(e)
    var = Qop.marginal_variances()
    corr = col / np.sqrt(var * var[node])
    corr[node] = 1.0
    return np.clip(corr, -1.0, 1.0)


def point_correlation(Qop: PrecisionOperator, proj) -> np.ndarray:
    """Correlation matrix of the interpolated field at the projector's points.

    Exact for points inside triangles: ``Cov = P Q^{-1} P'`` from one solve per
    point, so probes need not coincide with mesh nodes.
    """
    P = sp.csr_matrix(getattr(proj, "matrix", proj))
    X = Qop.solve(P.T.toarray())
    C = np.asarray(P @ X)
    C = 0.5 * (C + C.T)
    sd = np.sqrt(np.diag(C))
    return np.clip(C / np.outer(sd, sd), -1.0, 1.0)


def marginal_sd(Qop: PrecisionOperator) -> np.ndarray:
    """``sqrt(diag(Q^{-1}))`` per node."""
    return Qop.marginal_sd()


def rescale_to_unit_variance(Qop: PrecisionOperator) -> PrecisionOperator:
    """Return ``S Q S`` with ``S = diag(marginal sd)`` so all marginal variances are one."""
    s = Qop.marginal_sd()
    S = sp.diags(s)
    prov = dict(Qop.provenance)
    prov["rescaled"] = True
    return PrecisionOperator((S @ Qop.Q @ S).tocsc(), prov)


@dataclass
class SpatialModel:
    """One of the three field models on a given mesh.

    ``mesh`` is the mesh the precision lives on; for MN it is the water-only
    restriction and ``parent_nodes`` maps its nodes back to the input mesh.
    """

    kind: str
    mesh: TriangleMesh
    fem: FemMatrices
    parent_nodes: np.ndarray
    barrier_fraction: float = 0.1
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_subdomains(self) -> int:
        return self.fem.subdomain_count

    def spec(self, range_: float, sigma_u: float = 1.0) -> BarrierSpec:
        return BarrierSpec(range_, sigma_u, self.barrier_fraction)

    def precision(self, range_: float, sigma_u: float = 1.0) -> PrecisionOperator:
        return assemble_Q(self.fem, self.spec(range_, sigma_u), {"kind": self.kind})

    def project(self, points):
        return project_points(self.mesh, points)


def build_model(mesh: TriangleMesh, kind: str, barrier_fraction: float = 0.1) -> SpatialModel:
    """Set up MS (labels ignored), MB (two subdomains) or MN (water-only mesh)."""
    kind = kind.upper()
    if kind == "MS":
        m = mesh.with_subdomain(np.ones(mesh.n_triangles, np.int64))
        return SpatialModel("MS", m, assemble(m, 1), np.arange(mesh.n_vertices), barrier_fraction)
    if kind == "MB":
        return SpatialModel("MB", mesh, assemble(mesh, 2), np.arange(mesh.n_vertices), barrier_fraction)
    if kind == "MN":
        sub, parent = restrict_to_subdomain(mesh, 1)
        return SpatialModel("MN", sub, assemble(sub, 1), parent, barrier_fraction)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def write_field_csv(path, mesh: TriangleMesh, values, nodes=None) -> None:
    """Write ``node,x,y,value`` rows for a per-node field.

    ``nodes`` relabels the rows (e.g. parent-mesh indices for a restricted
    mesh); coordinates always come from ``mesh``.
    """
    values = np.asarray(values, dtype=float)
    nodes = np.arange(mesh.n_vertices) if nodes is None else np.asarray(nodes)
    with Path(path).open("w", newline="") as fh:
        fh.write("node,x,y,value\r\n")
        for i, (x, y), v in zip(nodes.tolist(), mesh.vertices.tolist(), values.tolist()):
            fh.write(f"{i},{x!r},{y!r},{v!r}\r\n")


def write_pgm(path, mesh: TriangleMesh, values, bbox=None, width: int = 256,
              vmin: float | None = None, vmax: float | None = None, cutoff: float | None = None) -> None:
    """Rasterize a nodal field to a binary (P5) greyscale image.

    Pixels outside the mesh are black; values below ``cutoff`` are drawn as
    black as well, which is how correlation maps are usually thresholded.
    """
    values = np.asarray(values, dtype=float)
    xmin, xmax, ymin, ymax = mesh.bbox if bbox is None else bbox
    height = max(1, int(round(width * (ymax - ymin) / (xmax - xmin))))
    xs = xmin + (np.arange(width) + 0.5) * (xmax - xmin) / width
    ys = ymax - (np.arange(height) + 0.5) * (ymax - ymin) / height
    X, Y = np.meshgrid(xs, ys)
    proj = project_points(mesh, np.column_stack([X.ravel(), Y.ravel()]))
    img = proj.matrix @ values
    lo = np.nanmin(values) if vmin is None else vmin
    hi = np.nanmax(values) if vmax is None else vmax
    scaled = np.clip((img - lo) / (hi - lo if hi > lo else 1.0), 0.0, 1.0)
    pix = np.round(scaled * 255).astype(np.uint8)
    pix[~proj.valid] = 0
    if cutoff is not None:
        pix[img < cutoff] = 0
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pix.reshape(height, width).tobytes())
