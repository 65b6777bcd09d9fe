"""Linear finite-element matrices on a labelled triangle mesh.

For the hat functions ``psi_i`` of the mesh this assembles

* ``J[i, j]   = integral of psi_i psi_j``                 (consistent mass)
* ``D_q[i, j] = integral over subdomain q of grad psi_i . grad psi_j``
* ``Clump_q[i] = integral over subdomain q of psi_i``      (lumped mass)

using the exact element integrals of linear triangles.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import MeshError, TriangleMesh

__all__ = ["FemMatrices", "assemble", "stiffness_total", "write_coordinate"]

_MASS_BLOCK = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


@dataclass(frozen=True)
class FemMatrices:
    """Mass, per-subdomain stiffness and per-subdomain lumped mass.

    ``D[q-1]`` and ``Clump[q-1]`` belong to subdomain label ``q``.
    """

    J: sp.csr_matrix
    D: tuple
    Clump: tuple
    node_count: int
    subdomain_count: int
    mesh: TriangleMesh = None

    @property
    def area(self) -> float:
        return float(sum(c.sum() for c in self.Clump))


def _element_blocks(mesh: TriangleMesh):
    V, T = mesh.vertices, mesh.triangles
    P = V[T]  # (M, 3, 2)
    area = mesh.areas
    if np.any(area <= 0):
        raise MeshError("degenerate triangle in mesh")
    # edge opposite vertex i, oriented counter-clockwise
    E = P[:, [2, 0, 1], :] - P[:, [1, 2, 0], :]
    K = np.einsum("mid,mjd->mij", E, E) / (4.0 * area)[:, None, None]
    M = area[:, None, None] * _MASS_BLOCK[None, :, :]
    return area, K, M


def _scatter(T: np.ndarray, blocks: np.ndarray, n: int) -> sp.csr_matrix:
    rows = np.repeat(T, 3, axis=1).ravel()
    cols = np.tile(T, (1, 3)).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return mat


def assemble(mesh: TriangleMesh, n_subdomains: int | None = None) -> FemMatrices:
    """Assemble ``J``, ``D_q`` and ``Clump_q`` for every subdomain label.

    Parameters
    ----------
    mesh : TriangleMesh
    n_subdomains : int, optional
        Number of subdomains ``k``; defaults to the largest label present.
        Labels without triangles get zero matrices.
    """
    n = mesh.n_vertices
    k = int(mesh.subdomain.max()) if n_subdomains is None else int(n_subdomains)
    if mesh.subdomain.max() > k:
        raise MeshError(f"mesh has label {mesh.subdomain.max()} but only {k} subdomains requested")
    area, K, M = _element_blocks(mesh)
    T = mesh.triangles
    J = _scatter(T, M, n)
    D, Clump = [], []
    for q in range(1, k + 1):
        sel = mesh.subdomain == q
        D.append(_scatter(T[sel], K[sel], n))
        c = np.zeros(n)
        np.add.at(c, T[sel].ravel(), np.repeat(area[sel] / 3.0, 3))
        c.setflags(write=False)
        Clump.append(c)
    return FemMatrices(J, tuple(D), tuple(Clump), n, k, mesh)


def stiffness_total(fem: FemMatrices) -> sp.csr_matrix:
    """Whole-domain stiffness matrix, the sum of all ``D_q``."""
    total = fem.D[0].copy()
    for Dq in fem.D[1:]:
        total = total + Dq
    return total.tocsr()


def write_coordinate(path, matrix) -> None:
    """Dump a sparse matrix as ``row col value`` lines with zero-based indices."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with Path(path).open("w") as fh:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {float(v)!r}\n")
