"""Sparse symmetric positive-definite linear algebra for Gaussian Markov random fields.

The engine factorizes a sparse precision matrix ``Q`` as ``P Q P' = L L'``
with an approximate-minimum-degree permutation ``P`` and exposes what the
models need from that factor: solves, the log-determinant, samples from
``N(0, Q^{-1})``, marginal variances and selected covariance entries.

Symbolic analysis (ordering, elimination tree, column counts) depends only on
the sparsity pattern, so it can be computed once and reused for every
hyperparameter value that keeps the pattern fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _cholesky_kernels as _k

__all__ = [
    "NotPositiveDefiniteError",
    "Symbolic",
    "Factorization",
    "as_sparse_spd",
    "analyze",
    "factorize",
    "solve",
    "logdet",
    "sample",
    "marginal_variances",
    "condition",
    "augmented_design",
]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a non-positive pivot is met during factorization.

    Attributes
    ----------
    pivot : int
        Index of the failing row/column in the caller's (unpermuted) numbering.
    """

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix is not SPD: non-positive pivot at index {pivot}")


def as_sparse_spd(Q) -> sp.csc_matrix:
    """Validate ``Q`` as a square sparse symmetric matrix and return canonical CSC.

    Dense input is accepted for convenience. Symmetry is checked on the
    structure and, to a relative 1e-10, on the values; the diagonal must be
    fully present and positive.
    """
    Q = sp.csc_matrix(Q, dtype=float)
    if Q.shape[0] != Q.shape[1]:
        raise ValueError(f"precision must be square, got shape {Q.shape}")
    Q.sum_duplicates()
    Q.sort_indices()
    diag = Q.diagonal()
    if np.any(~(diag > 0)):
        bad = int(np.flatnonzero(~(diag > 0))[0])
        raise NotPositiveDefiniteError(bad, f"diagonal entry {bad} is not positive")
    asym = abs(Q - Q.T)
    scale = abs(Q).max() if Q.nnz else 1.0
    if asym.nnz and asym.max() > 1e-10 * scale:
        raise ValueError("precision matrix is not symmetric")
    return Q


def _pattern(Q: sp.csc_matrix) -> sp.csc_matrix:
    P = Q.copy()
    P.data = np.ones_like(P.data)
    return P


@dataclass(frozen=True)
class Symbolic:
    """Pattern-only part of a Cholesky factorization."""

    n: int
    perm: np.ndarray
    pinv: np.ndarray
    Cp: np.ndarray
    Ci: np.ndarray
    parent: np.ndarray
    Lp: np.ndarray
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    Li: np.ndarray = field(repr=False, default=None)
    snode: np.ndarray = field(repr=False, default=None)

    @property
    def nnz_factor(self) -> int:
        return int(self.Lp[-1])

    def covers(self, Q: sp.csc_matrix) -> bool:
        """True if the pattern of ``Q`` is contained in the analyzed pattern."""
        if Q.shape != (self.n, self.n):
            return False
        if np.array_equal(Q.indptr, self.indptr) and np.array_equal(Q.indices, self.indices):
            return True
        ref = sp.csc_matrix((np.ones(self.indices.size), self.indices, self.indptr), shape=Q.shape)
        pat = _pattern(Q)
        return (pat - pat.multiply(ref)).nnz == 0


def analyze(Q, ordering: str = "amd") -> Symbolic:
    """Fill-reducing ordering and symbolic factorization of the pattern of ``Q``.

    Parameters
    ----------
    Q : sparse matrix
        Symmetric; only its pattern is used.
    ordering : {"amd", "natural"}
        ``"natural"`` keeps the input order (useful for testing).
    """
    Q = sp.csc_matrix(Q, dtype=float)
    Q.sum_duplicates()
    Q.sort_indices()
    n = Q.shape[0]
    indptr = Q.indptr.astype(np.int64)
    indices = Q.indices.astype(np.int64)
    if ordering == "amd" and n > 2:
        off = _pattern(Q)
        off.setdiag(0)
        off.eliminate_zeros()
        off = (off + off.T).tocsc()
        off.sort_indices()
        perm = _k.amd_order(n, off.indptr.astype(np.int64), off.indices.astype(np.int64))
    elif ordering in ("amd", "natural"):
        perm = np.arange(n, dtype=np.int64)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    pinv = np.empty(n, np.int64)
    pinv[perm] = np.arange(n, dtype=np.int64)

    # upper-triangular pattern of C = Q[perm][:, perm]
    coo = Q.tocoo()
    r = pinv[coo.row]
    c = pinv[coo.col]
    keep = r <= c
    C = sp.csc_matrix((np.ones(int(keep.sum())), (r[keep], c[keep])), shape=(n, n))
    C.sum_duplicates()
    C.sort_indices()
    Cp = C.indptr.astype(np.int64)
    Ci = C.indices.astype(np.int64)
    parent = _k.etree_upper(n, Cp, Ci)
    counts = _k.column_counts(n, Cp, Ci, parent)
    Lp = np.zeros(n + 1, np.int64)
    np.cumsum(counts, out=Lp[1:])
    Li = _k.symbolic_pattern(n, Cp, Ci, parent, Lp)
    Li.setflags(write=False)
    snode = _k.supernodes(n, parent, Lp)
    return Symbolic(n, perm, pinv, Cp, Ci, parent, Lp, indptr, indices, Li, snode)


class Factorization:
    """Numeric Cholesky factor ``P Q P' = L L'`` plus the operations built on it.

    Instances are immutable after construction; the selected inverse is
    computed lazily on first use and cached.
    """

    def __init__(self, symbolic: Symbolic, Li: np.ndarray, Lx: np.ndarray):
        self.symbolic = symbolic
        self.n = symbolic.n
        self.perm = symbolic.perm
        self.pinv = symbolic.pinv
        self._Li = Li
        self._Lx = Lx
        self._selinv = None

    @property
    def L(self) -> sp.csc_matrix:
        """The lower-triangular factor as a scipy CSC matrix (permuted numbering)."""
        s = self.symbolic
        return sp.csc_matrix((self._Lx.copy(), self._Li.copy(), s.Lp.copy()), shape=(self.n, self.n))

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(self._Lx[self.symbolic.Lp[:-1]])))

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has {b.shape[0]} rows, expected {self.n}")
        x = np.ascontiguousarray(b.reshape(self.n, -1)[self.perm])
        Lp = self.symbolic.Lp
        _k.lsolve(self.n, Lp, self._Li, self._Lx, x)
        _k.ltsolve(self.n, Lp, self._Li, self._Lx, x)
        out = np.empty_like(x)
        out[self.perm] = x
        return out.reshape(b.shape)

    def solve_lt(self, z) -> np.ndarray:
        """Return ``P' L'^{-1} z``; with ``z ~ N(0, I)`` this is ``N(0, Q^{-1})``."""
        z = np.asarray(z, dtype=float)
        x = np.ascontiguousarray(z.reshape(self.n, -1))
        _k.ltsolve(self.n, self.symbolic.Lp, self._Li, self._Lx, x)
        out = np.empty_like(x)
        out[self.perm] = x
        return out.reshape(z.shape)

    def sample(self, rng, size: int | None = None) -> np.ndarray:
        """Draw from ``N(0, Q^{-1})``.

        ``rng`` is a :class:`numpy.random.Generator` or a seed. With ``size``
        the result has shape ``(n, size)``.
        """
        rng = np.random.default_rng(rng)
        z = rng.standard_normal(self.n if size is None else (self.n, size))
        return self.solve_lt(z)

    def _selected_inverse(self) -> np.ndarray:
        if self._selinv is None:
            self._selinv = _k.selected_inverse(self.n, self.symbolic.Lp, self._Li, self._Lx)
        return self._selinv

    def marginal_variances(self) -> np.ndarray:
        """Exact ``diag(Q^{-1})`` via the Takahashi recursion."""
        S = self._selected_inverse()
        out = np.empty(self.n)
        out[self.perm] = S[self.symbolic.Lp[:-1]]
        return out

    def covariance_entries(self, rows, cols) -> np.ndarray:
        """Entries ``(Q^{-1})[rows[t], cols[t]]``.

        Pairs inside the factor's pattern come from the selected inverse (this
        includes every pair of nodes sharing a triangle); others fall back to
        one solve per distinct column.
        """
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        S = self._selected_inverse()
        out = _k.lookup(self.symbolic.Lp, self._Li, S, self.pinv[rows], self.pinv[cols])
        missing = np.flatnonzero(np.isnan(out))
        if missing.size:
            ucols, inv = np.unique(cols[missing], return_inverse=True)
            E = np.zeros((self.n, ucols.size))
            E[ucols, np.arange(ucols.size)] = 1.0
            X = self.solve(E)
            out[missing] = X[rows[missing], inv]
        return out


def factorize(Q, symbolic: Symbolic | None = None, ordering: str = "amd", check: bool = True,
              method: str = "supernodal") -> Factorization:
    """Sparse Cholesky factorization of an SPD matrix.

    Parameters
    ----------
    Q : sparse or dense matrix
        Symmetric positive definite.
    symbolic : Symbolic, optional
        Reused analysis; must cover the pattern of ``Q``.
    check : bool
        Validate symmetry and pattern coverage. Hot loops that build ``Q``
        from known-symmetric pieces on a fixed pattern may switch this off.
    method : {"supernodal", "uplooking"}
        Numeric kernel. Both give the same factor up to rounding; the
        up-looking one works entry by entry and serves as a cross-check.

    Raises
    ------
    NotPositiveDefiniteError
        If a pivot is not positive; ``.pivot`` names the original index.
    """
    if check:
        Q = as_sparse_spd(Q)
    else:
        Q = sp.csc_matrix(Q, dtype=float)
        if not Q.has_sorted_indices:
            Q.sort_indices()
    if symbolic is None:
        symbolic = analyze(Q, ordering=ordering)
    elif check and not symbolic.covers(Q):
        raise ValueError("symbolic analysis does not cover the pattern of Q")
    Qp = Q.indptr.astype(np.int64)
    Qi = Q.indices.astype(np.int64)
    Lx = np.empty(symbolic.nnz_factor)
    if method == "supernodal":
        Li = symbolic.Li
        fail = _k.supernodal_cholesky(symbolic.n, Qp, Qi, Q.data, symbolic.perm, symbolic.pinv,
                                      symbolic.snode, symbolic.Lp, Li, Lx)
    elif method == "uplooking":
        Li = np.empty(symbolic.nnz_factor, np.int64)
        fail = _k.numeric_cholesky(symbolic.n, Qp, Qi, Q.data, symbolic.perm, symbolic.pinv,
                                   symbolic.Cp, symbolic.Ci, symbolic.parent, symbolic.Lp, Li, Lx)
    else:
        raise ValueError(f"unknown method {method!r}")
    if fail >= 0:
        raise NotPositiveDefiniteError(int(symbolic.perm[fail]))
    return Factorization(symbolic, Li, Lx)


def solve(f: Factorization, b) -> np.ndarray:
    return f.solve(b)


def logdet(f: Factorization) -> float:
    return f.logdet


def sample(f: Factorization, rng_seed, size: int | None = None) -> np.ndarray:
    return f.sample(rng_seed, size=size)


def marginal_variances(f: Factorization) -> np.ndarray:
    return f.marginal_variances()


def augmented_design(proj_matrix: sp.spmatrix, extra_flat_effects: int = 1) -> sp.csr_matrix:
    """Append one all-ones column per flat effect to an observation matrix."""
    proj_matrix = sp.csr_matrix(proj_matrix)
    if extra_flat_effects == 0:
        return proj_matrix
    ones = sp.csr_matrix(np.ones((proj_matrix.shape[0], extra_flat_effects)))
    return sp.hstack([proj_matrix, ones], format="csr")


def condition(
    prior,
    proj,
    noise_var: float,
    y,
    extra_flat_effects: int = 1,
    flat_precision: float = 1e-6,
):
    """Condition a zero-mean GMRF on Gaussian observations ``y = A x + e``.

    The latent vector is augmented with ``extra_flat_effects`` effects that
    enter every observation with coefficient 1 (an intercept for the default
    of one) and carry the prior ``N(0, 1/flat_precision)``.

    Parameters
    ----------
    prior : sparse matrix
        Prior precision of the field nodes.
    proj : Projector or sparse matrix
        Observation matrix; a :class:`~barrierfield.mesh.Projector` with
        invalid rows raises.
    noise_var : float
        Observation noise variance.
    y : array_like
        Observations.

    Returns
    -------
    mean : ndarray
        Posterior mean of the augmented latent vector.
    precision : scipy.sparse.csc_matrix
        Posterior precision of the augmented latent vector.
    """
    from .mesh import Projector

    if not noise_var > 0:
        raise ValueError("noise_var must be positive")
    if isinstance(proj, Projector):
        if not proj.valid.all():
            bad = np.flatnonzero(~proj.valid).tolist()
            raise ValueError(f"observations outside the mesh: indices {bad}")
        proj = proj.matrix
    y = np.asarray(y, dtype=float).ravel()
    if proj.shape[0] != y.size:
        raise ValueError(f"{y.size} observations but projector has {proj.shape[0]} rows")
    A = augmented_design(proj, extra_flat_effects)
    Qz = sp.block_diag(
        [sp.csc_matrix(prior), flat_precision * sp.identity(extra_flat_effects)], format="csc"
    )
    Qpost = (Qz + (A.T @ A) / noise_var).tocsc()
    if y.size == 0:
        return np.zeros(Qpost.shape[0]), Qpost
    mean = factorize(Qpost).solve(A.T @ y / noise_var)
    return mean, Qpost
