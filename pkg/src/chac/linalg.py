"""Sparse matrices in compressed row storage and a direct LU solver.

Storage and factorization are delegated to scipy.sparse (CSR) and SuperLU.
The default ordering is COLAMD with partial pivoting; the Newton systems use
a METIS nested-dissection ordering instead (see ``LUFactor``). This module
fixes the contracts the rest of the package relies on: duplicate summation,
dimension checks, residual check and singularity reporting.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import pymetis

SparseMat = sp.csr_matrix

RESIDUAL_TOL = 1e-10


class SingularMatrixError(ArithmeticError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


def from_triplets(n_rows: int, n_cols: int, triplets) -> SparseMat:
    """CSR matrix from (row, col, value) triplets; duplicates are summed.

    ``triplets`` is either an iterable of 3-tuples or a tuple of three arrays
    ``(rows, cols, vals)``. The result has sorted, unique column indices per
    row and does not depend on the order of the triplets.
    """
    if isinstance(triplets, tuple) and len(triplets) == 3 and np.ndim(triplets[0]) == 1:
        rows, cols, vals = (np.asarray(a) for a in triplets)
    else:
        t = list(triplets)
        rows = np.array([r for r, _, _ in t], dtype=np.int64)
        cols = np.array([c for _, c, _ in t], dtype=np.int64)
        vals = np.array([v for _, _, v in t], dtype=float)
    rows = rows.astype(np.int64, copy=False)
    cols = cols.astype(np.int64, copy=False)
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
        raise IndexError(f"triplet index out of range for a {n_rows}x{n_cols} matrix")
    # sort by (row, col, value) so floating-point summation order is fixed
    order = np.lexsort((vals, cols, rows))
    rows, cols, vals = rows[order], cols[order], np.asarray(vals, dtype=float)[order]
    key = rows * n_cols + cols
    uniq, start = np.unique(key, return_index=True)
    summed = np.add.reduceat(vals, start) if vals.size else vals
    A = sp.csr_matrix((summed, (uniq // n_cols, uniq % n_cols)), shape=(n_rows, n_cols))
    A.sort_indices()
    return A


def matvec(A: SparseMat, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (A.shape[1],):
        raise ValueError(f"dimension mismatch: matrix {A.shape} times vector {x.shape}")
    return A @ x


class LUFactor:
    """Reusable sparse LU factorization.

    Without ``perm``: SuperLU with COLAMD column ordering and partial
    pivoting. With ``perm`` (a fill-reducing symmetric ordering, new -> old),
    the permuted matrix is factored with diagonal pivoting preferred, which
    keeps the ordering intact; ``A`` may then already be given in permuted
    form by passing ``permuted=True``.
    """

    def __init__(self, A, perm=None, permuted=False):
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.perm = None if perm is None else np.asarray(perm)
        if self.perm is not None and not permuted:
            A = sp.csr_matrix(A)[self.perm][:, self.perm]
        A = sp.csc_matrix(A)
        self.A = A
        try:
            if self.perm is None:
                self._lu = spla.splu(A, permc_spec="COLAMD")
            else:
                self._lu = spla.splu(A, permc_spec="NATURAL", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise SingularMatrixError(f"matrix is singular: {exc}", _find_zero_pivot(A)) from exc

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.A.shape[0]:
            raise ValueError(f"dimension mismatch: matrix {self.A.shape}, rhs {b.shape}")
        if self.perm is None:
            return self._lu.solve(b)
        x = np.empty_like(b)
        x[self.perm] = self._lu.solve(b[self.perm])
        return x


def nested_dissection(graph, block: int = 1) -> np.ndarray:
    """METIS nested-dissection ordering (new -> old) of a symmetric sparsity graph.

    With ``block > 1`` the unknowns are taken as ``block`` stacked copies of
    the graph's nodes (field-major); all copies of a node stay adjacent.
    """
    G = sp.csr_matrix(graph, copy=True)
    G.setdiag(0)
    G.eliminate_zeros()
    # first array maps new -> old position
    perm, _ = pymetis.nested_dissection(pymetis.CSRAdjacency(G.indptr, G.indices))
    order = np.asarray(perm, dtype=np.int64)
    n = G.shape[0]
    return (order[:, None] + n * np.arange(block)[None, :]).ravel()


def _find_zero_pivot(A, max_dense=4000):
    """Index of the first vanishing pivot of a dense partially pivoted LU, if affordable."""
    if A.shape[0] > max_dense:
        return None
    _, _, U = scipy.linalg.lu(A.toarray())
    d = np.abs(np.diag(U))
    tol = np.finfo(float).eps * max(d.max(initial=0.0), 1.0) * A.shape[0]
    hits = np.flatnonzero(d <= tol)
    return int(hits[0]) if hits.size else None


def solve_direct(A, b, check: bool = True, perm=None) -> np.ndarray:
    """Solve A x = b by sparse LU; verifies the relative residual when ``check``.

    If a diagonally pivoted solve along ``perm`` misses the residual bound,
    the system is re-solved with partial pivoting before giving up.
    """
    x = LUFactor(A, perm).solve(b)
    if check and perm is not None and not _residual_ok(A, x, b):
        x = LUFactor(A).solve(b)
    if check:
        if not _residual_ok(A, x, b):
            b = np.asarray(b, dtype=float)
            res, nb = np.linalg.norm(A @ x - b), np.linalg.norm(b)
            raise SingularMatrixError(f"relative residual {res / nb:.3e} exceeds {RESIDUAL_TOL:g}; matrix ill-conditioned")
    return x


def _residual_ok(A, x, b, tol=RESIDUAL_TOL):
    b = np.asarray(b, dtype=float)
    return np.linalg.norm(A @ x - b) <= tol * np.linalg.norm(b)


class AssemblyPattern:
    """Precomputed CSR structure for repeated finite-element assembly.

    ``rows`` and ``cols`` are index arrays of equal shape; ``assemble(vals)``
    sums values sharing a (row, col) position in array order, so repeated
    assembly is bit-reproducible and skips the sort done by ``from_triplets``.
    """

    def __init__(self, n_rows, n_cols, rows, cols, fmt="csr"):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        self.shape = (n_rows, n_cols)
        self.fmt = fmt
        if fmt == "csc":
            rows, cols, n_rows, n_cols = cols, rows, n_cols, n_rows
        elif fmt != "csr":
            raise ValueError(f"fmt must be 'csr' or 'csc' (got {fmt!r})")
        uniq, self.inverse = np.unique(rows * n_cols + cols, return_inverse=True)
        self.nnz = len(uniq)
        r = uniq // n_cols
        self.indices = (uniq % n_cols).astype(np.int32)
        self.indptr = np.searchsorted(r, np.arange(n_rows + 1)).astype(np.int32)

    def assemble(self, vals):
        data = np.bincount(self.inverse, weights=np.ravel(vals), minlength=self.nnz)
        cls = sp.csc_matrix if self.fmt == "csc" else sp.csr_matrix
        return cls((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)
