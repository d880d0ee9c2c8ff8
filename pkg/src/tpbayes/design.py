"""Design matrix, multi-index banded Gram matrices and their Cholesky factors.

Symmetric matrices indexed by multi-indices are stored in LAPACK upper band
format.  Under the lexicographic flattening (last axis fastest) a per-axis
band ``h`` maps to a flat envelope of half-width
``w = sum_k h_k * stride_k``, so the profile has constant width and the band
routines of LAPACK factor it at ``O(J w^2)`` cost.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import lapack

from .errors import DataError, FactorizationError, ParameterError
from .splinebasis import BasisSpec, SparseRows, _strides, tensor_basis


@dataclass
class DesignMatrix:
    """``B`` with one dense ``prod(q_k)`` block per observation."""

    spec: BasisSpec
    rows: SparseRows

    @property
    def n(self) -> int:
        return self.rows.n_rows

    @property
    def shape(self) -> tuple:
        return self.rows.shape

    def matvec(self, theta):
        return self.rows.matvec(theta)

    def rmatvec(self, y):
        return self.rows.rmatvec(y)

    def to_dense(self) -> np.ndarray:
        return self.rows.to_dense()


def build_design(spec: BasisSpec, X) -> DesignMatrix:
    """Rows ``b_{J,q}(X_i)``; raises :class:`DomainError` naming the first bad row."""
    return DesignMatrix(spec, tensor_basis(spec, X))


def flat_bandwidth(dims, h) -> int:
    return int(np.dot(_strides(dims), h))


class BandedSymMatrix:
    """Symmetric matrix that is ``h``-banded in the multi-index sense.

    Parameters
    ----------
    dims : tuple of int
        Index counts ``(J_1, ..., J_d)``.
    h : tuple of int
        Per-axis bandwidths.
    ab : numpy.ndarray, shape (w + 1, J)
        Upper band storage, ``ab[w + i - j, j] = A[i, j]`` for ``i <= j``.
    """

    def __init__(self, dims, h, ab=None):
        self.dims = tuple(int(v) for v in dims)
        self.h = tuple(int(v) for v in h)
        if len(self.h) != len(self.dims):
            raise ParameterError("bandwidth vector must have one entry per axis")
        self.size = int(np.prod(self.dims))
        self.w = min(flat_bandwidth(self.dims, self.h), self.size - 1)
        if ab is None:
            ab = np.zeros((self.w + 1, self.size))
        ab = np.asarray(ab, dtype=float)
        if ab.shape != (self.w + 1, self.size):
            raise ParameterError(f"band storage has shape {ab.shape}, expected {(self.w + 1, self.size)}")
        self.ab = ab

    def __repr__(self):
        return f"BandedSymMatrix(dims={self.dims}, h={self.h}, w={self.w})"

    @classmethod
    def identity(cls, dims, scale: float = 1.0):
        m = cls(dims, (0,) * len(dims))
        m.ab[-1, :] = scale
        return m

    @classmethod
    def zeros(cls, dims):
        return cls(dims, (0,) * len(dims))

    @classmethod
    def from_dense(cls, A, dims, h):
        A = np.asarray(A, dtype=float)
        out = cls(dims, h)
        J, w = out.size, out.w
        if A.shape != (J, J):
            raise ParameterError(f"matrix has shape {A.shape}, expected {(J, J)}")
        if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise ParameterError("matrix is not symmetric")
        if np.any(A[~out.band_mask()] != 0.0):
            raise ParameterError(f"matrix is not {out.h}-banded")
        for k in range(w + 1):
            out.ab[w - k, k:] = np.diagonal(A, k)
        return out

    @classmethod
    def kron(cls, axis_mats):
        """Kronecker product of per-axis symmetric banded matrices (dense inputs)."""
        dims, h = [], []
        full = np.ones((1, 1))
        for M in axis_mats:
            M = np.asarray(M, dtype=float)
            nz = np.argwhere(M != 0)
            dims.append(M.shape[0])
            h.append(int(np.abs(nz[:, 0] - nz[:, 1]).max()) if nz.size else 0)
            full = np.kron(full, M)
        return cls.from_dense(full, dims, h)

    def band_mask(self) -> np.ndarray:
        """Boolean ``J x J`` mask of positions allowed by the multi-band."""
        idx = np.indices(self.dims).reshape(len(self.dims), -1)
        ok = np.ones((self.size, self.size), dtype=bool)
        for k, hk in enumerate(self.h):
            ok &= np.abs(idx[k][:, None] - idx[k][None, :]) <= hk
        return ok

    def to_dense(self) -> np.ndarray:
        J, w = self.size, self.w
        A = np.zeros((J, J))
        for k in range(w + 1):
            diag = self.ab[w - k, k:]
            A[np.arange(J - k), np.arange(k, J)] = diag
            A[np.arange(k, J), np.arange(J - k)] = diag
        return A

    def diagonal(self) -> np.ndarray:
        return self.ab[-1].copy()

    def trace(self) -> float:
        return float(self.ab[-1].sum())

    def widened(self, h) -> "BandedSymMatrix":
        h = tuple(max(a, b) for a, b in zip(self.h, h))
        out = BandedSymMatrix(self.dims, h)
        out.ab[out.w - self.w:, :] = self.ab
        return out

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        J, w = self.size, self.w
        y = self.ab[w] * x
        for k in range(1, w + 1):
            diag = self.ab[w - k, k:]
            y[:-k] += diag * x[k:]
            y[k:] += diag * x[:-k]
        return y

    def copy(self) -> "BandedSymMatrix":
        return BandedSymMatrix(self.dims, self.h, self.ab.copy())


def gram(B: DesignMatrix) -> BandedSymMatrix:
    """``B^T B`` as a ``q``-banded matrix.

    Each stored entry is an exactly rounded sum (``math.fsum``) of its
    per-observation products.
    """
    spec = B.spec
    out = BandedSymMatrix(spec.J, spec.q)
    J, w = out.size, out.w
    cols, vals = B.rows.columns, B.rows.values
    if B.n == 0:
        return out
    P = cols.shape[1]
    a, b = np.triu_indices(P)
    ca, cb = cols[:, a], cols[:, b]
    lo, hi = np.minimum(ca, cb), np.maximum(ca, cb)
    key = ((w + lo - hi) * J + hi).ravel()
    prod = (vals[:, a] * vals[:, b]).ravel()
    order = np.argsort(key, kind="stable")
    key, prod = key[order], prod[order]
    uniq, first = np.unique(key, return_index=True)
    sums = [math.fsum(chunk) for chunk in np.split(prod, first[1:])]
    out.ab[uniq // J, uniq % J] = sums
    return out


def add_prior_precision(G: BandedSymMatrix, omega_inv: BandedSymMatrix) -> BandedSymMatrix:
    """``B^T B + Omega^{-1}`` with per-axis band ``max(h_G, h_Omega)``."""
    if G.dims != omega_inv.dims:
        raise ParameterError(f"size mismatch: Gram dims {G.dims} vs prior precision dims {omega_inv.dims}")
    out = G.widened(omega_inv.h)
    out.ab[out.w - omega_inv.w:, :] += omega_inv.ab
    return out


class BandedCholesky:
    """Upper factor ``U`` with ``P = U^T U`` (``L = U^T``) in band storage."""

    def __init__(self, matrix: BandedSymMatrix, ub: np.ndarray, jitter: float = 0.0):
        self.matrix = matrix
        self.ub = ub
        self.jitter = jitter

    @property
    def size(self) -> int:
        return self.matrix.size

    @property
    def bandwidth(self) -> int:
        return self.matrix.w

    def _as2d(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.size:
            raise ParameterError(f"right-hand side has {rhs.shape[0]} rows, system has {self.size}")
        return rhs.reshape(self.size, -1), rhs.ndim == 1

    def _tb(self, rhs, trans):
        b, vec = self._as2d(rhs)
        x, info = lapack.dtbtrs(self.ub, b, uplo="U", trans=trans)
        if info != 0:
            raise FactorizationError(f"triangular solve failed (info={info})", pivot=info)
        return x[:, 0] if vec else x

    def solve_lower(self, rhs):
        """``L^{-1} rhs = U^{-T} rhs``."""
        return self._tb(rhs, "T")

    def solve_upper(self, rhs):
        """``U^{-1} rhs = L^{-T} rhs``."""
        return self._tb(rhs, "N")

    def solve(self, rhs):
        b, vec = self._as2d(rhs)
        x, info = lapack.dpbtrs(self.ub, b, lower=0)
        if info != 0:
            raise FactorizationError(f"banded solve failed (info={info})", pivot=info)
        return x[:, 0] if vec else x

    def lower_dense(self) -> np.ndarray:
        w, J = self.bandwidth, self.size
        U = np.zeros((J, J))
        for k in range(w + 1):
            U[np.arange(J - k), np.arange(k, J)] = self.ub[w - k, k:]
        return U.T

    def logdet(self) -> float:
        return float(2.0 * np.log(self.ub[-1]).sum())


def factorize(P: BandedSymMatrix, jitter_attempts: int = 0) -> BandedCholesky:
    """Band Cholesky of a symmetric positive definite matrix.

    With ``jitter_attempts > 0`` a failed factorization is retried after adding
    ``1e-10 * trace / J`` (times 10 on each further attempt) to the diagonal.

    Raises
    ------
    FactorizationError
        Carrying the 0-based index of the failing pivot.
    """
    base = 1e-10 * P.trace() / P.size
    jitter = 0.0
    for attempt in range(jitter_attempts + 1):
        ab = P.ab.copy()
        if attempt:
            jitter = base * 10.0 ** (attempt - 1)
            ab[-1] += jitter
        ub, info = lapack.dpbtrf(ab, lower=0)
        if info == 0:
            return BandedCholesky(P, ub, jitter)
        if info < 0:
            raise FactorizationError(f"invalid argument to band Cholesky (info={info})")
    raise FactorizationError(f"matrix is not positive definite: pivot {info - 1} is not positive", pivot=int(info) - 1)


def solve(C: BandedCholesky, rhs):
    return C.solve(rhs)


def empirical_cdf_sup_distance(X) -> float:
    """``sup_x |G_n(x) - prod_k x_k|`` for the empirical CDF of ``X``.

    The supremum of ``G_n - G`` is attained at corners whose coordinates are
    data values; the supremum of ``G - G_n`` is approached from below at the
    same corners (and at 1), so both one-sided versions of ``G_n`` are
    evaluated on the candidate grid.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if d > 3:
        raise ParameterError("exhaustive evaluation is limited to d <= 3")
    cand = [np.union1d(X[:, k], [1.0]) for k in range(d)]
    shape = tuple(len(c) for c in cand)
    pos = tuple(np.searchsorted(cand[k], X[:, k]) for k in range(d))
    counts = np.zeros(shape)
    np.add.at(counts, pos, 1.0)
    closed = counts
    for k in range(d):
        closed = np.cumsum(closed, axis=k)
    closed /= n
    # strictly-below counts at corner c are the closed counts one step back on every axis
    opened = np.pad(closed, [(1, 0)] * d)[tuple(slice(0, s) for s in shape)]
    G = np.ones(shape)
    for k in range(d):
        G = G * cand[k].reshape([-1 if j == k else 1 for j in range(d)])
    return float(max(np.max(closed - G), np.max(G - opened), 0.0))


def read_csv(path, response: str = "y", covariates=None):
    """Load covariates and response from a headed CSV file.

    Returns ``(X, Y, covariate_names)``.  Every covariate must lie in
    ``[0, 1]``; failures raise :class:`DataError` with the 1-based file line.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(row for row in fh if not row.lstrip().startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, a header row is required", line=1) from None
        if response not in header:
            raise DataError(f"{path}: response column {response!r} not found in header {header}", line=1)
        names = list(covariates) if covariates else [h for h in header if h != response]
        missing = [c for c in names if c not in header]
        if missing:
            raise DataError(f"{path}: covariate column(s) {missing} not found in header", line=1)
        if not names:
            raise DataError(f"{path}: no covariate columns", line=1)
        xi = [header.index(c) for c in names]
        yi = header.index(response)
        X, Y = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}", line=line_no)
            try:
                vals = [float(row[i]) for i in xi]
                y = float(row[yi])
            except ValueError:
                raise DataError(f"{path}:{line_no}: non-numeric value in row {row}", line=line_no) from None
            if not all(0.0 <= v <= 1.0 for v in vals):
                raise DataError(f"{path}:{line_no}: covariates must lie in [0, 1], got {vals}", line=line_no)
            if not math.isfinite(y):
                raise DataError(f"{path}:{line_no}: response is not finite", line=line_no)
            X.append(vals)
            Y.append(y)
    return np.array(X, dtype=float).reshape(-1, len(names)), np.array(Y, dtype=float), names
