"""Weighted finite-difference operators for mixed partial derivatives.

For a spline ``f = b_{J,q}(x)^T theta`` the mixed partial ``D^r f`` is again a
spline in the retained lower-order basis, ``b_{J,q-r}(x)^T W_r theta``.  One
differencing step along an axis maps coefficients of an order ``p`` spline to
those of its derivative::

    c'_j = (p - 1) * (c_j - c_{j-1}) / (t_{j+p-1} - t_j)

and ``W_r`` is the Kronecker product of the per-axis ``r_k``-fold iterates.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError, UnsupportedOrderError
from .splinebasis import (
    BasisSpec,
    KnotVector,
    SparseRows,
    as_points,
    axis_basis,
    check_deriv_drop,
    outer_blocks,
)


def axis_difference_weights(kv: KnotVector, r: int) -> np.ndarray:
    """Weights of the ``r``-fold differencing operator on one axis.

    Returns an array of shape ``(J - r, r + 1)``; row ``i`` acts on
    coefficients ``i, ..., i + r``.  A difference whose knot denominator is
    zero (coincident knots) contributes weight 0.
    """
    q, J = kv.order, kv.n_basis
    if r >= q:
        raise UnsupportedOrderError(f"derivative order {r} must be below the spline order {q}")
    t = kv.full_sequence
    w = np.ones((J, 1))
    for u in range(1, r + 1):
        j = np.arange(u, J)
        denom = t[j + q - u] - t[j]
        a = np.zeros_like(denom)
        nz = denom > 0
        a[nz] = (q - u) / denom[nz]
        new = np.zeros((J - u, u + 1))
        new[:, :u] -= a[:, None] * w[:-1]
        new[:, 1:] += a[:, None] * w[1:]
        w = new
    return w


@dataclass(frozen=True)
class DerivOperator:
    """Banded ``prod(J_k - r_k) x prod(J_k)`` operator ``W_r``.

    ``rows.starts[i]`` is the multi-index of the first column touched by row
    ``i`` (equal to the row's own multi-index) and ``rows.values[i]`` the
    ``prod(r_k + 1)`` weights of its block.
    """

    spec: BasisSpec
    r: tuple
    axis_weights: tuple
    rows: SparseRows

    @property
    def shape(self) -> tuple:
        return self.rows.shape

    @property
    def is_identity(self) -> bool:
        return not any(self.r)

    def matvec(self, theta: np.ndarray) -> np.ndarray:
        return self.rows.matvec(theta)

    def to_sparse(self) -> sp.csr_matrix:
        mats = [_axis_matrix(w, kv.n_basis) for w, kv in zip(self.axis_weights, self.spec.axes)]
        out = mats[0]
        for m in mats[1:]:
            out = sp.kron(out, m, format="csr")
        return sp.csr_matrix(out)

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()


def _axis_matrix(w: np.ndarray, J: int) -> sp.csr_matrix:
    m, width = w.shape
    rows = np.repeat(np.arange(m), width)
    cols = (np.arange(m)[:, None] + np.arange(width)[None, :]).ravel()
    return sp.csr_matrix((w.ravel(), (rows, cols)), shape=(m, J))


@lru_cache(maxsize=256)
def _build(spec: BasisSpec, r: tuple) -> DerivOperator:
    weights = tuple(axis_difference_weights(kv, rk) for kv, rk in zip(spec.axes, r))
    row_dims = tuple(J - rk for J, rk in zip(spec.J, r))
    grids = np.indices(row_dims).reshape(spec.d, -1).T
    blocks = [w[grids[:, k]] for k, w in enumerate(weights)]
    rows = SparseRows(grids.astype(np.int64), outer_blocks(blocks), tuple(rk + 1 for rk in r), spec.J)
    for w in weights:
        w.setflags(write=False)
    return DerivOperator(spec, r, weights, rows)


def build_deriv_operator(spec: BasisSpec, r=None) -> DerivOperator:
    """``W_r`` for the given basis; results are cached per ``(spec, r)``."""
    r = check_deriv_drop(spec, r)
    for rk, q in zip(r, spec.q):
        if rk >= q:
            raise UnsupportedOrderError(f"derivative order {r} must be below the spline orders {spec.q}")
    return _build(spec, r)


def lift_basis(spec: BasisSpec, X, r=None) -> SparseRows:
    """Rows ``W_r^T b_{J,q-r}(x)`` for every point of ``X``.

    Each lifted row is supported on the same ``prod(q_k)`` block as the full
    order basis at ``x``, so ``lift_basis(...).matvec(theta)`` evaluates
    ``D^r f`` at cost independent of ``J``.
    """
    Wr = build_deriv_operator(spec, r)
    X = as_points(spec, X)
    starts, blocks = [], []
    for k, kv in enumerate(spec.axes):
        rk = Wr.r[k]
        s, vals = axis_basis(kv, X[:, k], rk)
        if rk == 0:
            blocks.append(vals)
        else:
            w = Wr.axis_weights[k]
            q = kv.order
            lifted = np.zeros((X.shape[0], q))
            for l in range(q - rk):
                # lower function s + l spreads onto columns s + l .. s + l + rk
                lifted[:, l:l + rk + 1] += vals[:, l:l + 1] * w[s + l]
            blocks.append(lifted)
        starts.append(s)
    return SparseRows(np.stack(starts, axis=1), outer_blocks(blocks), spec.q, spec.J)


def eval_derivative(spec: BasisSpec, Wr: DerivOperator, theta, x) -> float | np.ndarray:
    """``D^r f(x) = b_{J,q-r}(x)^T W_r theta`` at one point or many.

    A single point (shape ``(d,)`` or a scalar when ``d == 1``) returns a
    float; an ``(m, d)`` array returns an array of length ``m``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.size,):
        raise ParameterError(f"coefficient vector has length {theta.shape}, expected ({spec.size},)")
    if Wr.spec != spec:
        raise ParameterError("derivative operator was built for a different basis")
    single = np.ndim(x) == 0 or (np.ndim(x) == 1 and spec.d > 1)
    rows = lift_basis(spec, x, Wr.r)
    out = rows.matvec(theta)
    return float(out[0]) if single else out
