"""Knot sequences and univariate / tensor-product B-spline bases.

Conventions used throughout the package:

* basis functions are indexed from 0; an axis of order ``q`` with ``N`` interior
  knots has ``J = q + N`` functions on the full extended knot sequence;
* multi-indices are flattened lexicographically with the *last* axis varying
  fastest (numpy C order), see :func:`flat_index`;
* the "lower-order" basis of order ``q - r`` used for derivatives keeps the
  ``J - r`` functions ``r, ..., J - 1`` of the order ``q - r`` family built on
  the same extended knots; the other ``r`` functions vanish on ``[0, 1]``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, ParameterError

CLAMPED = "clamped"
OPEN = "open"
SCHEMES = (CLAMPED, OPEN)


@dataclass(frozen=True)
class KnotVector:
    """Knot sequence for one coordinate axis.

    Parameters
    ----------
    order : int
        Spline order ``q`` (degree ``q - 1``).
    interior_knots : tuple of float
        Strictly increasing knots inside ``(0, 1)``.
    scheme : {'clamped', 'open'}
        ``'clamped'`` repeats 0 and 1 ``q`` times; ``'open'`` keeps 0 and 1
        simple and continues the boundary spacing with ``q - 1`` exterior knots
        on each side.
    """

    order: int
    interior_knots: tuple = ()
    scheme: str = CLAMPED

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise ParameterError(f"spline order must be an integer >= 1, got {self.order!r}")
        if self.scheme not in SCHEMES:
            raise ParameterError(f"unknown boundary scheme {self.scheme!r}; expected one of {SCHEMES}")
        knots = tuple(float(t) for t in self.interior_knots)
        arr = np.asarray(knots, dtype=float)
        if arr.size and (not np.all(np.isfinite(arr)) or arr[0] <= 0.0 or arr[-1] >= 1.0):
            raise ParameterError("interior knots must lie strictly inside (0, 1)")
        if arr.size > 1 and np.any(np.diff(arr) <= 0.0):
            raise ParameterError("interior knots must be strictly increasing")
        object.__setattr__(self, "order", int(self.order))
        object.__setattr__(self, "interior_knots", knots)

    @property
    def n_interior(self) -> int:
        return len(self.interior_knots)

    @property
    def n_basis(self) -> int:
        """Number of basis functions ``J = q + N``."""
        return self.order + self.n_interior

    @cached_property
    def breakpoints(self) -> np.ndarray:
        """``0, t_1, ..., t_N, 1``."""
        return np.concatenate(([0.0], self.interior_knots, [1.0]))

    @cached_property
    def spans(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def mesh_size(self) -> float:
        return float(self.spans.max())

    @property
    def quasi_uniformity_ratio(self) -> float:
        """Largest over smallest knot span inside ``[0, 1]``."""
        return float(self.spans.max() / self.spans.min())

    @cached_property
    def full_sequence(self) -> np.ndarray:
        q = self.order
        inner = self.breakpoints
        if self.scheme == CLAMPED:
            seq = np.concatenate((np.zeros(q - 1), inner, np.ones(q - 1)))
        else:
            left_step, right_step = self.spans[0], self.spans[-1]
            left = -left_step * np.arange(q - 1, 0, -1)
            right = 1.0 + right_step * np.arange(1, q)
            seq = np.concatenate((left, inner, right))
        seq.setflags(write=False)
        return seq

    def to_dict(self) -> dict:
        return {"order": self.order, "interior_knots": list(self.interior_knots), "scheme": self.scheme}

    @classmethod
    def from_dict(cls, payload: dict) -> "KnotVector":
        return cls(int(payload["order"]), tuple(payload.get("interior_knots", ())), payload.get("scheme", CLAMPED))


def make_knots(q: int, N: int, scheme: str = CLAMPED) -> KnotVector:
    """Uniform knots ``t_l = l / (N + 1)``, ``l = 1..N``.

    Each knot is computed from its index rather than by accumulation so the
    sequence carries no drift.

    >>> make_knots(4, 3).full_sequence.tolist()
    [0.0, 0.0, 0.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.0, 1.0, 1.0]
    """
    if int(N) != N or N < 0:
        raise ParameterError(f"number of interior knots must be an integer >= 0, got {N!r}")
    if int(q) != q or q < 1:
        raise ParameterError(f"spline order must be an integer >= 1, got {q!r}")
    N = int(N)
    interior = tuple(l / (N + 1) for l in range(1, N + 1))
    return KnotVector(int(q), interior, scheme)


@dataclass(frozen=True)
class BasisSpec:
    """Tensor-product B-spline dictionary on ``[0, 1]^d``."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(self.axes)
        if not axes:
            raise ParameterError("a basis needs at least one axis")
        for kv in axes:
            if not isinstance(kv, KnotVector):
                raise ParameterError("axes must be KnotVector instances")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, q: Sequence[int] | int, N: Sequence[int] | int, scheme: str = CLAMPED, d: int | None = None):
        """Uniform knots on every axis; scalars are broadcast to ``d`` axes."""
        if d is None:
            d = max(len(q) if np.ndim(q) else 1, len(N) if np.ndim(N) else 1)
        qs = [q] * d if np.ndim(q) == 0 else list(q)
        Ns = [N] * d if np.ndim(N) == 0 else list(N)
        if len(qs) != d or len(Ns) != d:
            raise ParameterError("orders and knot counts must have one entry per axis")
        return cls(tuple(make_knots(qk, Nk, scheme) for qk, Nk in zip(qs, Ns)))

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def q(self) -> tuple:
        return tuple(kv.order for kv in self.axes)

    @property
    def J(self) -> tuple:
        return tuple(kv.n_basis for kv in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.J))

    def lowered_dims(self, r) -> tuple:
        r = check_deriv_drop(self, r)
        return tuple(J - rk for J, rk in zip(self.J, r))

    def to_dict(self) -> dict:
        return {"axes": [kv.to_dict() for kv in self.axes]}

    @classmethod
    def from_dict(cls, payload: dict) -> "BasisSpec":
        return cls(tuple(KnotVector.from_dict(a) for a in payload["axes"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def check_deriv_drop(spec: BasisSpec, r) -> tuple:
    if r is None:
        return (0,) * spec.d
    if np.ndim(r) == 0:
        return check_deriv_drop(spec, (int(r),) * spec.d)
    r = tuple(int(v) for v in np.atleast_1d(r))
    if len(r) != spec.d:
        raise ParameterError(f"derivative vector has {len(r)} entries for a {spec.d}-dimensional basis")
    if any(v < 0 for v in r):
        raise ParameterError("derivative orders must be nonnegative")
    return r


def flat_index(coords, dims) -> np.ndarray:
    """Lexicographic flattening, last axis fastest."""
    return np.ravel_multi_index(tuple(np.asarray(coords).T), dims)


def multi_index(flat, dims) -> np.ndarray:
    """Inverse of :func:`flat_index`; returns an ``(..., d)`` integer array."""
    return np.stack(np.unravel_index(flat, dims), axis=-1)


def _check_unit_interval(x: np.ndarray, what: str = "x") -> None:
    bad = ~((x >= 0.0) & (x <= 1.0))
    if np.any(bad):
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise DomainError(f"{what}[{idx}] = {x.ravel()[idx]!r} lies outside [0, 1]", index=idx)


def find_spans(kv: KnotVector, x: np.ndarray) -> np.ndarray:
    """Index ``mu`` with ``t[mu] <= x < t[mu + 1]``; the last span is closed at 1."""
    t = kv.full_sequence
    q, J = kv.order, kv.n_basis
    mu = np.searchsorted(t, x, side="right") - 1
    return np.clip(mu, q - 1, J - 1)


def _cox_de_boor(t: np.ndarray, mu: np.ndarray, x: np.ndarray, order: int) -> np.ndarray:
    # triangular scheme, vectorized over points; row a holds B_{mu-order+1+a}
    m = x.shape[0]
    N = np.zeros((m, order))
    N[:, 0] = 1.0
    left = np.zeros((m, order))
    right = np.zeros((m, order))
    for j in range(1, order):
        left[:, j] = x - t[mu + 1 - j]
        right[:, j] = t[mu + j] - x
        saved = np.zeros(m)
        for k in range(j):
            temp = N[:, k] / (right[:, k + 1] + left[:, j - k])
            N[:, k] = saved + right[:, k + 1] * temp
            saved = left[:, j - k] * temp
        N[:, j] = saved
    return N


def axis_basis(kv: KnotVector, x, deriv_drop: int = 0):
    """Vectorized :func:`eval_axis_basis`; returns ``(starts, values)`` with
    ``values`` of shape ``(m, q - deriv_drop)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        raise ParameterError("expected a one-dimensional array of coordinates")
    if not 0 <= deriv_drop < kv.order:
        raise ParameterError(f"derivative drop {deriv_drop} must satisfy 0 <= r < q = {kv.order}")
    _check_unit_interval(x)
    mu = find_spans(kv, x)
    values = _cox_de_boor(kv.full_sequence, mu, x, kv.order - deriv_drop)
    return mu - kv.order + 1, values


def eval_axis_basis(kv: KnotVector, x: float, deriv_drop: int = 0):
    """Nonzero order ``q - r`` B-splines at a single coordinate.

    Returns
    -------
    start : int
        Index (within the retained ``J - r`` lower-order functions) of the
        first active function.
    values : numpy.ndarray, shape (q - r,)
    """
    if np.ndim(x) != 0:
        raise ParameterError("eval_axis_basis takes a scalar coordinate; use axis_basis for arrays")
    starts, values = axis_basis(kv, [x], deriv_drop)
    return int(starts[0]), values[0]


@dataclass(frozen=True)
class SparseBasisVector:
    """Active block of a tensor basis vector at one point."""

    start: tuple
    values: np.ndarray
    dims: tuple

    @property
    def block_shape(self) -> tuple:
        return self.values.shape

    def flat_indices(self) -> np.ndarray:
        offsets = np.indices(self.values.shape).reshape(len(self.dims), -1).T
        return flat_index(np.asarray(self.start) + offsets, self.dims)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(int(np.prod(self.dims)))
        out[self.flat_indices()] = self.values.ravel()
        return out


@dataclass
class SparseRows:
    """Matrix whose rows each carry one dense tensor block.

    ``starts[i]`` is the multi-index of the first entry of row ``i``'s block
    and ``values[i]`` the flattened block (last axis fastest).
    """

    starts: np.ndarray
    values: np.ndarray
    block: tuple
    dims: tuple
    _cols: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple:
        return (self.starts.shape[0], int(np.prod(self.dims)))

    @property
    def n_rows(self) -> int:
        return self.starts.shape[0]

    @property
    def columns(self) -> np.ndarray:
        if self._cols is None:
            d = len(self.dims)
            offsets = np.indices(self.block).reshape(d, -1)
            strides = _strides(self.dims)
            base = self.starts @ strides
            self._cols = base[:, None] + (strides @ offsets)[None, :]
        return self._cols

    def matvec(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[0] != self.shape[1]:
            raise ParameterError(f"coefficient length {theta.shape[0]} != basis size {self.shape[1]}")
        if theta.ndim == 1:
            return np.einsum("ij,ij->i", self.values, theta[self.columns])
        return np.einsum("ij,ijk->ik", self.values, theta[self.columns])

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.n_rows:
            raise ParameterError(f"vector length {y.shape[0]} != row count {self.n_rows}")
        return np.bincount(self.columns.ravel(), (self.values * y[:, None]).ravel(), minlength=self.shape[1])

    def to_csr(self) -> sp.csr_matrix:
        m, P = self.values.shape
        indptr = np.arange(0, m * P + 1, P)
        return sp.csr_matrix((self.values.ravel(), self.columns.ravel(), indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()

    def row(self, i: int) -> SparseBasisVector:
        return SparseBasisVector(tuple(int(s) for s in self.starts[i]), self.values[i].reshape(self.block), self.dims)

    def subset(self, idx) -> "SparseRows":
        return SparseRows(self.starts[idx], self.values[idx], self.block, self.dims)


def _strides(dims) -> np.ndarray:
    return np.array([int(np.prod(dims[k + 1:])) for k in range(len(dims))], dtype=np.int64)


def outer_blocks(blocks: list) -> np.ndarray:
    """Row-wise outer product of per-axis ``(m, p_k)`` blocks, last axis fastest."""
    out = blocks[0]
    for b in blocks[1:]:
        out = (out[:, :, None] * b[:, None, :]).reshape(out.shape[0], -1)
    return out


def as_points(spec: BasisSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X[:, None] if spec.d == 1 else X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.d:
        raise ParameterError(f"points must have {spec.d} coordinates, got array of shape {np.shape(X)}")
    return X


def tensor_basis(spec: BasisSpec, X, r=None) -> SparseRows:
    """Tensor basis of orders ``q - r`` at every row of ``X`` (shape ``(m, d)``)."""
    r = check_deriv_drop(spec, r)
    X = as_points(spec, X)
    starts, blocks = [], []
    for k, kv in enumerate(spec.axes):
        try:
            s, v = axis_basis(kv, X[:, k], r[k])
        except DomainError as exc:
            raise DomainError(f"point {exc.index} has coordinate {k} outside [0, 1]", index=exc.index) from None
        starts.append(s)
        blocks.append(v)
    block = tuple(q - rk for q, rk in zip(spec.q, r))
    return SparseRows(np.stack(starts, axis=1), outer_blocks(blocks), block, spec.lowered_dims(r))


def eval_tensor_basis(spec: BasisSpec, x, r=None) -> SparseBasisVector:
    """Active block of ``b_{J, q - r}(x)`` at a single point."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != spec.d:
        raise ParameterError(f"point has {x.shape[0]} coordinates, basis has {spec.d} axes")
    return tensor_basis(spec, x[None, :], r).row(0)
