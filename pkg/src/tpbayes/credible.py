"""Pointwise, L2 and sup-norm credible sets for ``D^r f``.

All Monte Carlo quantities are built from coefficient-space draws
``U^{-1} z`` with ``z ~ N(0, I_J)``, mapped to the evaluation grid through the
lifted basis.  Draw ``j`` therefore depends only on the generator state, not
on the grid or the level, which gives common random numbers across levels and
grid resolutions for free.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import InsufficientSamplesWarning, NoiseModeError, ParameterError
from .posterior import HierarchicalIG, PosteriorState, sigma_posterior
from .splinebasis import BasisSpec

EB = "eb"
HIERARCHICAL = "hierarchical"
MODES = (EB, HIERARCHICAL)

DEFAULT_MC_SAMPLES = 2000
DEFAULT_POINTS_PER_SPAN = 8
_BATCH = 256


def normal_upper_quantile(delta):
    """``z_delta``, the ``(1 - delta)``-quantile of the standard normal."""
    return special.ndtri(1.0 - np.asarray(delta, dtype=float))


def t_quantile(p, df):
    return special.stdtrit(df, p)


def pointwise_gamma(n: int) -> float:
    """Level schedule ``gamma_n = 5 / n`` for pointwise intervals."""
    return min(5.0 / n, 0.5)


def inflation(n: int, rho: float = 1.0, schedule: str = "constant") -> float:
    """Band inflation factor; ``'loglog'`` grows slowly without bound."""
    if schedule == "constant":
        return rho
    if schedule == "loglog":
        return rho * max(1.0, math.log(max(math.log(n), 1.0)))
    raise ParameterError(f"unknown inflation schedule {schedule!r}")


@dataclass(frozen=True)
class Grid:
    """Tensor grid on ``[0, 1]^d`` with trapezoid weights."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0) or a[0] < 0 or a[-1] > 1:
                raise ParameterError("grid axes must be increasing 1-d arrays inside [0, 1] with >= 2 points")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def equispaced(cls, d: int, m: int):
        return cls(tuple(np.linspace(0.0, 1.0, m) for _ in range(d)))

    @classmethod
    def for_basis(cls, spec: BasisSpec, per_span: int = DEFAULT_POINTS_PER_SPAN):
        """``per_span`` points per knot span on every axis, knots included."""
        axes = []
        for kv in spec.axes:
            bp = kv.breakpoints
            pts = [np.linspace(a, b, per_span + 1)[:-1] for a, b in zip(bp[:-1], bp[1:])]
            axes.append(np.concatenate(pts + [[1.0]]))
        return cls(tuple(axes))

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def weights(self) -> np.ndarray:
        w = np.ones(1)
        for a in self.axes:
            h = np.diff(a)
            wk = np.zeros(a.size)
            wk[:-1] += h / 2
            wk[1:] += h / 2
            w = np.outer(w, wk).ravel()
        return w

    def points_per_span(self, spec: BasisSpec) -> int:
        """Smallest number of grid points falling in any knot span."""
        worst = np.inf
        for a, kv in zip(self.axes, spec.axes):
            counts = np.histogram(a, bins=kv.breakpoints)[0]
            worst = min(worst, counts.min())
        return int(worst)

    def refined(self) -> "Grid":
        """Midpoints inserted on every axis (twice the resolution)."""
        out = []
        for a in self.axes:
            mid = (a[:-1] + a[1:]) / 2
            out.append(np.sort(np.concatenate((a, mid))))
        return Grid(tuple(out))


def as_grid(spec: BasisSpec, grid) -> Grid:
    if grid is None:
        return Grid.for_basis(spec)
    if isinstance(grid, Grid):
        if grid.d != spec.d:
            raise ParameterError(f"grid has {grid.d} axes, basis has {spec.d}")
        return grid
    if np.ndim(grid) == 0:
        return Grid.equispaced(spec.d, int(grid))
    if spec.d == 1:
        return Grid((np.asarray(grid, dtype=float).ravel(),))
    raise ParameterError("pass a Grid instance for multivariate grids")


@dataclass(frozen=True)
class QuantileEstimate:
    """Empirical quantile with an order-statistic standard error."""

    value: float
    mc_samples: int
    se: float
    level: float


def empirical_quantile(values, level: float) -> QuantileEstimate:
    """Order statistic ``X_(ceil(level * M))``.

    The standard error is half the spread between the order statistics
    ``sqrt(M p (1 - p))`` ranks either side, which estimates
    ``sqrt(p (1 - p) / M) / density`` without a density estimate.
    """
    x = np.sort(np.asarray(values, dtype=float).ravel())
    M = x.size
    if M == 0:
        raise ParameterError("no Monte Carlo values to take a quantile of")
    k = min(max(int(math.ceil(level * M - 1e-9)), 1), M)
    a = max(1, int(math.ceil(math.sqrt(M * level * (1.0 - level)))))
    lo, hi = max(k - 1 - a, 0), min(k - 1 + a, M - 1)
    se = (x[hi] - x[lo]) / 2.0
    return QuantileEstimate(float(x[k - 1]), M, float(se), float(level))


def scaled_quantile(norms, level: float, sigmas=None) -> QuantileEstimate:
    """Quantile of ``sigma_j * norms_j`` (plain quantile when ``sigmas`` is None)."""
    norms = np.asarray(norms, dtype=float)
    if sigmas is not None:
        norms = norms * np.asarray(sigmas, dtype=float)
    return empirical_quantile(norms, level)


@dataclass
class CredibleSet:
    kind: str
    level: float
    mode: str
    center: np.ndarray
    radius: float | np.ndarray
    grid: object
    r: tuple
    rho: float = 1.0
    mc_samples: int = 0
    quantile: QuantileEstimate | None = None
    weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def points(self) -> np.ndarray:
        return self.grid.points if isinstance(self.grid, Grid) else np.asarray(self.grid)

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.radius

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.radius


def _check_mode(state: PosteriorState, mode: str) -> None:
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == HIERARCHICAL and not isinstance(state.prior.noise, HierarchicalIG):
        raise NoiseModeError("hierarchical credible sets need a HierarchicalIG noise prior")


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise ParameterError(f"credibility parameter gamma must lie in (0, 1), got {gamma}")


def pointwise_interval(state: PosteriorState, r, x, gamma: float, mode: str = EB,
                       method: str = "exact", mc_samples: int = DEFAULT_MC_SAMPLES, rng=None) -> CredibleSet:
    """``(1 - gamma)`` credible interval for ``D^r f`` at each point of ``x``.

    Empirical Bayes: ``center +/- z_{gamma/2} sigma_hat sqrt(Sigma_r(x, x))``.
    Hierarchical with the inverse-gamma prior: the marginal posterior of
    ``D^r f(x)`` is a scaled t with ``2 * shape`` degrees of freedom and
    scale ``sqrt(rate / shape * Sigma_r(x, x))`` (``method='exact'``), or the
    quantile is found by drawing ``sigma`` first (``method='mc'``).
    """
    _check_gamma(gamma)
    _check_mode(state, mode)
    pts = np.asarray(x, dtype=float)
    center = state.mean(r, pts)
    var = np.maximum(state.variance(r, pts), 0.0)
    quant = None
    if mode == EB:
        radius = normal_upper_quantile(gamma / 2) * state.plugin_sigma * np.sqrt(var)
    elif method == "exact":
        post = sigma_posterior(state)
        scale = np.sqrt(post.rate / post.shape * var)
        radius = t_quantile(1.0 - gamma / 2, 2.0 * post.shape) * scale
    elif method == "mc":
        if rng is None:
            raise ParameterError("Monte Carlo cut-offs need a random generator")
        sig = sigma_posterior(state).draw_sigma(rng, mc_samples)
        z = np.abs(rng.standard_normal(mc_samples))
        base = empirical_quantile(sig * z, 1.0 - gamma)
        radius = base.value * np.sqrt(var)
        quant = base
    else:
        raise ParameterError(f"unknown method {method!r}")
    return CredibleSet("pointwise", 1.0 - gamma, mode, center, radius, pts, _r(state, r),
                       mc_samples=mc_samples if method == "mc" else 0, quantile=quant)


def _r(state, r):
    return tuple(int(v) for v in np.atleast_1d(r)) if r is not None else (0,) * state.spec.d


def centered_norms(state: PosteriorState, r, grid, mc_samples: int, rng: np.random.Generator,
                   partitions: int = 1, threads: int = 1):
    """Sup and L2 norms of ``mc_samples`` draws of ``GP(0, Sigma_r)`` on ``grid``.

    With ``partitions > 1`` the draws come from ``rng.spawn(partitions)``
    child streams, so results depend on the master generator and the
    partition count but not on ``threads``.
    """
    grid = as_grid(state.spec, grid)
    lifted = state.lifted(r, grid.points).to_csr()
    w = grid.weights
    counts = [mc_samples // partitions + (1 if i < mc_samples % partitions else 0) for i in range(partitions)]
    streams = [rng] if partitions == 1 else rng.spawn(partitions)

    def work(args):
        gen, count = args
        sups, l2s = [], []
        for lo in range(0, count, _BATCH):
            k = min(_BATCH, count - lo)
            vals = lifted @ state.chol.solve_upper(gen.standard_normal((state.spec.size, k)))
            sups.append(np.abs(vals).max(axis=0))
            l2s.append(np.sqrt(w @ vals**2))
        if not sups:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(sups), np.concatenate(l2s)

    jobs = list(zip(streams, counts))
    if threads > 1 and partitions > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, jobs))
    else:
        parts = [work(j) for j in jobs]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _sigma_draws(state, mode, rng, size):
    if mode == EB:
        return None
    return sigma_posterior(state).draw_sigma(rng, size)


def l2_radius(state: PosteriorState, r, gamma: float, mode: str = EB, grid=None,
              mc_samples: int = DEFAULT_MC_SAMPLES, rng=None, partitions: int = 1, threads: int = 1) -> QuantileEstimate:
    """Radius of the ``(1 - gamma)`` L2 credible ball around the posterior mean."""
    _check_gamma(gamma)
    _check_mode(state, mode)
    grid = as_grid(state.spec, grid)
    if grid.points_per_span(state.spec) < 4:
        raise ParameterError("grid must place at least 4 points in every knot span")
    if mc_samples < 50 / gamma:
        warnings.warn(f"{mc_samples} draws are few for a {1 - gamma:.4g} quantile (want >= {math.ceil(50 / gamma)})",
                      InsufficientSamplesWarning, stacklevel=2)
    rng = np.random.default_rng() if rng is None else rng
    _, l2 = centered_norms(state, r, grid, mc_samples, rng, partitions, threads)
    sig = _sigma_draws(state, mode, rng, mc_samples)
    q = scaled_quantile(l2, 1.0 - gamma, sig)
    if mode == EB:
        s = state.plugin_sigma
        q = QuantileEstimate(q.value * s, q.mc_samples, q.se * s, q.level)
    return q


def l2_ball(state: PosteriorState, r, gamma: float, mode: str = EB, grid=None,
            mc_samples: int = DEFAULT_MC_SAMPLES, rng=None, **kw) -> CredibleSet:
    grid = as_grid(state.spec, grid)
    q = l2_radius(state, r, gamma, mode, grid, mc_samples, rng, **kw)
    return CredibleSet("l2", 1.0 - gamma, mode, state.mean(r, grid.points), q.value, grid, _r(state, r),
                       mc_samples=mc_samples, quantile=q, weights=grid.weights)


def sup_band(state: PosteriorState, r, gamma: float, rho: float = 1.0, mode: str = EB, grid=None,
             mc_samples: int = DEFAULT_MC_SAMPLES, rng=None, gaussian_errors: bool = True,
             partitions: int = 1, threads: int = 1) -> CredibleSet:
    """Inflated sup-norm credible band ``center +/- rho * sigma_hat * h``.

    ``h`` is the empirical ``(1 - gamma)``-quantile of ``max_grid |GP(0, Sigma_r)|``.
    In hierarchical mode the half-width is ``rho`` times the quantile of
    ``sigma_j * max_grid |draw_j|`` with ``sigma_j`` from its posterior.

    Raises
    ------
    ParameterError
        If ``gamma >= 1/2`` (coverage is only guaranteed for ``gamma < 1/2``)
        or ``rho < 1`` without Gaussian errors.
    """
    if not 0.0 < gamma < 0.5:
        raise ParameterError(f"sup-norm bands require 0 < gamma < 1/2, got {gamma}")
    if rho <= 0 or (rho < 1.0 and not gaussian_errors):
        raise ParameterError(f"inflation rho={rho} is below 1; only allowed with Gaussian errors")
    _check_mode(state, mode)
    grid = as_grid(state.spec, grid)
    rng = np.random.default_rng() if rng is None else rng
    sups, _ = centered_norms(state, r, grid, mc_samples, rng, partitions, threads)
    sig = _sigma_draws(state, mode, rng, mc_samples)
    q = scaled_quantile(sups, 1.0 - gamma, sig)
    scale = rho * (state.plugin_sigma if mode == EB else 1.0)
    center = state.mean(r, grid.points)
    return CredibleSet("sup", 1.0 - gamma, mode, center, scale * q.value, grid, _r(state, r), rho=rho,
                       mc_samples=mc_samples, quantile=q)


def contains(cset: CredibleSet, f_true) -> tuple:
    """Whether ``f_true`` (evaluated on the set's grid) lies in the set.

    Returns ``(contained, max_violation)`` where the violation is how far the
    relevant distance exceeds the radius (0 when contained).
    """
    f_true = np.asarray(f_true, dtype=float)
    if f_true.shape != np.shape(cset.center):
        raise ParameterError(f"reference has shape {f_true.shape}, set grid has {np.shape(cset.center)}")
    diff = np.abs(f_true - cset.center)
    if cset.kind == "pointwise":
        excess = float(np.max(diff - cset.radius)) if diff.size else 0.0
    elif cset.kind == "sup":
        excess = float(diff.max() - cset.radius)
    elif cset.kind == "l2":
        excess = float(math.sqrt(cset.weights @ diff**2) - cset.radius)
    else:
        raise ParameterError(f"unknown credible set kind {cset.kind!r}")
    return excess <= 0.0, max(excess, 0.0)


def covered_points(cset: CredibleSet, f_true) -> np.ndarray:
    """Per-point containment for pointwise sets."""
    return np.abs(np.asarray(f_true) - cset.center) <= cset.radius
