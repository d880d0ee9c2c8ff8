"""Conjugate posterior for tensor-spline regression.

Model: ``Y | theta, sigma ~ N(B theta, sigma^2 I)`` and
``theta | sigma ~ N(eta, sigma^2 Omega)``.  Given ``sigma`` the posterior of
``D^r f`` is a Gaussian process with mean ``g_r(x)^T theta_hat`` and covariance
``sigma^2 g_r(x)^T (B^T B + Omega^{-1})^{-1} g_r(y)``, where
``g_r(x) = W_r^T b_{J,q-r}(x)`` is the lifted basis row from
:func:`tpbayes.derivop.lift_basis`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .derivop import lift_basis
from .design import (
    BandedCholesky,
    BandedSymMatrix,
    DesignMatrix,
    add_prior_precision,
    build_design,
    factorize,
    gram,
)
from .errors import NoiseModeError, OverParameterizationError, ParameterError
from .splinebasis import BasisSpec, as_points

FIT_FORMAT = "tpbayes-fit/1"


@dataclass(frozen=True)
class EmpiricalBayes:
    """Plug in the marginal maximum likelihood estimate of ``sigma^2``."""

    kind: str = field(default="empirical_bayes", init=False)


@dataclass(frozen=True)
class HierarchicalIG:
    """``sigma^2 ~ IG(beta1 / 2, beta2 / 2)``."""

    beta1: float
    beta2: float
    kind: str = field(default="hierarchical_ig", init=False)

    def __post_init__(self):
        if not self.beta1 > 4:
            raise ParameterError(f"inverse-gamma prior needs beta1 > 4, got {self.beta1}")
        if not self.beta2 > 0:
            raise ParameterError(f"inverse-gamma prior needs beta2 > 0, got {self.beta2}")


@dataclass(frozen=True)
class FixedSigma:
    """Known noise level, used to isolate the function posterior."""

    sigma: float
    kind: str = field(default="fixed_sigma", init=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"fixed noise level must be positive, got {self.sigma}")


def noise_from_dict(payload: dict):
    kind = payload.get("kind", "empirical_bayes")
    if kind == "empirical_bayes":
        return EmpiricalBayes()
    if kind == "hierarchical_ig":
        return HierarchicalIG(float(payload["beta1"]), float(payload["beta2"]))
    if kind == "fixed_sigma":
        return FixedSigma(float(payload["sigma"]))
    raise ParameterError(f"unknown noise model {kind!r}")


def noise_to_dict(noise) -> dict:
    out = {"kind": noise.kind}
    if isinstance(noise, HierarchicalIG):
        out.update(beta1=noise.beta1, beta2=noise.beta2)
    elif isinstance(noise, FixedSigma):
        out.update(sigma=noise.sigma)
    return out


class PriorSpec:
    """Gaussian coefficient prior ``N(eta, sigma^2 Omega)`` plus a noise model.

    Parameters
    ----------
    spec : BasisSpec
    eta : float or array_like, optional
        Prior mean; a scalar is broadcast.  Default 0.
    omega_inv : BandedSymMatrix, optional
        Prior precision ``Omega^{-1}``; default identity.
    noise : EmpiricalBayes, HierarchicalIG or FixedSigma, optional
    allow_improper : bool
        Skip the positive-definiteness check (``Omega^{-1} = 0`` limits in tests).
    """

    def __init__(self, spec: BasisSpec, eta=0.0, omega_inv=None, noise=None, allow_improper=False):
        self.spec = spec
        eta = np.asarray(eta, dtype=float)
        self.eta = np.full(spec.size, float(eta)) if eta.ndim == 0 else eta.copy()
        if self.eta.shape != (spec.size,):
            raise ParameterError(f"prior mean has shape {self.eta.shape}, expected ({spec.size},)")
        self.omega_inv = BandedSymMatrix.identity(spec.J) if omega_inv is None else omega_inv
        if self.omega_inv.dims != spec.J:
            raise ParameterError(f"prior precision dims {self.omega_inv.dims} != basis dims {spec.J}")
        self.noise = EmpiricalBayes() if noise is None else noise
        self.allow_improper = allow_improper
        if not allow_improper and spec.size <= 400:
            lam = np.linalg.eigvalsh(self.omega_inv.to_dense())
            if lam[0] <= 0:
                raise ParameterError(f"prior precision is not positive definite (min eigenvalue {lam[0]:.3g})")

    @classmethod
    def standard(cls, spec: BasisSpec, noise=None):
        """``eta = 0`` and ``Omega = I``."""
        return cls(spec, 0.0, None, noise)

    def to_dict(self) -> dict:
        return {
            "eta": self.eta.tolist(),
            "omega_inv": {"dims": list(self.omega_inv.dims), "h": list(self.omega_inv.h), "band": self.omega_inv.ab.tolist()},
            "noise": noise_to_dict(self.noise),
        }

    @classmethod
    def from_dict(cls, spec: BasisSpec, payload: dict) -> "PriorSpec":
        om = payload.get("omega_inv")
        omega_inv = None
        if om is not None:
            omega_inv = BandedSymMatrix(om["dims"], om["h"], np.array(om["band"], dtype=float))
        return cls(spec, np.array(payload.get("eta", 0.0)), omega_inv, noise_from_dict(payload.get("noise", {})))


@dataclass(frozen=True)
class SigmaPosterior:
    """``sigma^2 | Y ~ IG(shape, rate)``."""

    shape: float
    rate: float

    @classmethod
    def from_data(cls, beta1: float, beta2: float, n: int, sigma_hat_sq: float):
        return cls((beta1 + n) / 2.0, (beta2 + n * sigma_hat_sq) / 2.0)

    @property
    def mean(self) -> float:
        return self.rate / (self.shape - 1.0)

    @property
    def variance(self) -> float:
        return self.rate**2 / ((self.shape - 1.0) ** 2 * (self.shape - 2.0))

    def draw_sigma_sq(self, rng: np.random.Generator, size=None):
        return self.rate / rng.gamma(self.shape, 1.0, size=size)

    def draw_sigma(self, rng: np.random.Generator, size=None):
        return np.sqrt(self.draw_sigma_sq(rng, size))


class PosteriorState:
    """Everything needed for posterior queries without refitting."""

    def __init__(self, spec, prior, chol, theta_hat, sigma_hat_sq, n, design=None):
        self.spec = spec
        self.prior = prior
        self.chol = chol
        self.theta_hat = theta_hat
        self.sigma_hat_sq = float(sigma_hat_sq)
        self.n = int(n)
        self.design = design

    @property
    def sigma_hat(self) -> float:
        return math.sqrt(self.sigma_hat_sq)

    @property
    def plugin_sigma(self) -> float:
        """Noise level used by plug-in (empirical Bayes) credible sets."""
        if isinstance(self.prior.noise, FixedSigma):
            return self.prior.noise.sigma
        return self.sigma_hat

    def lifted(self, r, X):
        return lift_basis(self.spec, X, r)

    def mean(self, r, X) -> np.ndarray:
        return self.lifted(r, X).matvec(self.theta_hat)

    def variance(self, r, X, chunk: int = 4096) -> np.ndarray:
        """``Sigma_r(x, x)`` for each row of ``X``."""
        rows = self.lifted(r, X)
        out = np.empty(rows.n_rows)
        for lo in range(0, rows.n_rows, chunk):
            sub = rows.subset(slice(lo, lo + chunk)).to_dense().T
            v = self.chol.solve_lower(sub)
            out[lo:lo + chunk] = np.einsum("ij,ij->j", v, v)
        return out

    def covariance(self, r, X, Y=None) -> np.ndarray:
        """Matrix of ``Sigma_r(x_i, y_j)``."""
        gx = self.chol.solve_lower(self.lifted(r, X).to_dense().T)
        gy = gx if Y is None else self.chol.solve_lower(self.lifted(r, Y).to_dense().T)
        return gx.T @ gy

    def centered_draws(self, r, X, size: int, rng: np.random.Generator) -> np.ndarray:
        """``size`` draws of ``GP(0, Sigma_r)`` on the rows of ``X``; shape ``(m, size)``."""
        z = rng.standard_normal((self.spec.size, size))
        return self.lifted(r, X).to_csr() @ self.chol.solve_upper(z)

    def sigma_posterior(self) -> SigmaPosterior:
        return sigma_posterior(self)

    def to_dict(self) -> dict:
        P = self.chol.matrix
        return {
            "format": FIT_FORMAT,
            "version": __version__,
            "spec": self.spec.to_dict(),
            "spec_digest": self.spec.digest(),
            "prior": self.prior.to_dict(),
            "n": self.n,
            "theta_hat": self.theta_hat.tolist(),
            "sigma_hat_sq": self.sigma_hat_sq,
            "precision": {"dims": list(P.dims), "h": list(P.h), "band": P.ab.tolist()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PosteriorState":
        if payload.get("format") != FIT_FORMAT:
            raise ParameterError(f"not a fit export (format={payload.get('format')!r})")
        spec = BasisSpec.from_dict(payload["spec"])
        prior = PriorSpec.from_dict(spec, payload["prior"])
        pr = payload["precision"]
        P = BandedSymMatrix(pr["dims"], pr["h"], np.array(pr["band"], dtype=float))
        chol = factorize(P, jitter_attempts=3)
        theta = np.array(payload["theta_hat"], dtype=float)
        return cls(spec, prior, chol, theta, payload["sigma_hat_sq"], payload["n"])


class FitPlan:
    """Design-dependent part of a fit, reusable across responses.

    The Gram matrix, posterior precision, its factor and the smoother
    leverages depend on ``X`` only, so simulations and cross-validation build
    them once per candidate basis.
    """

    def __init__(self, spec: BasisSpec, prior: PriorSpec, X, allow_overparameterized: bool = False):
        if prior.spec != spec:
            raise ParameterError("prior was built for a different basis")
        self.spec = spec
        self.prior = prior
        self.X = as_points(spec, X) if np.size(X) else np.zeros((0, spec.d))
        self.n = self.X.shape[0]
        if spec.size > self.n and not allow_overparameterized:
            raise OverParameterizationError(f"basis size {spec.size} exceeds sample size {self.n}")
        self.design: DesignMatrix = build_design(spec, self.X)
        self.gram = gram(self.design)
        self.precision = add_prior_precision(self.gram, prior.omega_inv)
        self.chol: BandedCholesky = factorize(self.precision, jitter_attempts=3)
        self.prior_shift = prior.omega_inv.matvec(prior.eta)
        self._leverage = None

    def leverage(self) -> np.ndarray:
        """Diagonal of ``H = B (B^T B + Omega^{-1})^{-1} B^T``."""
        if self._leverage is None:
            rows = self.design.rows
            out = np.empty(self.n)
            chunk = 4096
            for lo in range(0, self.n, chunk):
                sub = rows.subset(slice(lo, lo + chunk)).to_dense().T
                v = self.chol.solve_lower(sub)
                out[lo:lo + chunk] = np.einsum("ij,ij->j", v, v)
            self._leverage = out
        return self._leverage

    def fit(self, Y) -> PosteriorState:
        Y = np.asarray(Y, dtype=float)
        if Y.shape != (self.n,):
            raise ParameterError(f"response has shape {Y.shape}, expected ({self.n},)")
        B = self.design
        theta_hat = self.chol.solve(B.rmatvec(Y) + self.prior_shift)
        if self.n:
            resid = Y - B.matvec(self.prior.eta)
            v = B.rmatvec(resid)
            s = self.chol.solve(v)
            sigma_hat_sq = max(float(resid @ resid - v @ s), 0.0) / self.n
        else:
            sigma_hat_sq = 0.0
        return PosteriorState(self.spec, self.prior, self.chol, theta_hat, sigma_hat_sq, self.n, B)


def fit(spec: BasisSpec, prior: PriorSpec, X, Y, allow_overparameterized: bool = False) -> PosteriorState:
    """Posterior coefficient mean, factor of the posterior precision and ``sigma_hat^2``.

    ``n sigma_hat^2 = ||Y - B eta||^2 - v^T (B^T B + Omega^{-1})^{-1} v`` with
    ``v = B^T (Y - B eta)``, so the ``n x n`` marginal covariance is never formed.
    """
    Y = np.asarray(Y, dtype=float)
    if np.size(X) and as_points(spec, X).shape[0] != Y.shape[0]:
        raise ParameterError("X and Y have different numbers of observations")
    return FitPlan(spec, prior, X, allow_overparameterized).fit(Y)


def sigma_posterior(state: PosteriorState) -> SigmaPosterior:
    noise = state.prior.noise
    if not isinstance(noise, HierarchicalIG):
        raise NoiseModeError(f"sigma posterior needs a hierarchical inverse-gamma prior, noise model is {noise.kind!r}")
    return SigmaPosterior.from_data(noise.beta1, noise.beta2, state.n, state.sigma_hat_sq)


def posterior_mean_deriv(state: PosteriorState, r, x):
    """``A_r(x) Y + c_r(x) eta``, evaluated as ``g_r(x)^T theta_hat``."""
    single = np.ndim(x) == 0 or (np.ndim(x) == 1 and state.spec.d > 1)
    out = state.mean(r, x)
    return float(out[0]) if single else out


def posterior_cov_deriv(state: PosteriorState, r, x, y) -> float:
    """``Sigma_r(x, y)`` via two triangular solves on the lifted basis rows."""
    gx = state.chol.solve_lower(state.lifted(r, np.atleast_1d(x)).to_dense()[0])
    gy = state.chol.solve_lower(state.lifted(r, np.atleast_1d(y)).to_dense()[0])
    return float(gx @ gy)


def sample_function(state: PosteriorState, r, sigma: float, grid, rng: np.random.Generator, size: int | None = None):
    """Posterior draws of ``D^r f`` on ``grid`` given ``sigma``.

    ``theta* = theta_hat + sigma * U^{-1} z`` with ``z ~ N(0, I_J)`` and
    ``U^T U = B^T B + Omega^{-1}``; returns shape ``(m,)`` or ``(m, size)``.
    """
    if sigma < 0:
        raise ParameterError(f"sigma must be nonnegative, got {sigma}")
    k = 1 if size is None else int(size)
    z = rng.standard_normal((state.spec.size, k))
    thetas = state.theta_hat[:, None] + sigma * state.chol.solve_upper(z)
    vals = state.lifted(r, grid).to_csr() @ thetas
    return vals[:, 0] if size is None else vals
