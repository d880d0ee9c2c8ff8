"""Coverage experiments for credible intervals and bands."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import numpy as np

from . import __version__
from .credible import (
    EB,
    HIERARCHICAL,
    Grid,
    contains,
    covered_points,
    inflation,
    pointwise_gamma,
    pointwise_interval,
    sup_band,
)
from .errors import ParameterError
from .posterior import EmpiricalBayes, FitPlan, PriorSpec, noise_from_dict
from .splinebasis import BasisSpec

log = logging.getLogger(__name__)

THREADS_ENV = "TPBAYES_THREADS"
ERROR_KINDS = ("gaussian", "rademacher", "uniform")
_SQRT2 = math.sqrt(2.0)


def f0_eval(x, K: int = 50_000, block: int = 2048):
    """Partial sum ``sqrt(2) sum_{i<=K} i^{-3/2} sin(i) cos((i - 1/2) pi x)``.

    Blocks of terms are summed pairwise and the block sums combined with
    Neumaier compensation.  For ``x >= 1/2`` the identity
    ``cos((i - 1/2) pi x) = (-1)^(i+1) sin((i - 1/2) pi (1 - x))`` is used so
    that the value at ``x = 1`` is exactly 0.
    """
    if K < 1:
        raise ParameterError(f"truncation K must be >= 1, got {K}")
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    rows = 256
    for lo in range(0, x.size, rows):
        xs = x[lo:lo + rows]
        right = xs >= 0.5
        total = np.zeros_like(xs)
        comp = np.zeros_like(xs)
        for start in range(1, K + 1, block):
            i = np.arange(start, min(start + block, K + 1), dtype=float)
            freq = (i - 0.5) * np.pi
            amp = i**-1.5 * np.sin(i)
            sign = np.where(i % 2 == 1, 1.0, -1.0)
            trig = np.where(right[:, None], sign * np.sin(np.outer(1.0 - xs, freq)), np.cos(np.outer(xs, freq)))
            s = trig @ amp
            t = total + s
            comp += np.where(np.abs(total) >= np.abs(s), (total - t) + s, (s - t) + total)
            total = t
        out[lo:lo + rows] = _SQRT2 * (total + comp)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class SeriesFunction:
    """The oscillating cosine series with Hoelder smoothness 1."""

    K: int = 50_000
    smoothness: float = 1.0

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        return f0_eval(X[:, 0] if X.ndim == 2 else X, self.K)


@dataclass(frozen=True)
class TabulatedFunction:
    """Reference function given by values on a 1-d grid (linear interpolation)."""

    grid: tuple
    values: tuple
    smoothness: float | None = None

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        return np.interp(X[:, 0] if X.ndim == 2 else X, self.grid, self.values)


def make_design(n: int, d: int = 1) -> np.ndarray:
    """Equispaced fixed design; for ``d > 1`` the full ``m^d`` grid with ``n = m^d``."""
    if d < 1:
        raise ParameterError("dimension must be >= 1")
    m = round(n ** (1.0 / d))
    if d > 1 and m**d != n:
        raise ParameterError(f"n={n} is not a perfect {d}-th power")
    if m < 2:
        raise ParameterError("the design needs at least 2 points per axis")
    axis = np.arange(m) / (m - 1)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def gen_data(f0, X, sigma0_sq: float, error_kind: str = "gaussian", rng=None, f_values=None):
    """``Y_i = f0(X_i) + eps_i`` with ``Var(eps) = sigma0_sq`` for every error kind."""
    if sigma0_sq < 0:
        raise ParameterError("error variance must be nonnegative")
    F = f0(X) if f_values is None else np.asarray(f_values)
    n = F.shape[0]
    s = math.sqrt(sigma0_sq)
    if error_kind == "gaussian":
        eps = rng.standard_normal(n) * s
    elif error_kind == "rademacher":
        eps = np.where(rng.random(n) < 0.5, -s, s)
    elif error_kind == "uniform":
        eps = rng.uniform(-math.sqrt(3.0) * s, math.sqrt(3.0) * s, n)
    else:
        raise ParameterError(f"unknown error kind {error_kind!r}; expected one of {ERROR_KINDS}")
    return F + eps


def stream(seed: int, *key) -> np.random.Generator:
    """Counter-based generator for ``(seed, *key)``; string keys are hashed."""
    spawn_key = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in key)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))


def default_candidates(n: int, q: int) -> list:
    return list(range(2, max(2, min(30, n // 4 - q)) + 1))


def _as_knot_counts(N, d):
    return (int(N),) * d if np.ndim(N) == 0 else tuple(int(v) for v in N)


def loocv_scores(plan: FitPlan, Y) -> float:
    lev = plan.leverage()
    if np.any(lev >= 1.0 - 1e-12):
        return math.nan
    state = plan.fit(Y)
    resid = Y - plan.design.matvec(state.theta_hat)
    return float(np.sum((resid / (1.0 - lev)) ** 2))


def loocv_select_J(candidates, q, X, Y, prior_factory=None, scheme="clamped", plans=None):
    """Pick the interior-knot count minimizing the leave-one-out score.

    The score ``sum_i ((Y_i - Yhat_i) / (1 - H_ii))^2`` uses the leverages of
    the posterior-mean smoother.  Ties go to the smallest candidate; a
    candidate with a leverage of 1 is skipped with a warning.

    Returns ``(chosen, scores)`` where ``scores`` maps candidate to score.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    d = X.shape[1]
    prior_factory = prior_factory or PriorSpec.standard
    plans = {} if plans is None else plans
    candidates = list(candidates)
    if not candidates:
        raise ParameterError("no candidate knot counts")
    if len(candidates) == 1:
        return candidates[0], {candidates[0]: math.nan}
    scores = {}
    for N in candidates:
        key = _as_knot_counts(N, d)
        if key not in plans:
            spec = BasisSpec.uniform(q, key, scheme, d=d)
            plans[key] = FitPlan(spec, prior_factory(spec), X)
        s = loocv_scores(plans[key], Y)
        if math.isnan(s):
            warnings.warn(f"candidate {N} skipped: a leverage value reached 1", RuntimeWarning, stacklevel=2)
            continue
        scores[N] = s
    if not scores:
        raise ParameterError("every candidate was skipped")
    best = min(scores.values())
    chosen = min((c for c, s in scores.items() if s == best), key=lambda c: _as_knot_counts(c, d))
    return chosen, scores


@dataclass
class ExperimentConfig:
    n_list: list = field(default_factory=lambda: [100, 300, 500, 700, 1000, 2000])
    sigma0_sq: float = 0.1
    error_kind: str = "gaussian"
    band_gamma: float = 0.05
    pointwise_gamma: str | float = "5/n"
    rho: float = 0.5
    rho_schedule: str = "constant"
    q: int = 4
    scheme: str = "clamped"
    d: int = 1
    candidates: list | None = None
    fixed_N: int | None = None
    replicates: int = 1000
    seed: int = 20170101
    grid_size: int = 512
    curve_grid_size: int = 101
    mc_samples: int = 2000
    truncation: int = 50_000
    prior_eta: float = 0.0
    prior_omega_scale: float = 1.0
    noise: dict = field(default_factory=lambda: {"kind": "empirical_bayes"})

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(name, why):
            raise ParameterError(f"invalid config field {name!r}: {why}")

        if not self.n_list or any(int(n) != n or n < 2 for n in self.n_list):
            bad("n_list", "needs integers >= 2")
        self.n_list = [int(n) for n in self.n_list]
        if self.replicates < 1:
            bad("replicates", "must be >= 1")
        if self.sigma0_sq <= 0:
            bad("sigma0_sq", "must be positive")
        if self.error_kind not in ERROR_KINDS:
            bad("error_kind", f"must be one of {ERROR_KINDS}")
        if not 0 < self.band_gamma < 0.5:
            bad("band_gamma", "must lie in (0, 1/2)")
        if isinstance(self.pointwise_gamma, str):
            if self.pointwise_gamma != "5/n":
                bad("pointwise_gamma", "must be a number in (0, 1) or the schedule '5/n'")
        elif not 0 < self.pointwise_gamma < 1:
            bad("pointwise_gamma", "must lie in (0, 1)")
        if self.rho <= 0 or (self.rho < 1 and self.error_kind != "gaussian"):
            bad("rho", "must be >= 1 unless errors are Gaussian")
        if self.rho_schedule not in ("constant", "loglog"):
            bad("rho_schedule", "must be 'constant' or 'loglog'")
        if self.q < 1:
            bad("q", "must be >= 1")
        if self.d != 1:
            bad("d", "the coverage experiment is univariate")
        if self.grid_size < 2 or self.curve_grid_size < 2:
            bad("grid_size", "grids need at least 2 points")
        if self.mc_samples < 1:
            bad("mc_samples", "must be >= 1")
        try:
            noise_from_dict(self.noise)
        except (ParameterError, KeyError) as exc:
            bad("noise", str(exc))
        for n in self.n_list:
            cands = self.candidates_for(n)
            if max(cands) + self.q > n:
                bad("candidates", f"basis size {max(cands) + self.q} exceeds n={n}")

    def candidates_for(self, n: int) -> list:
        if self.fixed_N is not None:
            return [int(self.fixed_N)]
        if self.candidates is not None:
            return [int(c) for c in self.candidates]
        return default_candidates(n, self.q)

    def gamma_for(self, n: int) -> float:
        return pointwise_gamma(n) if self.pointwise_gamma == "5/n" else float(self.pointwise_gamma)

    def prior_factory(self):
        noise = noise_from_dict(self.noise)
        eta, scale = self.prior_eta, self.prior_omega_scale

        def build(spec):
            from .design import BandedSymMatrix

            return PriorSpec(spec, eta, BandedSymMatrix.identity(spec.J, 1.0 / scale), noise)

        return build

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ParameterError(f"invalid config field {unknown[0]!r}: unknown field")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ParameterError(f"invalid config: {exc}") from None

    @classmethod
    def preset(cls, name: str = "coverage_ladder") -> "ExperimentConfig":
        text = resources.files("tpbayes").joinpath("presets", f"{name}.json").read_text()
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ReplicateResult:
    index: int
    N: int
    sigma_hat_sq: float
    band_radius: float
    sup_error: float
    band_scale: float
    band_covered: bool
    pointwise_covered: list


class _SampleSizeRunner:
    """Shared per-``n`` state: design, truth values and per-candidate plans."""

    def __init__(self, cfg: ExperimentConfig, n: int):
        self.cfg = cfg
        self.n = n
        self.X = make_design(n, cfg.d)
        truth = SeriesFunction(cfg.truncation)
        self.F = truth(self.X)
        self.grid = Grid.equispaced(1, cfg.grid_size)
        self.f_grid = truth(self.grid.points)
        self.curve = np.linspace(0.0, 1.0, cfg.curve_grid_size)
        self.f_curve = truth(self.curve)
        self.plans = {}
        self.prior_factory = cfg.prior_factory()
        self.rho = inflation(n, cfg.rho, cfg.rho_schedule)
        hier = noise_from_dict(cfg.noise).kind == "hierarchical_ig"
        self.mode = HIERARCHICAL if hier else EB

    def plan(self, N):
        key = _as_knot_counts(N, self.cfg.d)
        if key not in self.plans:
            spec = BasisSpec.uniform(self.cfg.q, key, self.cfg.scheme, d=self.cfg.d)
            self.plans[key] = FitPlan(spec, self.prior_factory(spec), self.X)
        return self.plans[key]

    def replicate(self, rep: int) -> ReplicateResult:
        cfg = self.cfg
        data_rng = stream(cfg.seed, self.n, rep, "data")
        band_rng = stream(cfg.seed, self.n, rep, "band")
        Y = gen_data(None, self.X, cfg.sigma0_sq, cfg.error_kind, data_rng, f_values=self.F)
        cands = cfg.candidates_for(self.n)
        if len(cands) == 1:
            N = cands[0]
        else:
            N, _ = loocv_select_J(cands, cfg.q, self.X, Y, self.prior_factory, cfg.scheme, self.plans)
        state = self.plan(N).fit(Y)
        band = sup_band(state, 0, cfg.band_gamma, self.rho, grid=self.grid, mc_samples=cfg.mc_samples,
                        mode=self.mode, rng=band_rng, gaussian_errors=cfg.error_kind == "gaussian")
        covered, _ = contains(band, self.f_grid)
        sup_err = float(np.max(np.abs(band.center - self.f_grid)))
        pw = pointwise_interval(state, 0, self.curve, cfg.gamma_for(self.n), mode=self.mode)
        return ReplicateResult(rep, int(N), state.sigma_hat_sq, float(band.radius), sup_err,
                               float(band.radius / self.rho), bool(covered),
                               covered_points(pw, self.f_curve).astype(int).tolist())


def _run_block(args, runner=None):
    cfg_dict, n, reps = args
    runner = runner or _SampleSizeRunner(ExperimentConfig.from_dict(cfg_dict), n)
    out = []
    for rep in reps:
        try:
            out.append(runner.replicate(rep))
        except Exception as exc:  # noqa: BLE001 - failures are counted, not fatal
            log.warning("n=%d replicate %d failed: %s", n, rep, exc)
            out.append(("failed", rep, repr(exc)))
    return out


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class CoverageReport:
    config: dict
    curve_x: list
    per_n: dict
    records: dict = field(repr=False, default_factory=dict)

    def summary(self, n: int) -> dict:
        return self.per_n[str(n)]

    def band_coverage_at(self, n: int, rho: float) -> float:
        """Band coverage recomputed for another constant inflation, same draws."""
        recs = self.records[str(n)]
        return float(np.mean([r["sup_error"] <= rho * r["band_scale"] for r in recs]))

    def to_dict(self) -> dict:
        return {
            "format": "tpbayes-coverage/1",
            "version": __version__,
            "config": self.config,
            "config_digest": hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()[:16],
            "curve_x": self.curve_x,
            "per_n": self.per_n,
            "records": self.records,
        }

    def table_rows(self):
        """Rows shaped like the band table: one column per sample size."""
        ns = [int(n) for n in self.per_n]
        rows = [
            ("credible_band_coverage", [self.per_n[str(n)]["band_coverage"] for n in ns]),
            ("credible_band_radius", [self.per_n[str(n)]["band_radius_mean"] for n in ns]),
            ("confidence_band_coverage", [None] * len(ns)),
            ("confidence_band_mean_radius", [None] * len(ns)),
            ("confidence_band_max_radius", [None] * len(ns)),
        ]
        return ns, rows


def _summarize(n: int, results: list, reps: int) -> tuple:
    ok = [r for r in results if isinstance(r, ReplicateResult)]
    failed = [r for r in results if not isinstance(r, ReplicateResult)]
    m = len(ok)
    if m == 0:
        return {"replicates": reps, "failures": len(failed)}, []
    cov = np.array([r.band_covered for r in ok], dtype=float)
    p = float(cov.mean())
    rad = np.array([r.band_radius for r in ok])
    pw = np.array([r.pointwise_covered for r in ok], dtype=float).mean(axis=0)
    Ns = [r.N for r in ok]
    hist = {str(N): Ns.count(N) for N in sorted(set(Ns))}
    s2 = np.array([r.sigma_hat_sq for r in ok])
    summary = {
        "replicates": reps,
        "failures": len(failed),
        "band_coverage": p,
        "band_coverage_se": math.sqrt(p * (1 - p) / m),
        "band_radius_mean": float(rad.mean()),
        "band_radius_sd": float(rad.std(ddof=1)) if m > 1 else 0.0,
        "chosen_N_hist": hist,
        "pointwise_coverage": pw.tolist(),
        "pointwise_coverage_se": np.sqrt(pw * (1 - pw) / m).tolist(),
        "sup_error_mean": float(np.mean([r.sup_error for r in ok])),
        "sigma_sq_mean": float(s2.mean()),
        "sigma_sq_abs_error_mean": None,
    }
    records = [
        {"rep": r.index, "N": r.N, "sigma_hat_sq": r.sigma_hat_sq, "band_radius": r.band_radius,
         "band_scale": r.band_scale, "sup_error": r.sup_error, "covered": r.band_covered}
        for r in ok
    ]
    return summary, records


def run_coverage_experiment(cfg: ExperimentConfig, threads: int | None = None, block: int = 50) -> CoverageReport:
    """Repeat data generation, J selection, fitting and set construction.

    Every replicate draws from its own counter-based streams keyed by
    ``(seed, n, replicate, purpose)``, so serial and parallel runs agree
    exactly.
    """
    threads = default_threads() if threads is None else max(1, threads)
    cfg_dict = cfg.to_dict()
    per_n, records = {}, {}
    for n in cfg.n_list:
        jobs = [(cfg_dict, n, list(range(lo, min(lo + block, cfg.replicates))))
                for lo in range(0, cfg.replicates, block)]
        results = []
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(threads) as pool:
                for done, part in enumerate(pool.map(_run_block, jobs), 1):
                    results.extend(part)
                    log.info("n=%d: %d/%d replicate blocks", n, done, len(jobs))
        else:
            runner = _SampleSizeRunner(cfg, n)
            for done, job in enumerate(jobs, 1):
                results.extend(_run_block(job, runner))
                log.info("n=%d: %d/%d replicate blocks", n, done, len(jobs))
        results.sort(key=lambda r: r.index if isinstance(r, ReplicateResult) else r[1])
        summary, recs = _summarize(n, results, cfg.replicates)
        if recs:
            summary["sigma_sq_abs_error_mean"] = float(np.mean([abs(r["sigma_hat_sq"] - cfg.sigma0_sq) for r in recs]))
        per_n[str(n)] = summary
        records[str(n)] = recs
    curve = np.linspace(0.0, 1.0, cfg.curve_grid_size).tolist()
    return CoverageReport(cfg_dict, curve, per_n, records)
