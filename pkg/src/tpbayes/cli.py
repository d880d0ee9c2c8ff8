"""Command-line interface: ``tpbayes {fit,band,simulate,crossval}``.

Exit codes: 0 on success, 2 for usage, configuration or data errors, 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .credible import EB, MODES, Grid, pointwise_interval, sup_band
from .design import BandedSymMatrix, read_csv
from .errors import FactorizationError, TPBayesError
from .posterior import FitPlan, PosteriorState, PriorSpec, noise_from_dict
from .simulate import THREADS_ENV, ExperimentConfig, default_candidates, default_threads, loocv_select_J, run_coverage_experiment
from .splinebasis import BasisSpec
from .svg import band_svg

log = logging.getLogger("tpbayes")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MC_PARTITIONS = 8
FIT_FIELDS = {"q", "N", "scheme", "candidates", "prior", "noise", "response", "covariates", "allow_overparameterized"}


class UsageError(TPBayesError):
    pass


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def header_line(seed, config_digest) -> str:
    return f"tpbayes {__version__} seed={seed} config={config_digest}"


class OutputDir:
    """Stage outputs in a sibling temporary directory, then move them in place."""

    def __init__(self, target):
        self.target = Path(target)

    def __enter__(self):
        parent = self.target.resolve().parent
        parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if not self.target.exists():
            os.rename(self.tmp, self.target)
        else:
            for item in self.tmp.iterdir():
                os.replace(item, self.target / item.name)
            self.tmp.rmdir()
        return False


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _csv_text(header: str, columns: list, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    return buf.getvalue()


def _load_json(path, what: str) -> dict:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON in {what} (line {exc.lineno}): {exc.msg}") from None
    if not isinstance(payload, dict):
        raise UsageError(f"{path}: {what} must be a JSON object")
    return payload


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")


# -- fit configuration --------------------------------------------------------


def _field_error(name, why):
    return UsageError(f"invalid config field {name!r}: {why}")


def parse_fit_config(cfg: dict, d: int) -> dict:
    """Validate a fit config and fill defaults; raises naming the bad field."""
    unknown = sorted(set(cfg) - FIT_FIELDS)
    if unknown:
        raise _field_error(unknown[0], "unknown field")
    out = {
        "q": cfg.get("q", 4),
        "N": cfg.get("N", "auto"),
        "scheme": cfg.get("scheme", "clamped"),
        "candidates": cfg.get("candidates"),
        "prior": cfg.get("prior", {"eta": 0.0, "omega_scale": 1.0}),
        "noise": cfg.get("noise", {"kind": "empirical_bayes"}),
        "allow_overparameterized": bool(cfg.get("allow_overparameterized", False)),
    }
    q = out["q"]
    if not (isinstance(q, int) and q >= 1) and not (isinstance(q, list) and len(q) == d and all(isinstance(v, int) and v >= 1 for v in q)):
        raise _field_error("q", f"expected a positive integer or {d} of them")
    N = out["N"]
    if N != "auto" and not (isinstance(N, int) and N >= 0) and not (isinstance(N, list) and len(N) == d):
        raise _field_error("N", "expected 'auto', a nonnegative integer or one per covariate")
    if out["scheme"] not in ("clamped", "open"):
        raise _field_error("scheme", "expected 'clamped' or 'open'")
    if out["candidates"] is not None and (not isinstance(out["candidates"], list) or not out["candidates"]):
        raise _field_error("candidates", "expected a nonempty list")
    prior = out["prior"]
    if not isinstance(prior, dict) or set(prior) - {"eta", "omega_scale"}:
        raise _field_error("prior", "expected an object with 'eta' and 'omega_scale'")
    if float(prior.get("omega_scale", 1.0)) <= 0:
        raise _field_error("prior", "omega_scale must be positive")
    try:
        noise_from_dict(out["noise"])
    except (TPBayesError, KeyError, TypeError, ValueError) as exc:
        raise _field_error("noise", str(exc)) from None
    return out


def _prior_factory(cfg: dict):
    noise = noise_from_dict(cfg["noise"])
    eta = float(cfg["prior"].get("eta", 0.0))
    scale = float(cfg["prior"].get("omega_scale", 1.0))

    def build(spec):
        return PriorSpec(spec, eta, BandedSymMatrix.identity(spec.J, 1.0 / scale), noise)

    return build


def _select_N(cfg: dict, X, Y):
    """Resolve ``N``; returns ``(N, scores)`` with ``scores`` empty when fixed."""
    d = X.shape[1]
    if cfg["N"] != "auto":
        return cfg["N"], {}
    q = cfg["q"] if isinstance(cfg["q"], int) else max(cfg["q"])
    cands = cfg["candidates"] or default_candidates(len(Y), q)
    cands = [c for c in cands if (np.prod(np.add(c, cfg["q"])) if np.ndim(c) else (c + q) ** d) <= len(Y)] or cands[:1]
    return loocv_select_J(cands, cfg["q"], X, Y, _prior_factory(cfg), cfg["scheme"])


def _load_data(args, cfg):
    response = args.response or cfg.get("response", "y")
    X, Y, names = read_csv(args.data, response=response, covariates=cfg.get("covariates"))
    if len(Y) == 0:
        raise UsageError(f"{args.data}: no data rows")
    return X, Y, names


# -- subcommands --------------------------------------------------------------


def cmd_fit(args) -> int:
    _require_files(args.data, args.config)
    raw = _load_json(args.config, "fit config")
    cfg = parse_fit_config(raw, d=1)
    X, Y, names = _load_data(args, raw)
    cfg = parse_fit_config(raw, d=X.shape[1])
    t0 = time.perf_counter()
    N, scores = _select_N(cfg, X, Y)
    spec = BasisSpec.uniform(cfg["q"], N, cfg["scheme"], d=X.shape[1])
    plan = FitPlan(spec, _prior_factory(cfg)(spec), X, cfg["allow_overparameterized"])
    state = plan.fit(Y)
    elapsed = time.perf_counter() - t0
    payload = state.to_dict()
    cdig = digest({"config": raw, "data": hashlib.sha256(Path(args.data).read_bytes()).hexdigest()})
    payload["meta"] = {"header": header_line(None, cdig), "version": __version__, "seed": None,
                       "config_digest": cdig, "covariates": names, "N": N,
                       "loocv_scores": {str(k): v for k, v in scores.items()}}
    with OutputDir(args.out) as tmp:
        _write_json(tmp / "fit.json", payload)
    print(f"sigma_hat_sq = {state.sigma_hat_sq:.10g}")
    print(f"J = {list(spec.J)} (N = {N}, q = {list(spec.q)}, {spec.size} coefficients)")
    print(f"time = {elapsed:.3f} s")
    return EXIT_OK


def _band_grid(spec, m: int) -> Grid:
    if m < 2:
        raise UsageError("--grid needs at least 2 points")
    return Grid.equispaced(spec.d, m)


def cmd_band(args) -> int:
    _require_files(args.fit)
    if args.kind == "sup" and not 0.0 < args.gamma < 0.5:
        raise UsageError(f"--gamma {args.gamma}: sup-norm bands require 0 < gamma < 1/2")
    if not 0.0 < args.gamma < 1.0:
        raise UsageError(f"--gamma {args.gamma}: must lie in (0, 1)")
    payload = _load_json(args.fit, "fit export")
    try:
        state = PosteriorState.from_dict(payload)
    except KeyError as exc:
        raise UsageError(f"{args.fit}: fit export lacks field {exc}") from None
    d = state.spec.d
    r = [int(v) for v in args.deriv.split(",")] if args.deriv else [0]
    if len(r) == 1:
        r = r * d
    grid = _band_grid(state.spec, args.grid)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed)))
    if args.kind == "sup":
        cset = sup_band(state, r, args.gamma, args.rho, mode=args.mode, grid=grid, mc_samples=args.mc_samples,
                        rng=rng, gaussian_errors=not args.non_gaussian, partitions=MC_PARTITIONS,
                        threads=args.threads)
        half = np.full(grid.size, cset.radius)
    else:
        cset = pointwise_interval(state, r, grid.points, args.gamma, mode=args.mode)
        half = np.asarray(cset.radius)
    settings = {"fit": payload.get("spec_digest"), "theta": digest(payload["theta_hat"]), "gamma": args.gamma,
                "rho": args.rho, "deriv": r, "grid": args.grid, "kind": args.kind, "mode": args.mode,
                "mc_samples": args.mc_samples}
    head = header_line(args.seed, digest(settings))
    cols = [f"x{k + 1}" for k in range(d)] if d > 1 else ["x"]
    lower, upper = cset.center - half, cset.center + half
    rows = (list(p) + [c, lo, up] for p, c, lo, up in zip(grid.points, cset.center, lower, upper))
    with OutputDir(args.out) as tmp:
        (tmp / "band.csv").write_text(_csv_text(head, cols + ["center", "lower", "upper"], rows))
        if d == 1:
            label = f"D^{r[0]} f" if r[0] else "f"
            title = f"{args.kind} credible set for {label}, gamma={args.gamma:g}"
            (tmp / "band.svg").write_text(band_svg(grid.points[:, 0], cset.center, lower, upper, title=title, header=head))
    if args.kind == "sup":
        h = cset.quantile.value
        print(f"h = {h:.6g} (MC SE {cset.quantile.se:.2g}, {cset.mc_samples} draws)")
        print(f"half-width = {cset.radius:.6g}")
    else:
        print(f"mean half-width = {float(np.mean(half)):.6g}")
    if d > 1:
        print("plot skipped: SVG output is only drawn for one covariate")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.experiment is None and args.preset is None:
        raise UsageError("give an experiment config file or --preset")
    _require_files(args.experiment)
    raw = _load_json(args.experiment, "experiment config") if args.experiment else ExperimentConfig.preset(args.preset).to_dict()
    if args.replicates is not None:
        raw = {**raw, "replicates": args.replicates}
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    cfg = ExperimentConfig.from_dict(raw)
    started = time.perf_counter()
    report = run_coverage_experiment(cfg, threads=args.threads)
    elapsed = time.perf_counter() - started
    out = report.to_dict()
    head = header_line(cfg.seed, cfg.digest())
    out["meta"] = {"header": head, "version": __version__, "seed": cfg.seed, "config_digest": cfg.digest()}
    ns, rows = report.table_rows()
    curve_cols = ["x"] + [f"n={n}" for n in ns]
    curve_rows = ([x] + [report.per_n[str(n)].get("pointwise_coverage", [None] * len(report.curve_x))[i] for n in ns]
                  for i, x in enumerate(report.curve_x))
    with OutputDir(args.out) as tmp:
        _write_json(tmp / "report.json", out)
        (tmp / "table.csv").write_text(_csv_text(head, ["row"] + [f"n={n}" for n in ns], ([k] + v for k, v in rows)))
        (tmp / "coverage_curve.csv").write_text(_csv_text(head, curve_cols, curve_rows))
        _write_json(tmp / "timing.json", {"wall_clock_seconds": elapsed, "threads": args.threads})
    for n in ns:
        s = report.per_n[str(n)]
        if "band_coverage" in s:
            print(f"n={n}: band coverage {s['band_coverage']:.3f} (SE {s['band_coverage_se']:.3f}), "
                  f"radius {s['band_radius_mean']:.4f}, failures {s['failures']}")
        else:
            print(f"n={n}: every replicate failed")
    print(f"time = {elapsed:.1f} s")
    return EXIT_OK


def cmd_crossval(args) -> int:
    _require_files(args.data, args.config)
    raw = _load_json(args.config, "fit config")
    X, Y, _ = _load_data(args, raw)
    cfg = parse_fit_config({**raw, "N": "auto"}, d=X.shape[1])
    N, scores = _select_N(cfg, X, Y)
    head = header_line(None, digest({"config": raw, "data": hashlib.sha256(Path(args.data).read_bytes()).hexdigest()}))
    rows = ([str(k), v] for k, v in scores.items())
    with OutputDir(args.out) as tmp:
        (tmp / "crossval.csv").write_text(_csv_text(head, ["N", "score"], rows))
    print(f"chosen N = {N}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    threads_default = default_threads()
    p = argparse.ArgumentParser(prog="tpbayes", description="Bayesian tensor-product spline regression.")
    p.add_argument("--version", action="version", version=f"tpbayes {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-o", "--out", default="out", help="output directory (default: ./out)")
        sp.add_argument("--threads", type=int, default=threads_default,
                        help=f"worker count (default: ${THREADS_ENV} or the CPU count)")

    f = sub.add_parser("fit", help="fit a model to CSV data")
    f.add_argument("data")
    f.add_argument("config")
    f.add_argument("--response", default=None, help="response column (default: 'y')")
    common(f)
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("band", help="credible band from a fit export")
    b.add_argument("fit")
    b.add_argument("--gamma", type=float, default=0.05)
    b.add_argument("--rho", type=float, default=1.0)
    b.add_argument("--deriv", default="0", help="derivative order, e.g. 1 or 1,0")
    b.add_argument("--grid", type=int, default=512, help="grid points per axis")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--mc-samples", type=int, default=2000)
    b.add_argument("--mode", choices=MODES, default=EB)
    b.add_argument("--kind", choices=("sup", "pointwise"), default="sup")
    b.add_argument("--non-gaussian", action="store_true", help="errors are not Gaussian (forbids rho < 1)")
    common(b)
    b.set_defaults(func=cmd_band)

    s = sub.add_parser("simulate", help="run a coverage experiment")
    s.add_argument("experiment", nargs="?")
    s.add_argument("--preset", default=None, help="use a shipped config, e.g. coverage_ladder")
    s.add_argument("--replicates", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    common(s)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("crossval", help="leave-one-out scores over knot counts")
    c.add_argument("data")
    c.add_argument("config")
    c.add_argument("--response", default=None)
    common(c)
    c.set_defaults(func=cmd_crossval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except (FactorizationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"tpbayes: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TPBayesError, ValueError, KeyError, OSError) as exc:
        print(f"tpbayes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
