import math
import warnings

import numpy as np
import pytest

from tpbayes.design import BandedSymMatrix, empirical_cdf_sup_distance
from tpbayes.errors import ParameterError
from tpbayes.posterior import FitPlan, PriorSpec
from tpbayes.simulate import (
    ExperimentConfig,
    SeriesFunction,
    TabulatedFunction,
    _SampleSizeRunner,
    f0_eval,
    gen_data,
    loocv_select_J,
    make_design,
    run_coverage_experiment,
    stream,
)
from tpbayes.splinebasis import BasisSpec


def small_config(**kw):
    base = dict(n_list=[100], replicates=4, mc_samples=300, grid_size=128, truncation=2000, candidates=[3, 5, 8])
    base.update(kw)
    return ExperimentConfig(**base)


class TestTrueFunction:
    def test_single_term(self):
        assert f0_eval(0.0, 1) == pytest.approx(math.sqrt(2) * math.sin(1), abs=1e-15)
        assert f0_eval(0.0, 1) == pytest.approx(1.19001968, abs=1e-8)

    @pytest.mark.parametrize("K", [1, 7, 50_000])
    def test_vanishes_at_one(self, K):
        assert f0_eval(1.0, K) == 0.0

    def test_truncation_stability(self):
        x = np.linspace(0, 1, 101)
        assert np.max(np.abs(f0_eval(x, 50_000) - f0_eval(x, 200_000))) < 1e-3

    def test_matches_naive_sum(self):
        x = np.array([0.0, 0.13, 0.3, 0.5, 0.77])
        i = np.arange(1, 301)
        naive = math.sqrt(2) * np.sum(i**-1.5 * np.sin(i) * np.cos(np.outer(x, (i - 0.5) * np.pi)), axis=1)
        np.testing.assert_allclose(f0_eval(x, 300), naive, atol=1e-13)

    def test_deterministic(self):
        x = np.random.default_rng(0).random(50)
        np.testing.assert_array_equal(f0_eval(x), f0_eval(x))

    def test_invalid_K(self):
        with pytest.raises(ParameterError):
            f0_eval(0.5, 0)

    def test_tabulated(self):
        f = TabulatedFunction((0.0, 1.0), (0.0, 2.0))
        np.testing.assert_allclose(f(np.array([[0.25], [0.5]])), [0.5, 1.0])

    def test_series_callable_on_points(self):
        X = make_design(5)
        np.testing.assert_allclose(SeriesFunction(100)(X), f0_eval(X[:, 0], 100))


class TestDesign:
    def test_three_points(self):
        np.testing.assert_array_equal(make_design(3)[:, 0], [0.0, 0.5, 1.0])

    def test_grid(self):
        X = make_design(9, 2)
        assert X.shape == (9, 2)
        assert {tuple(p) for p in X} == {(a, b) for a in (0, 0.5, 1) for b in (0, 0.5, 1)}

    def test_endpoints(self):
        X = make_design(500)
        assert X.shape == (500, 1) and X[0, 0] == 0.0 and X[-1, 0] == 1.0
        assert empirical_cdf_sup_distance(X) < 0.01

    def test_not_a_power(self):
        with pytest.raises(ParameterError):
            make_design(10, 2)


class TestData:
    def test_zero_noise(self):
        X = make_design(20)
        f = SeriesFunction(100)
        np.testing.assert_array_equal(gen_data(f, X, 0.0, rng=np.random.default_rng(0)), f(X))

    @pytest.mark.parametrize("kind", ["gaussian", "rademacher", "uniform"])
    def test_variance(self, kind):
        n = 100_000
        eps = gen_data(None, None, 0.1, kind, np.random.default_rng(1), f_values=np.zeros(n))
        # fourth moment gives the standard error; the second term covers the centering by the sample mean
        se = math.sqrt(max(np.mean(eps**4) - 0.01, 0.0) / n) + 10 * 0.1 / n
        assert abs(eps.var() - 0.1) < 3 * se

    def test_rademacher_magnitude(self):
        eps = gen_data(None, None, 0.1, "rademacher", np.random.default_rng(2), f_values=np.zeros(1000))
        np.testing.assert_allclose(np.abs(eps), math.sqrt(0.1))

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            gen_data(None, None, 0.1, "cauchy", np.random.default_rng(0), f_values=np.zeros(3))

    def test_streams_independent_of_order(self):
        a = stream(5, 100, 3, "data").standard_normal(4)
        stream(5, 100, 2, "data").standard_normal(4)
        np.testing.assert_array_equal(a, stream(5, 100, 3, "data").standard_normal(4))
        assert not np.array_equal(a, stream(5, 100, 3, "band").standard_normal(4))


class TestLoocv:
    def test_single_candidate(self):
        X = make_design(30)
        assert loocv_select_J([4], 4, X, np.zeros(30))[0] == 4

    def test_shortcut_matches_literal(self):
        n = 40
        X = make_design(n)
        Y = gen_data(SeriesFunction(500), X, 0.1, rng=np.random.default_rng(3))
        _, scores = loocv_select_J([2, 4], 4, X, Y)
        for N, score in scores.items():
            spec = BasisSpec.uniform(4, N)
            literal = 0.0
            for i in range(n):
                keep = np.arange(n) != i
                st = FitPlan(spec, PriorSpec.standard(spec), X[keep]).fit(Y[keep])
                literal += (Y[i] - st.mean(0, X[i:i + 1])[0]) ** 2
            assert score == pytest.approx(literal, rel=1e-8)

    def test_ties_choose_smallest(self):
        X = make_design(30)
        # a zero response gives every candidate a zero score
        assert loocv_select_J([6, 3, 5], 2, X, np.zeros(30))[0] == 3

    def test_unit_leverage_skipped(self):
        X = np.array([[0.05], [0.1], [0.2], [0.3], [0.4], [0.9]])
        Y = np.arange(6.0)

        def nearly_flat(spec):
            return PriorSpec(spec, 0.0, BandedSymMatrix.identity(spec.J, 1e-15))

        with pytest.warns(RuntimeWarning, match="skipped"):
            chosen, scores = loocv_select_J([0, 1], 1, X, Y, prior_factory=nearly_flat)
        assert chosen == 0 and 1 not in scores

    def test_stability_across_seeds(self):
        X = make_design(300)
        f = SeriesFunction()(X)
        plans = {}
        picks = []
        for seed in range(20):
            Y = gen_data(None, X, 0.1, rng=stream(9, seed, "cv"), f_values=f)
            picks.append(loocv_select_J(range(2, 25), 4, X, Y, plans=plans)[0])
        lo, hi = np.percentile(picks, [25, 75])
        assert hi - lo <= 4


class TestExperiment:
    def test_single_replicate(self):
        rep = run_coverage_experiment(small_config(replicates=1), threads=1)
        s = rep.summary(100)
        assert s["band_coverage"] in (0.0, 1.0)
        assert set(s["pointwise_coverage"]) <= {0.0, 1.0}
        assert s["band_coverage_se"] == 0.0

    def test_serial_parallel_identical(self):
        cfg = small_config()
        a = run_coverage_experiment(cfg, threads=1, block=1).to_dict()
        b = run_coverage_experiment(cfg, threads=2, block=1).to_dict()
        assert a == b

    def test_summary_fields(self):
        rep = run_coverage_experiment(small_config(), threads=1)
        s = rep.summary(100)
        assert 0.0 <= s["band_coverage"] <= 1.0
        p = s["band_coverage"]
        assert s["band_coverage_se"] == pytest.approx(math.sqrt(p * (1 - p) / 4))
        assert sum(s["chosen_N_hist"].values()) == 4
        assert len(s["pointwise_coverage"]) == 101
        assert rep.curve_x[30] == pytest.approx(0.3)

    def test_rho_monotone(self):
        rep = run_coverage_experiment(small_config(replicates=10), threads=1)
        cov = [rep.band_coverage_at(100, rho) for rho in (0.25, 0.5, 1.0, 1.5, 2.0, 4.0)]
        assert all(a <= b for a, b in zip(cov, cov[1:]))
        assert rep.band_coverage_at(100, 0.5) == rep.summary(100)["band_coverage"]

    def test_failures_counted(self, monkeypatch):
        original = _SampleSizeRunner.replicate

        def flaky(self, rep):
            if rep == 1:
                raise ArithmeticError("boom")
            return original(self, rep)

        monkeypatch.setattr(_SampleSizeRunner, "replicate", flaky)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s = run_coverage_experiment(small_config(), threads=1).summary(100)
        assert s["failures"] == 1
        assert sum(s["chosen_N_hist"].values()) == 3

    def test_table_shape(self):
        rep = run_coverage_experiment(small_config(n_list=[60, 100], replicates=2), threads=1)
        ns, rows = rep.table_rows()
        assert ns == [60, 100]
        assert [r[0] for r in rows][:2] == ["credible_band_coverage", "credible_band_radius"]
        assert rows[2][1] == [None, None]


class TestConfig:
    def test_preset(self):
        cfg = ExperimentConfig.preset()
        assert cfg.n_list == [100, 300, 500, 700, 1000, 2000]
        assert (cfg.q, cfg.sigma0_sq, cfg.band_gamma, cfg.rho, cfg.replicates) == (4, 0.1, 0.05, 0.5, 1000)

    @pytest.mark.parametrize("field, value", [("replicates", 0), ("band_gamma", 0.5), ("n_list", []),
                                              ("error_kind", "cauchy"), ("candidates", [100])])
    def test_invalid_field_named(self, field, value):
        with pytest.raises(ParameterError, match=field):
            small_config(**{field: value})

    def test_rho_below_one_non_gaussian(self):
        with pytest.raises(ParameterError, match="rho"):
            small_config(error_kind="uniform", rho=0.5)

    def test_unknown_field(self):
        with pytest.raises(ParameterError, match="bogus"):
            ExperimentConfig.from_dict({"bogus": 1})

    def test_round_trip(self):
        cfg = small_config()
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.digest() == ExperimentConfig.from_dict(cfg.to_dict()).digest()

    def test_default_candidates(self):
        cfg = ExperimentConfig(n_list=[100], candidates=None)
        assert cfg.candidates_for(100) == list(range(2, 22))
        assert cfg.candidates_for(2000)[-1] == 30
