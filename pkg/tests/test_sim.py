"""Tests for the data-generating processes and the Monte-Carlo harness."""

import json
import math

import numpy as np
import pytest
from scipy.special import expit

from roseforest.cart import ForestParams
from roseforest.estimator import ConfigurationError, FitConfig
from roseforest.schemes import Scheme
from roseforest.sim import (
    DGP_KINDS,
    Dgp,
    UndefinedMetricError,
    _gamma_mean_var,
    _trim_sorted,
    relative_accuracy,
    replication_seed,
    run_monte_carlo,
    sample,
)

SMALL_FOREST = ForestParams(n_trees=10, min_node_size=15)


def oracle_scheme(dgp: Dgp) -> Scheme:
    return Scheme.oracle(
        weight=dgp.oracle_weight(), nuisances=dgp.oracle_nuisances()
    )


def base_config(scheme: Scheme, k_folds: int = 2) -> FitConfig:
    return FitConfig(scheme=scheme, k_folds=k_folds)


class TestDgp:
    def test_unknown_kind_lists_valid_names(self):
        with pytest.raises(ValueError) as err:
            Dgp(kind="sim9", n=100)
        for kind in DGP_KINDS:
            assert kind in str(err.value)

    def test_sample_size_must_be_positive(self):
        with pytest.raises(ValueError):
            Dgp(kind="sim2", n=0)

    def test_model_specs_match_processes(self):
        assert Dgp("sim1a", 10).model_spec().link.name == "identity"
        assert Dgp("sim1b", 10).model_spec().link.name == "sqrt"
        spec3 = Dgp("sim3", 10).model_spec()
        assert spec3.n_moments == 2
        assert Dgp("sim2", 10).model_spec().n_moments == 1

    def test_oracle_weight_unavailable_kinds_raise(self):
        for kind in ("sim1b", "sim3"):
            with pytest.raises(ValueError):
                Dgp(kind, 10).oracle_weight()

    def test_sim3_oracle_nuisances_formulas(self):
        dgp = Dgp("sim3", 10)
        nuis = dgp.oracle_nuisances()
        z = np.array([[0.0, 0.0, 0.0], [1.0, -1.0, 2.0]])
        p0 = 0.1 + 0.8 * expit(z[:, 0])
        mean_sum = expit(z).sum(axis=1)
        np.testing.assert_allclose(nuis.m[0](z), (1 - p0) * mean_sum)
        np.testing.assert_allclose(nuis.m[1](z), p0)
        np.testing.assert_allclose(nuis.f(z), mean_sum)


class TestSample:
    def test_sim1a_probability_clamp(self):
        data = sample(Dgp("sim1a", 10_000), seed=3)
        p = np.maximum(expit(3.0 * data.z[:, 0]), 0.01)
        assert p.min() >= 0.01
        # The clamp is actually exercised for strongly negative z1.
        assert np.any(expit(3.0 * data.z[:, 0]) < 0.01)

    def test_sim1a_point_mass_rows_are_bitwise_exact(self):
        dgp = Dgp("sim1a", 4000)
        data = sample(dgp, seed=11)
        fz = expit(data.z[:, :5]).sum(axis=1)
        degenerate = data.x == fz
        frac = degenerate.mean()
        assert 0.4 < frac < 0.6
        rows = np.flatnonzero(degenerate)
        assert np.array_equal(
            data.y[rows], dgp.theta0 * data.x[rows] + fz[rows]
        )

    def test_sim1a_fig2a_has_no_point_masses(self):
        data = sample(Dgp("sim1a_fig2a", 4000), seed=11)
        fz = expit(data.z[:, :5]).sum(axis=1)
        assert not np.any(data.x == fz)

    def test_sim2_marginal_variance_of_x(self):
        data = sample(Dgp("sim2", 10_000), seed=5)
        assert abs(np.var(data.x) - 4.0) < 0.3
        assert abs(np.var(data.z[:, 1]) - 4.0) < 0.3

    def test_sim3_zero_inflation_fraction(self):
        data = sample(Dgp("sim3", 10_000), seed=7)
        assert abs(np.mean(data.x == 0.0) - 0.5) < 0.03

    def test_sim1b_supports_and_point_masses(self):
        dgp = Dgp("sim1b", 4000)
        data = sample(dgp, seed=13)
        assert np.all(data.x >= 0.0)
        assert np.all(data.y > 0.0)
        fz = expit(data.z[:, :5]).sum(axis=1)
        rows = np.flatnonzero(data.x == fz)
        assert rows.size > 100
        np.testing.assert_array_equal(
            data.y[rows], (dgp.theta0 * data.x[rows] + fz[rows]) ** 2
        )

    def test_gamma_moments_match_mean_variance_parameterization(self):
        # One fixed (x, z) from the sqrt-link process: p = 0.25, fz = 2.5,
        # x = 1.5 gives mean 16 and variance 0.01 * 16^2 / sqrt(0.25) = 5.12.
        mean, var = 16.0, 5.12
        shape = mean**2 / var
        n = 100_000
        rng = np.random.default_rng(123)
        draws = _gamma_mean_var(rng, np.full(n, mean), np.full(n, var))
        se_mean = math.sqrt(var / n)
        assert abs(draws.mean() - mean) < 5 * se_mean
        se_var = math.sqrt(2 * var**2 * (1 + 3 / shape) / n)
        assert abs(draws.var() - var) < 5 * se_var

    def test_gamma_zero_variance_is_point_mass(self):
        rng = np.random.default_rng(0)
        out = _gamma_mean_var(rng, np.array([3.5, 2.0]), np.array([0.0, 1e-13]))
        assert np.array_equal(out, np.array([3.5, 2.0]))

    def test_integer_seed_matches_seed_sequence(self):
        dgp = Dgp("sim2", 50)
        a = sample(dgp, 5)
        b = sample(dgp, np.random.SeedSequence(5))
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.z, b.z)

    def test_replication_streams_are_reproducible_and_distinct(self):
        dgp = Dgp("sim3", 200)
        a = sample(dgp, replication_seed(7, 3))
        b = sample(dgp, replication_seed(7, 3))
        c = sample(dgp, replication_seed(7, 4))
        assert np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x)
        assert not np.array_equal(a.y, c.y)


class TestRunMonteCarlo:
    def test_reps_below_two_rejected(self):
        dgp = Dgp("sim2", 100)
        sch = oracle_scheme(dgp)
        with pytest.raises(ValueError):
            run_monte_carlo(dgp, [sch], reps=1, cfg=base_config(sch), seed=0)

    def test_configuration_errors_propagate(self):
        dgp = Dgp("sim2", 10)
        sch = oracle_scheme(dgp)
        cfg = base_config(sch, k_folds=10)
        with pytest.raises(ConfigurationError):
            run_monte_carlo(dgp, [sch], reps=2, cfg=cfg, seed=0)

    def test_identical_schemes_share_theta_streams(self):
        # An unweighted fit and an oracle fit with constant weight one are
        # algebraically the same estimator and must match bitwise.
        dgp = Dgp("sim2", 60)
        unweighted = Scheme.unweighted(forest_params=SMALL_FOREST)
        constant_one = Scheme.oracle(weight=1.0, forest_params=SMALL_FOREST)
        report = run_monte_carlo(
            dgp,
            [("unweighted", unweighted), ("constant_one", constant_one)],
            reps=3,
            cfg=base_config(unweighted),
            seed=21,
        )
        a = report.replications["unweighted"]
        b = report.replications["constant_one"]
        assert np.array_equal(a.theta_hat, b.theta_hat)
        assert np.array_equal(a.v_hat, b.v_hat)

    def test_weight_scaling_leaves_estimates_unchanged(self):
        dgp = Dgp("sim2", 80)
        nuis = dgp.oracle_nuisances()
        one = Scheme.oracle(weight=1.0, nuisances=nuis)
        two = Scheme.oracle(weight=2.0, nuisances=nuis)
        report = run_monte_carlo(
            dgp, [("one", one), ("two", two)], reps=3,
            cfg=base_config(one), seed=2,
        )
        assert np.array_equal(
            report.replications["one"].theta_hat,
            report.replications["two"].theta_hat,
        )
        assert np.array_equal(
            report.replications["one"].v_hat,
            report.replications["two"].v_hat,
        )

    def test_oracle_sim2_coverage(self):
        dgp = Dgp("sim2", 400)
        sch = oracle_scheme(dgp)
        report = run_monte_carlo(
            dgp, [("oracle", sch)], reps=500, cfg=base_config(sch), seed=404
        )
        m = report.metrics["oracle"]
        assert 0.92 <= m.coverage_at_95 <= 0.975
        assert m.n_failed == 0

    def test_metric_identities_and_ratio(self):
        dgp = Dgp("sim2", 80)
        unweighted = Scheme(
            kind="unweighted", oracle_nuisances=dgp.oracle_nuisances()
        )
        oracle = oracle_scheme(dgp)
        report = run_monte_carlo(
            dgp, [("unweighted", unweighted), ("oracle", oracle)],
            reps=20, cfg=base_config(unweighted), seed=9,
        )
        for label in report.labels:
            m = report.metrics[label]
            assert m.mse == m.squared_bias + m.variance
            assert 0.0 <= m.coverage_at_95 <= 1.0
        assert report.metrics["unweighted"].mse_ratio_to_unweighted == 1.0
        ratio = report.metrics["oracle"].mse_ratio_to_unweighted
        assert ratio == pytest.approx(
            report.metrics["oracle"].mse / report.metrics["unweighted"].mse
        )

    def test_duplicate_scheme_labels_get_suffixes(self):
        dgp = Dgp("sim2", 60)
        nuis = dgp.oracle_nuisances()
        schemes = [
            Scheme.oracle(weight=1.0, nuisances=nuis),
            Scheme.oracle(weight=3.0, nuisances=nuis),
        ]
        report = run_monte_carlo(
            dgp, schemes, reps=2, cfg=base_config(schemes[0]), seed=1
        )
        assert report.labels == ("oracle", "oracle_2")

    def test_failures_counted_not_fatal(self):
        def broken_weight(zmat):
            raise ValueError("deliberately broken weight")

        dgp = Dgp("sim2", 60)
        sch = Scheme.oracle(
            weight=broken_weight, nuisances=dgp.oracle_nuisances()
        )
        report = run_monte_carlo(
            dgp, [("broken", sch)], reps=3, cfg=base_config(sch), seed=0
        )
        m = report.metrics["broken"]
        assert m.n_failed == 3
        assert math.isnan(m.mse)
        assert math.isnan(m.coverage_at_95)
        assert np.all(report.replications["broken"].failed)

    def test_thread_count_does_not_change_report(self):
        dgp = Dgp("sim2", 150)
        sch = oracle_scheme(dgp)
        cfg = base_config(sch)
        serial = run_monte_carlo(dgp, [("oracle", sch)], 6, cfg, seed=33)
        threaded = run_monte_carlo(
            dgp, [("oracle", sch)], 6, cfg, seed=33,
            parallel=True, n_threads=3,
        )
        assert serial.to_json(include_replications=True) == threaded.to_json(
            include_replications=True
        )

    def test_repeated_runs_are_byte_identical_with_fitted_forests(self):
        dgp = Dgp("sim2", 80)
        sch = Scheme.unweighted(forest_params=SMALL_FOREST)
        cfg = base_config(sch)
        a = run_monte_carlo(dgp, [sch], 3, cfg, seed=77)
        b = run_monte_carlo(dgp, [sch], 3, cfg, seed=77)
        assert a.to_json(include_replications=True) == b.to_json(
            include_replications=True
        )

    def test_coverage_is_never_trimmed(self):
        dgp = Dgp("sim2", 120)
        sch = oracle_scheme(dgp)
        cfg = base_config(sch)
        plain = run_monte_carlo(dgp, [("o", sch)], 10, cfg, seed=15)
        trimmed = run_monte_carlo(dgp, [("o", sch)], 10, cfg, seed=15, trim=0.3)
        assert (
            plain.metrics["o"].coverage_at_95
            == trimmed.metrics["o"].coverage_at_95
        )
        assert trimmed.trim == 0.3

    def test_trim_bounds_validated(self):
        dgp = Dgp("sim2", 60)
        sch = oracle_scheme(dgp)
        with pytest.raises(ValueError):
            run_monte_carlo(dgp, [sch], 2, base_config(sch), trim=0.5)


class TestTrimHelper:
    def test_one_percent_of_hundred_drops_one_per_tail(self):
        values = np.arange(100.0)[::-1]
        out = _trim_sorted(values, 0.01)
        assert out.size == 98
        assert out[0] == 1.0 and out[-1] == 98.0

    def test_small_samples_are_untrimmed(self):
        values = np.array([5.0, 1.0, 3.0])
        out = _trim_sorted(values, 0.01)
        assert np.array_equal(out, np.array([1.0, 3.0, 5.0]))

    def test_heavy_trim_keeps_at_least_one_value(self):
        out = _trim_sorted(np.array([9.0, 2.0, 4.0]), 0.4)
        assert np.array_equal(out, np.array([4.0]))


class TestRelativeAccuracy:
    def test_unweighted_scores_zero(self):
        assert relative_accuracy(10.0, 10.0, 2.0) == 0.0

    def test_oracle_scores_one(self):
        assert relative_accuracy(10.0, 2.0, 2.0) == 1.0

    def test_interior_value(self):
        assert relative_accuracy(10.0, 4.0, 2.0) == 0.75

    def test_can_exceed_one_or_be_negative(self):
        assert relative_accuracy(10.0, 1.0, 2.0) == pytest.approx(1.125)
        assert relative_accuracy(10.0, 12.0, 2.0) == pytest.approx(-0.25)

    def test_nonpositive_denominator_rejected(self):
        with pytest.raises(UndefinedMetricError):
            relative_accuracy(2.0, 1.0, 2.0)
        with pytest.raises(UndefinedMetricError):
            relative_accuracy(1.0, 1.0, 2.0)


@pytest.fixture(scope="module")
def report():
    dgp = Dgp("sim2", 80)
    unweighted = Scheme(
        kind="unweighted", oracle_nuisances=dgp.oracle_nuisances()
    )
    oracle = oracle_scheme(dgp)
    return run_monte_carlo(
        dgp, [("unweighted", unweighted), ("oracle", oracle)],
        reps=4, cfg=base_config(unweighted), seed=55,
    )


class TestReportSerialization:
    def test_json_round_trip(self, report, tmp_path):
        path = tmp_path / "report.json"
        report.write_json(path)
        loaded = json.loads(path.read_text(encoding="utf-8"))
        assert loaded["dgp"] == {"kind": "sim2", "n": 80, "theta0": 1.0}
        assert loaded["reps"] == 4
        assert set(loaded["metrics"]) == {"unweighted", "oracle"}
        assert loaded["metrics"]["oracle"]["n_failed"] == 0
        assert "replications" not in loaded

    def test_json_can_include_replications(self, report):
        loaded = json.loads(report.to_json(include_replications=True))
        assert len(loaded["replications"]["oracle"]["theta_hat"]) == 4

    def test_csv_layout(self, report, tmp_path):
        path = tmp_path / "report.csv"
        report.write_csv(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "scheme,metric,value"
        assert len(lines) == 1 + 2 * 6
        cells = [line.split(",") for line in lines[1:]]
        assert {row[0] for row in cells} == {"unweighted", "oracle"}
        unweighted_mse = next(
            float(row[2])
            for row in cells
            if row[0] == "unweighted" and row[1] == "mse"
        )
        assert unweighted_mse == report.metrics["unweighted"].mse
