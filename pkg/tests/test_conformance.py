import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppc import conformance as cf


def normal_tail(d: float) -> float:
    """Standard normal survival function via the stdlib erfc."""
    return 0.5 * math.erfc(d / math.sqrt(2.0))


def ks_stat(ps: np.ndarray) -> float:
    ps = np.sort(ps)
    n = ps.size
    i = np.arange(1, n + 1)
    return max(np.max(i / n - ps), np.max(ps - (i - 1) / n))


class TestMahalanobis:
    def test_zero_at_prediction(self):
        assert cf.mahalanobis([1.0, 2.0], [1.0, 2.0], [0.5, 3.0]) == 0.0

    def test_unit_sigma_is_euclidean(self):
        z = np.array([3.0, 4.0])
        assert cf.mahalanobis(z, [0.0, 0.0], [1.0, 1.0]) == pytest.approx(5.0)

    def test_scalar_oracle(self):
        # sqrt((1-0)^2/1 + (2-0)^2/4) = sqrt(2)
        assert cf.mahalanobis([1.0, 2.0], [0.0, 0.0], [1.0, 2.0]) == pytest.approx(math.sqrt(2.0))

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError, match="sigma"):
            cf.mahalanobis([1.0], [0.0], [0.0])


class TestChi2Survival:
    def test_zero_gives_full_mass(self):
        for k in (1, 2, 5, 16, 48):
            assert cf.chi2_survival(0.0, k) == 1.0

    @pytest.mark.parametrize("x", [0.0, 0.5, 1.0, 2.0, 5.0, 10.0])
    def test_two_dof_closed_form(self, x):
        assert cf.chi2_survival(x, 2) == pytest.approx(math.exp(-x / 2.0), abs=1e-10)

    def test_one_dof_monte_carlo(self):
        rng = np.random.default_rng(0)
        n = 10**6
        samples = rng.standard_normal(n) ** 2
        x = 3.841
        est = np.mean(samples > x)
        se = math.sqrt(est * (1 - est) / n)
        p = cf.chi2_survival(x, 1)
        assert abs(p - 0.05) < 1e-3
        assert abs(p - est) <= 3 * se

    @pytest.mark.parametrize("k", [1, 4, 16])
    def test_monte_carlo_multiple_dof(self, k):
        rng = np.random.default_rng(100 + k)
        n = 10**6
        samples = rng.standard_normal((n, k)) ** 2
        totals = samples.sum(axis=1)
        for x in (0.5 * k, 1.0 * k, 2.0 * k):
            est = np.mean(totals > x)
            se = math.sqrt(max(est * (1 - est), 1e-12) / n)
            assert abs(cf.chi2_survival(x, k) - est) <= 3 * se

    def test_chi2_one_dof_normal_tail_identity(self):
        for d in np.linspace(0.0, 8.0, 81):
            assert cf.chi2_survival(d * d, 1) == pytest.approx(2 * normal_tail(d), abs=1e-10)

    def test_monotone_and_continuous(self):
        xs = np.linspace(0.0, 60.0, 601)
        ps = [cf.chi2_survival(x, 5) for x in xs]
        assert all(a >= b for a, b in zip(ps, ps[1:]))
        for x in (0.5, 3.0, 20.0, 55.0):
            assert abs(cf.chi2_survival(x, 5) - cf.chi2_survival(x + 1e-9, 5)) < 1e-6

    def test_extreme_distance_underflows_to_zero_not_nan(self):
        p = cf.chi2_survival(4000.0, 16)
        assert 0.0 <= p < 1e-300

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            cf.chi2_survival(-1.0, 2)
        with pytest.raises(ValueError):
            cf.chi2_survival(1.0, 0)


class TestLogLikelihood:
    def test_unit_case(self):
        ll = cf.log_likelihood([0.0], [0.0], [1.0])
        assert ll == pytest.approx(-math.log(math.sqrt(2 * math.pi)), abs=1e-12)

    def test_product_of_univariate_densities_oracle(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=4)
        z_hat = rng.normal(size=4)
        sigma = np.abs(rng.normal(size=4)) + 0.3
        dens = np.prod(
            1.0 / (np.sqrt(2 * np.pi) * sigma)
            * np.exp(-0.5 * (z - z_hat) ** 2 / sigma**2)
        )
        assert cf.log_likelihood(z, z_hat, sigma) == pytest.approx(math.log(dens), rel=1e-10)


class TestProbabilityOfConformance:
    def test_perfect_prediction(self):
        assert cf.probability_of_conformance([1.0, 2.0], [1.0, 2.0], [0.1, 0.1]) == 1.0

    def test_univariate_reduces_to_folded_normal(self):
        for d in (0.3, 1.0, 2.5):
            p = cf.probability_of_conformance([d], [0.0], [1.0])
            assert p == pytest.approx(2 * normal_tail(d), abs=1e-10)

    def test_calibration_ks_uniform(self):
        rng = np.random.default_rng(7)
        n = 10**4
        n_e = 6
        z_hat = rng.normal(size=n_e)
        sigma = np.abs(rng.normal(size=n_e)) + 0.5
        ps = np.array([
            cf.probability_of_conformance(z_hat + sigma * rng.standard_normal(n_e), z_hat, sigma)
            for _ in range(n)
        ])
        assert ks_stat(ps) < 1.63 / math.sqrt(n)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=5), st.floats(min_value=0.1, max_value=3.0))
    def test_monotone_in_error(self, idx, bump):
        rng = np.random.default_rng(11)
        z = rng.normal(size=6)
        z_hat = rng.normal(size=6)
        sigma = np.abs(rng.normal(size=6)) + 0.5
        p0 = cf.probability_of_conformance(z, z_hat, sigma)
        z2 = z.copy()
        z2[idx] += bump * np.sign(z2[idx] - z_hat[idx] or 1.0)
        p1 = cf.probability_of_conformance(z2, z_hat, sigma)
        assert p1 < p0


class TestClassify:
    def test_boundary_is_normal(self):
        assert cf.classify(0.05, 0.05) == "normal"

    def test_alpha_zero_flags_nothing(self):
        assert cf.classify(0.0, 0.0) == "normal"

    def test_alpha_one_flags_everything_below_one(self):
        assert cf.classify(0.999, 1.0) == "anomalous"
        assert cf.classify(1.0, 1.0) == "normal"

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cf.classify(1.2, 0.5)


class TestReport:
    def test_recomposition_oracle(self):
        rng = np.random.default_rng(5)
        triples = []
        for _ in range(3):
            z = rng.normal(size=4)
            z_hat = rng.normal(size=4)
            sigma = np.abs(rng.normal(size=4)) + 0.2
            triples.append((z, z_hat, sigma))
        report = cf.report_from_triples(triples)
        total_sq = sum(cf.mahalanobis(*t) ** 2 for t in triples)
        assert report.p_sequence == pytest.approx(cf.chi2_survival(total_sq, 12), abs=1e-12)
        assert report.mean_log_likelihood == pytest.approx(
            np.mean([cf.log_likelihood(*t) for t in triples])
        )
        for s in report.steps:
            assert 0.0 <= s.p_conformance <= 1.0
            assert s.distance >= 0.0
