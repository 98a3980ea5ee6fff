import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpesim import numcore
from tpesim.dgm import CONTROL_VARIANCES, RHO, TREATMENT_VARIANCES, VISIT_WEEKS
from tpesim.numcore import (
    InvalidParameterError,
    NotPositiveDefiniteError,
    RngStream,
    bayes_lm_draw,
    expit,
    fit_ols,
    mvn_condition,
    mvn_sample,
    spatial_power_cov,
)


class TestSpatialPowerCov:
    def test_one_lag_correlation_is_rho(self):
        cov = spatial_power_cov((0.48, 0.75), (0.0, 4.0), 0.8)
        assert cov[0, 1] == pytest.approx(0.8 * np.sqrt(0.48 * 0.75), abs=1e-12)
        assert cov[0, 1] == pytest.approx(0.48, abs=1e-4)  # 0.8*sqrt(0.36) = 0.48

    def test_diagonal_is_variances(self):
        v = (0.48, 0.75, 0.8)
        cov = spatial_power_cov(v, (0.0, 4.0, 8.0), 0.8)
        assert np.allclose(np.diag(cov), v)

    def test_two_lag_entry(self):
        v = (0.5, 0.7, 1.1)
        cov = spatial_power_cov(v, (0.0, 4.0, 8.0), 0.8)
        assert cov[0, 2] == pytest.approx(np.sqrt(v[0] * v[2]) * 0.8**2, abs=1e-12)

    def test_uneven_weeks_use_fractional_lags(self):
        cov = spatial_power_cov((1.0, 1.0, 1.0), (0.0, 4.0, 14.0), 0.8)
        assert cov[0, 2] == pytest.approx(0.8 ** (14.0 / 4.0), abs=1e-12)

    @pytest.mark.parametrize("variances", [TREATMENT_VARIANCES, CONTROL_VARIANCES])
    def test_trial_parameters_give_pd_matrix(self, variances):
        cov = spatial_power_cov(variances, VISIT_WEEKS, RHO)
        assert np.allclose(cov, cov.T)
        np.linalg.cholesky(cov)

    def test_rejects_bad_parameters(self):
        with pytest.raises(InvalidParameterError):
            spatial_power_cov((1.0, -0.1), (0.0, 4.0), 0.8)
        with pytest.raises(InvalidParameterError):
            spatial_power_cov((1.0, 1.0), (0.0, 4.0), 1.0)
        with pytest.raises(InvalidParameterError):
            spatial_power_cov((1.0, 1.0), (4.0, 0.0), 0.8)

    @given(
        rho=st.floats(0.05, 0.95),
        variances=st.lists(st.floats(0.1, 5.0), min_size=2, max_size=6),
    )
    @settings(max_examples=50, deadline=None)
    def test_always_symmetric_pd(self, rho, variances):
        weeks = np.cumsum([0.0] + [4.0] * (len(variances) - 1))
        cov = spatial_power_cov(variances, weeks, rho)
        assert np.allclose(cov, cov.T)
        np.linalg.cholesky(cov)


class TestRngStream:
    def test_same_path_reproduces(self):
        a = RngStream(7, (1, 2)).generator().standard_normal(5)
        b = RngStream(7, (1, 2)).generator().standard_normal(5)
        assert np.array_equal(a, b)

    def test_distinct_paths_differ(self):
        a = RngStream(7, (1, 2)).generator().standard_normal(5)
        b = RngStream(7, (1, 3)).generator().standard_normal(5)
        assert not np.array_equal(a, b)

    def test_child_appends(self):
        assert RngStream(7).child(1).child(2, 3).path == (1, 2, 3)


class TestMvnSample:
    def test_deterministic_per_stream(self):
        cov = spatial_power_cov(TREATMENT_VARIANCES, VISIT_WEEKS, RHO)
        mean = np.zeros(6)
        x = mvn_sample(mean, cov, RngStream(3, (1,)))
        y = mvn_sample(mean, cov, RngStream(3, (1,)))
        assert np.array_equal(x, y)

    def test_moments_identity_cov(self):
        x = mvn_sample(np.zeros(3), np.eye(3), RngStream(5), size=200_000)
        se = 1.0 / np.sqrt(200_000)
        assert np.all(np.abs(x.mean(axis=0)) < 4 * se)

    def test_moments_trial_cov(self):
        mean = np.array([7.92, 7.55, 7.2, 7.1, 7.05, 7.05])
        cov = spatial_power_cov(TREATMENT_VARIANCES, VISIT_WEEKS, RHO)
        x = mvn_sample(mean, cov, RngStream(11), size=100_000)
        assert np.all(np.abs(x.mean(axis=0) - mean) < 0.02)
        emp = np.cov(x.T)
        assert np.abs(emp - cov).max() < 0.03

    def test_rejects_non_pd(self):
        with pytest.raises(NotPositiveDefiniteError):
            mvn_sample(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), RngStream(1))


class TestMvnCondition:
    def test_vacuous_conditioning(self):
        mean = np.array([1.0, 2.0])
        cov = np.array([[1.0, 0.3], [0.3, 2.0]])
        miss, m, c = mvn_condition(mean, cov, [], [])
        assert np.array_equal(miss, [0, 1])
        assert np.allclose(m, mean) and np.allclose(c, cov)

    def test_all_observed_is_empty(self):
        miss, m, c = mvn_condition([0.0, 0.0], np.eye(2), [0, 1], [1.0, 2.0])
        assert miss.size == 0 and m.size == 0 and c.shape == (0, 0)

    def test_bivariate_closed_form(self):
        s1, s2, r = 1.3, 0.7, 0.6
        cov = np.array([[s1**2, r * s1 * s2], [r * s1 * s2, s2**2]])
        mean = np.array([2.0, -1.0])
        shift = 0.9
        _, m, c = mvn_condition(mean, cov, [0], [mean[0] + shift])
        assert m[0] == pytest.approx(mean[1] + r * shift * s2 / s1, abs=1e-12)
        assert c[0, 0] == pytest.approx(s2**2 * (1 - r**2), abs=1e-12)

    def test_block_inverse_oracle(self):
        cov = spatial_power_cov(CONTROL_VARIANCES, VISIT_WEEKS, RHO)
        mean = np.arange(6.0)
        obs_idx = [0, 1, 2]
        vals = np.array([0.3, 1.4, 1.9])
        miss, m, c = mvn_condition(mean, cov, obs_idx, vals)
        # brute-force block inversion
        o, u = np.array(obs_idx), miss
        k = cov[np.ix_(u, o)] @ np.linalg.inv(cov[np.ix_(o, o)])
        m2 = mean[u] + k @ (vals - mean[o])
        c2 = cov[np.ix_(u, u)] - k @ cov[np.ix_(o, u)]
        assert np.allclose(m, m2, atol=1e-10)
        assert np.allclose(c, c2, atol=1e-10)
        assert c.shape == (3, 3)
        np.linalg.cholesky(c)

    @given(st.permutations([0, 2, 4]))
    @settings(max_examples=20, deadline=None)
    def test_observed_permutation_invariance(self, perm):
        cov = spatial_power_cov(TREATMENT_VARIANCES, VISIT_WEEKS, RHO)
        mean = np.linspace(0.0, 1.0, 6)
        vals = {0: 0.5, 2: -0.2, 4: 1.1}
        base = mvn_condition(mean, cov, [0, 2, 4], [vals[i] for i in [0, 2, 4]])
        other = mvn_condition(mean, cov, perm, [vals[i] for i in perm])
        assert np.allclose(base[1], other[1], atol=1e-12)
        assert np.allclose(base[2], other[2], atol=1e-12)

    def test_rejects_duplicates(self):
        with pytest.raises(InvalidParameterError):
            mvn_condition([0.0, 0.0], np.eye(2), [0, 0], [1.0, 1.0])


class TestBayesLmDraw:
    def _fit(self, seed=0, n=200, sigma=0.5):
        gen = np.random.default_rng(seed)
        X = np.column_stack([np.ones(n), gen.normal(size=n)])
        y = X @ np.array([1.0, -2.0]) + sigma * gen.normal(size=n)
        return fit_ols(X, y)

    def test_zero_noise_short_circuits(self):
        fit = self._fit(sigma=0.0)
        coef, s2 = bayes_lm_draw(fit, RngStream(1))
        assert s2 == 0.0
        assert np.allclose(coef, fit.coefficients)

    def test_posterior_mean_matches_fit(self):
        fit = self._fit()
        draws = np.array([
            bayes_lm_draw(fit, RngStream(2, (i,)))[0] for i in range(10_000)
        ])
        se = draws.std(axis=0, ddof=1) / np.sqrt(10_000)
        assert np.all(np.abs(draws.mean(axis=0) - fit.coefficients) < 4 * se)

    def test_variance_draw_moment(self):
        fit = self._fit()
        s2 = np.array([bayes_lm_draw(fit, RngStream(3, (i,)))[1] for i in range(20_000)])
        df = fit.residual_df
        expected = df * fit.residual_variance / (df - 2)
        assert s2.mean() == pytest.approx(expected, rel=0.05)

    def test_reproducible_and_paths_independent(self):
        fit = self._fit()
        a = bayes_lm_draw(fit, RngStream(9, (4,)))
        b = bayes_lm_draw(fit, RngStream(9, (4,)))
        c = bayes_lm_draw(fit, RngStream(9, (5,)))
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]
        assert not np.array_equal(a[0], c[0])

    def test_rejects_zero_df(self):
        fit = numcore.RegressionFit(np.zeros(2), 1.0, np.eye(2), 0)
        with pytest.raises(InvalidParameterError):
            bayes_lm_draw(fit, RngStream(0))


class TestExpit:
    def test_reference_values(self):
        assert expit(0.0) == pytest.approx(0.5, abs=1e-15)
        assert expit(0.1) == pytest.approx(0.52498, abs=5e-6)
        assert expit(0.6) == pytest.approx(0.64566, abs=5e-6)

    @given(st.floats(-30, 30))
    @settings(max_examples=100, deadline=None)
    def test_symmetry(self, x):
        assert abs(expit(x) + expit(-x) - 1.0) <= 1e-12

    @given(st.floats(-15, 15), st.floats(1e-4, 5.0))
    @settings(max_examples=100, deadline=None)
    def test_strictly_increasing(self, x, h):
        # strict on a domain where the increments are representable
        assert expit(x + h) > expit(x)
