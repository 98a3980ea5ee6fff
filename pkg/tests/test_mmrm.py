import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpesim.collapse import PatternIssueReport, plan_collapse
from tpesim.dgm import CONTROL, TREATMENT, generate_trial
from tpesim.mi import ancova_change
from tpesim.mmrm import (
    DesignSpec,
    MmrmError,
    N_COVPAR,
    RankDeficientError,
    _params_from_chol,
    _reml_negloglik,
    build_design,
    estimate_mmrm,
    kenward_roger,
    kr_contrast_df,
    lsmeans,
    policy_mean,
    policy_variance,
    reml_fit,
    satterthwaite_df,
)


def per_visit_ols_cells(ds):
    """Per-visit least-squares cell means at the grand-mean baseline."""
    change = ds.change()
    X = np.column_stack([
        (ds.arm == CONTROL).astype(float), (ds.arm == TREATMENT).astype(float), ds.baseline
    ])
    out = []
    for j in range(5):
        coef, *_ = np.linalg.lstsq(X, change[:, j], rcond=None)
        out.append(coef[:2] + coef[2] * ds.baseline.mean())
    return np.array(out)  # (5, 2) control/treatment


class TestRemlCompleteData:
    def test_gls_equals_ols(self, complete_dataset):
        fit = reml_fit(complete_dataset, DesignSpec("simple"))
        oracle = per_visit_ols_cells(complete_dataset)
        for j in range(1, 6):
            lm = lsmeans(fit, j, [(CONTROL, 0), (TREATMENT, 0)], adjusted=False)
            assert np.abs(lm.means - oracle[j - 1]).max() < 1e-8

    def test_sigma_equals_residual_crossproducts(self, complete_dataset):
        fit = reml_fit(complete_dataset, DesignSpec("simple"))
        ds = complete_dataset
        X = np.column_stack([
            (ds.arm == CONTROL).astype(float), (ds.arm == TREATMENT).astype(float), ds.baseline
        ])
        resid = np.empty((ds.n, 5))
        for j in range(5):
            coef, *_ = np.linalg.lstsq(X, ds.change()[:, j], rcond=None)
            resid[:, j] = ds.change()[:, j] - X @ coef
        oracle = resid.T @ resid / (ds.n - 3)
        assert np.abs(fit.sigma - oracle).max() < 1e-6

    def test_lsmean_contrast_equals_ancova(self, complete_dataset):
        ds = complete_dataset
        fit = reml_fit(ds, DesignSpec("simple"))
        lm = lsmeans(fit, 5, [(TREATMENT, 0), (CONTROL, 0)], adjusted=False)
        est = lm.means[0] - lm.means[1]
        est_a, se_a, _ = ancova_change(ds.change()[:, 4], ds.arm, ds.baseline)
        assert est == pytest.approx(est_a, abs=1e-8)
        adj = kenward_roger(fit)
        ell = lm.rows[0] - lm.rows[1]
        se_kr = float(np.sqrt(ell @ adj.phi_adj @ ell))
        assert se_kr == pytest.approx(se_a, rel=1e-6)


class TestRemlMissingData:
    def test_shift_invariance(self, dataset):
        fit0 = reml_fit(dataset, DesignSpec("simple"))
        shifted = dataclasses.replace(dataset, y_tilde=dataset.y_tilde.copy())
        shifted.y_tilde[:, 1:] += 1.7  # shifts every change value by 1.7
        fit1 = reml_fit(shifted, DesignSpec("simple"))
        assert np.abs(fit1.sigma - fit0.sigma).max() < 1e-6
        lm0 = lsmeans(fit0, 5, [(TREATMENT, 0), (CONTROL, 0)], adjusted=False)
        lm1 = lsmeans(fit1, 5, [(TREATMENT, 0), (CONTROL, 0)], adjusted=False)
        assert np.allclose(lm1.means - lm0.means, 1.7, atol=1e-7)
        assert (lm1.means[0] - lm1.means[1]) == pytest.approx(
            lm0.means[0] - lm0.means[1], abs=1e-7)
        assert np.abs(lm1.cov - lm0.cov).max() < 1e-8

    def test_analytic_gradient_matches_finite_differences(self, dataset):
        design = build_design(dataset, DesignSpec("simple"))
        sigma0 = np.cov(np.nan_to_num(dataset.observed_change()).T) + 0.2 * np.eye(5)
        g0 = _params_from_chol(np.linalg.cholesky(sigma0))
        _, grad = _reml_negloglik(g0, design)
        num = np.zeros(N_COVPAR)
        h = 1e-5
        for t in range(N_COVPAR):
            gp = g0.copy(); gp[t] += h
            gm = g0.copy(); gm[t] -= h
            num[t] = (_reml_negloglik(gp, design)[0] - _reml_negloglik(gm, design)[0]) / (2 * h)
        rel = np.abs(grad - num) / np.maximum(np.abs(num), 1e-8)
        assert rel.max() < 1e-4

    def test_rank_deficiency_reported_with_cell(self, dataset):
        ds = dataclasses.replace(dataset, miss=dataset.miss.copy())
        # silence every post-IE outcome at the final visit in one arm, then
        # fit the identity coding without collapsing
        kill = (ds.arm == TREATMENT) & (ds.tau > 0)
        ds.miss[kill, 4] = True
        identity = plan_collapse(
            PatternIssueReport((False,) * 5, (False,) * 5, (False,) * 5), "pattern")
        with pytest.raises(RankDeficientError) as err:
            reml_fit(ds, DesignSpec("pattern", identity))
        assert err.value.cell[0] == 5  # names a final-visit cell

    def test_se_does_not_drop_when_observation_removed(self, dataset):
        fit0 = reml_fit(dataset, DesignSpec("simple"))
        lm0 = lsmeans(fit0, 5, [(TREATMENT, 0), (CONTROL, 0)], adjusted=False)
        ell = lm0.rows[0] - lm0.rows[1]
        se0 = float(np.sqrt(ell @ fit0.coef_cov @ ell))
        ds = dataclasses.replace(dataset, miss=dataset.miss.copy())
        candidates = np.where((ds.tau > 0) & ~ds.miss[:, 4])[0]
        ds.miss[candidates[0], 4] = True
        fit1 = reml_fit(ds, DesignSpec("simple"))
        lm1 = lsmeans(fit1, 5, [(TREATMENT, 0), (CONTROL, 0)], adjusted=False)
        se1 = float(np.sqrt(ell @ fit1.coef_cov @ ell))
        assert se1 >= se0 - 1e-10

    def test_too_few_subjects_rejected(self, default_cfg):
        tiny = dataclasses.replace(default_cfg, n_per_arm=5)
        ds = generate_trial(tiny, 0)
        with pytest.raises(MmrmError):
            reml_fit(ds, DesignSpec("simple"))


class TestKenwardRoger:
    def test_complete_data_df_is_ancova_df(self, complete_dataset):
        fit = reml_fit(complete_dataset, DesignSpec("simple"))
        lm = lsmeans(fit, 5, [(TREATMENT, 0), (CONTROL, 0)], adjusted=False)
        ell = lm.rows[0] - lm.rows[1]
        df, scale = kr_contrast_df(fit, ell)
        assert df == pytest.approx(complete_dataset.n - 3, abs=0.1)
        assert scale == pytest.approx(1.0, abs=1e-3)

    def test_missing_data_df_below_complete(self, dataset):
        fit = reml_fit(dataset, DesignSpec("simple"))
        lm = lsmeans(fit, 5, [(TREATMENT, 0), (CONTROL, 0)], adjusted=False)
        ell = lm.rows[0] - lm.rows[1]
        df, _ = kr_contrast_df(fit, ell)
        assert 50 < df < dataset.n - 3
        sat = satterthwaite_df(fit, ell)
        assert 50 < sat < dataset.n

    def test_adjusted_covariance_dominates(self, dataset):
        fit = reml_fit(dataset, DesignSpec("simple"))
        adj = kenward_roger(fit)
        diff = adj.phi_adj - adj.phi
        assert np.all(np.linalg.eigvalsh((diff + diff.T) / 2) > -1e-10)


class TestPolicy:
    def test_single_cell_returns_mean(self):
        assert policy_mean(np.array([-0.4]), np.array([1.0])) == -0.4
        total, prop, mean_part = policy_variance(
            np.array([-0.4]), np.array([[0.02]]), np.array([1.0]), 200)
        assert prop == 0.0 and total == pytest.approx(0.02, abs=1e-15)

    def test_weighted_mean(self):
        got = policy_mean(np.array([-0.5, -0.1]), np.array([0.8, 0.2]))
        assert got == pytest.approx(-0.42, abs=1e-15)

    def test_equal_means_ignore_weights(self):
        m = np.array([-0.3, -0.3, -0.3])
        for w in ([0.2, 0.3, 0.5], [1.0, 0.0, 0.0]):
            assert policy_mean(m, np.array(w)) == pytest.approx(-0.3, abs=1e-15)

    def test_worked_two_pattern_example(self):
        total, prop, mean_part = policy_variance(
            np.array([-0.5, -0.1]),
            np.diag([0.01, 0.04]),
            np.array([0.8, 0.2]),
            200,
        )
        assert prop == pytest.approx(1.28e-4, abs=1e-12)
        assert mean_part == pytest.approx(8.0e-3, abs=1e-12)
        assert total == pytest.approx(8.128e-3, abs=1e-12)

    def test_equal_cell_means_zero_proportion_part(self):
        total, prop, mean_part = policy_variance(
            np.array([-0.3, -0.3]), np.diag([0.01, 0.02]), np.array([0.6, 0.4]), 100)
        assert prop == 0.0
        assert total == pytest.approx(mean_part, abs=1e-15)

    @given(
        means=st.lists(st.floats(-2, 2), min_size=2, max_size=5),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=50, deadline=None)
    def test_two_block_sum_and_dominance(self, means, seed):
        k = len(means)
        gen = np.random.default_rng(seed)
        a = gen.normal(size=(k, k))
        cov = a @ a.T / k + np.eye(k) * 0.1
        w = gen.dirichlet(np.ones(k))
        total, prop, mean_part = policy_variance(np.array(means), cov, w, 150)
        # independent recomputation of the two blocks
        grad = np.array(means[:-1]) - means[-1]
        vm = (np.diag(w[:-1]) - np.outer(w[:-1], w[:-1])) / 150
        assert prop == pytest.approx(float(grad @ vm @ grad), abs=1e-12)
        assert mean_part == pytest.approx(float(w @ cov @ w), abs=1e-12)
        assert abs(total - (prop + mean_part)) <= 1e-12
        assert total >= mean_part - 1e-15


class TestEstimateMmrm:
    def test_zero_ie_variant2_equals_variant1(self, default_cfg):
        cfg = dataclasses.replace(
            default_cfg,
            control=dataclasses.replace(default_cfg.control, ie_intercept=(-50.0,) * 5),
            treatment=dataclasses.replace(default_cfg.treatment, ie_intercept=(-50.0,) * 5),
        )
        ds = generate_trial(cfg, 0)
        assert (ds.tau == 0).all()
        r1 = estimate_mmrm(ds, 1)
        r2 = estimate_mmrm(ds, 2)
        assert r2.collapse_level == 1
        assert r2.estimate == r1.estimate
        assert r2.se == r1.se
        assert r2.df == r1.df
        assert (r2.ci_lo, r2.ci_hi) == (r1.ci_lo, r1.ci_hi)
        assert r2.p_zero == r1.p_zero

    def test_policy_estimate_runs_and_records_level(self, dataset):
        res = estimate_mmrm(dataset, 3)
        assert res.method == "MMRM3"
        assert res.collapse_level in range(1, 7)
        assert res.collapse_label is not None
        assert res.ci_lo < res.estimate < res.ci_hi
        assert 0 <= res.p_zero <= 1 and 0 <= res.p_margin <= 1

    def test_margin_p_at_margin_is_half(self):
        from tpesim.results import t_inference

        ci, p_zero, p_margin = t_inference(-0.25, 0.1, 100.0, margin=-0.25)
        assert p_margin == pytest.approx(0.5, abs=1e-12)
        assert ci[0] == pytest.approx(-0.25 - (ci[1] + 0.25), abs=1e-12)

    def test_satterthwaite_variant_close_to_kr(self, dataset):
        r_kr = estimate_mmrm(dataset, 1, df_method="kr")
        r_sat = estimate_mmrm(dataset, 1, df_method="satterthwaite")
        assert r_sat.estimate == pytest.approx(r_kr.estimate, abs=1e-10)
        assert r_sat.df == pytest.approx(r_kr.df, rel=0.2)
