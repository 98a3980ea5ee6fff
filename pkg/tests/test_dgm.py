import dataclasses

import numpy as np
import pytest
from scipy.optimize import minimize

from tpesim.dgm import (
    CONTROL,
    TREATMENT,
    config_from_dict,
    config_to_dict,
    generate_trial,
    pioneer1_config,
    simulate_ie,
    simulate_missingness,
    simulate_on_treatment,
    apply_offtreatment_shift,
    theta_scenario_index,
    true_estimand,
    write_dataset_csv,
    THETA_GRID,
)
from tpesim.numcore import InvalidParameterError, RngStream


def big_arm(cfg, arm, n=100_000, seed=5):
    cfg = dataclasses.replace(cfg, n_per_arm=n)
    y = simulate_on_treatment(cfg, arm, RngStream(seed, (arm,)))
    return cfg, y


class TestOnTreatment:
    def test_treatment_means(self, default_cfg):
        _, y = big_arm(default_cfg, TREATMENT)
        assert np.all(np.abs(y.mean(axis=0) - (7.92, 7.55, 7.2, 7.1, 7.05, 7.05)) < 0.02)

    def test_control_final_variance(self, default_cfg):
        _, y = big_arm(default_cfg, CONTROL)
        assert y[:, 5].var(ddof=1) == pytest.approx(1.48, abs=0.03)

    def test_null_mode_matches_control(self):
        cfg = pioneer1_config("dar", "instant", 0.1, root_seed=5, null_mode=True)
        _, y = big_arm(cfg, TREATMENT)
        assert np.all(np.abs(y.mean(axis=0) - (7.92, 7.82, 7.8, 7.8, 7.78, 7.78)) < 0.02)


class TestIe:
    def test_hazard_floor_gives_no_events(self, default_cfg):
        cfg = dataclasses.replace(
            default_cfg,
            control=dataclasses.replace(default_cfg.control, ie_intercept=(-50.0,) * 5),
        )
        _, y = big_arm(cfg, CONTROL, n=20_000)
        cfg2 = dataclasses.replace(cfg, n_per_arm=20_000)
        tau = simulate_ie(cfg2, y, CONTROL, RngStream(1))
        assert np.all(tau == 0)

    @pytest.mark.parametrize("mechanism", ["dar", "dnar"])
    def test_cumulative_event_rates(self, mechanism):
        cfg = pioneer1_config(mechanism, "instant", 0.1, root_seed=6)
        for arm, expected in [(CONTROL, 25.5), (TREATMENT, 15.2)]:
            cfg_big, y = big_arm(cfg, arm)
            tau = simulate_ie(cfg_big, y, arm, RngStream(8, (arm,)))
            rate = (tau > 0).mean() * 100
            assert rate == pytest.approx(expected, abs=1.5)

    def test_dnar_coefficient_recovery(self):
        """A pooled logistic refit on at-risk patients recovers the
        current-visit coefficient: ~0 under the at-random hazard and the
        configured value under the not-at-random one."""

        def fit_visit2(mechanism, arm):
            cfg = pioneer1_config(mechanism, "instant", 0.1, root_seed=13)
            cfg_big, y = big_arm(cfg, arm, n=150_000, seed=17)
            tau = simulate_ie(cfg_big, y, arm, RngStream(19, (arm,)))
            at_risk = (tau == 0) | (tau >= 2)
            event = (tau == 2)[at_risk].astype(float)
            X = np.column_stack([
                np.ones(at_risk.sum()), y[at_risk, 0], y[at_risk, 1], y[at_risk, 2]
            ])

            def nll(b):
                lp = X @ b
                return -(event * lp - np.logaddexp(0.0, lp)).sum()

            start = np.array([-15.0, 0.3, 0.5, 0.5])
            res = minimize(nll, start, method="BFGS")
            return res.x

        b_dar = fit_visit2("dar", TREATMENT)
        assert abs(b_dar[3]) < 0.15
        b_dnar = fit_visit2("dnar", TREATMENT)
        assert b_dnar[3] == pytest.approx(0.75, abs=0.2)


class TestShift:
    def test_no_event_is_identity(self, default_cfg):
        y = np.arange(12.0).reshape(2, 6)
        out = apply_offtreatment_shift(default_cfg, y, np.zeros(2, dtype=int), CONTROL)
        assert np.array_equal(out, y)

    def test_instant_control(self, default_cfg):
        y = np.zeros((1, 6))
        out = apply_offtreatment_shift(default_cfg, y, np.array([3]), CONTROL)
        assert np.allclose(out[0], [0, 0, 0, -0.6, -0.6, -0.6])

    def test_gradual_treatment_ramp(self):
        cfg = pioneer1_config("dar", "gradual", 0.1, root_seed=0)
        y = np.zeros((1, 6))
        out = apply_offtreatment_shift(cfg, y, np.array([2]), TREATMENT)
        expected = [0, 0, 0.0, -0.25 / 3, -0.25 * 2 / 3, -0.25]
        assert np.allclose(out[0], expected)


class TestMissingness:
    def test_no_event_all_observed(self, default_cfg):
        miss = simulate_missingness(default_cfg, np.zeros(100, dtype=int), RngStream(1))
        assert not miss.any()

    def test_observed_fraction_at_final_visit(self):
        """The per-visit withdrawal probability equals the grid value, which
        reproduces the published observed/missing splits among patients who
        discontinued; a logistic transform of the grid would not."""
        for theta, arm, expected in [(0.1, CONTROL, 75.7), (0.6, TREATMENT, 8.7)]:
            cfg = pioneer1_config("dar", "instant", theta, root_seed=23, n_per_arm=150_000)
            ds = generate_trial(cfg, 0)
            sel = (ds.arm == arm) & (ds.tau > 0)
            observed = (~ds.miss[sel, 4]).mean() * 100
            assert observed == pytest.approx(expected, abs=1.5)

    def test_monotone(self, dataset):
        m = dataset.miss
        assert not np.any(m[:, :-1] & ~m[:, 1:])


class TestGenerateTrial:
    def test_deterministic(self, default_cfg):
        a = generate_trial(default_cfg, 3)
        b = generate_trial(default_cfg, 3)
        assert np.array_equal(a.y_tilde, b.y_tilde)
        assert np.array_equal(a.tau, b.tau)
        assert np.array_equal(a.miss, b.miss)

    def test_replicates_differ(self, default_cfg):
        a = generate_trial(default_cfg, 3)
        b = generate_trial(default_cfg, 4)
        assert not np.array_equal(a.y_tilde, b.y_tilde)

    def test_invariants(self, default_cfg):
        for r in range(5):
            ds = generate_trial(default_cfg, r)
            ds.validate()
            status = ds.ie_status()
            assert np.all(ds.miss <= status)
            assert np.all(ds.pattern_indicator().sum(axis=1) <= 1)

    def test_visit5_status_block(self):
        """Average final-visit status splits for the lowest and highest
        withdrawal scenarios, checked against the published percentages."""
        targets = {
            (0.1, CONTROL): (74.5, 19.3, 6.2),
            (0.1, TREATMENT): (84.8, 10.8, 4.4),
            (0.6, CONTROL): (74.5, 3.5, 22.0),
        }
        for (theta, arm), (on_t, disc_obs, disc_miss) in targets.items():
            cfg = pioneer1_config("dar", "instant", theta, root_seed=29, n_per_arm=120_000)
            ds = generate_trial(cfg, 0)
            sel = ds.arm == arm
            disc = ds.tau[sel] > 0
            got = (
                (~disc).mean() * 100,
                (disc & ~ds.miss[sel, 4]).mean() * 100,
                (disc & ds.miss[sel, 4]).mean() * 100,
            )
            assert got == pytest.approx((on_t, disc_obs, disc_miss), abs=1.0)


class TestTrueEstimand:
    def test_null_truth_is_zero(self):
        cfg = pioneer1_config("dar", "instant", 0.1, root_seed=31, null_mode=True)
        delta, mc_se = true_estimand(cfg, 50_000)
        assert abs(delta) < 4 * mc_se

    def test_no_event_limit(self, default_cfg):
        cfg = dataclasses.replace(
            default_cfg,
            control=dataclasses.replace(default_cfg.control, ie_intercept=(-50.0,) * 5),
            treatment=dataclasses.replace(default_cfg.treatment, ie_intercept=(-50.0,) * 5),
        )
        delta, mc_se = true_estimand(cfg, 100_000)
        assert delta == pytest.approx(-0.73, abs=4 * mc_se + 1e-9)

    def test_deterministic(self, default_cfg):
        a = true_estimand(default_cfg, 20_000)
        b = true_estimand(default_cfg, 20_000)
        assert a == b


class TestConfig:
    def test_theta_grid_index(self):
        assert [theta_scenario_index(t) for t in THETA_GRID] == [1, 2, 3, 4, 5, 6]
        with pytest.raises(InvalidParameterError):
            theta_scenario_index(0.75)

    def test_offgrid_rejected_unless_allowed(self):
        with pytest.raises(InvalidParameterError):
            pioneer1_config("dar", "instant", 0.73)
        cfg = pioneer1_config("dar", "instant", 0.73, allow_offgrid=True)
        assert cfg.missingness_theta == 0.73

    def test_dar_must_not_carry_current_coefs(self, default_cfg):
        bad_arm = dataclasses.replace(default_cfg.control, ie_current=(0.7,) * 5)
        with pytest.raises(InvalidParameterError):
            dataclasses.replace(default_cfg, control=bad_arm)

    def test_roundtrip_through_dict(self, default_cfg):
        assert config_from_dict(config_to_dict(default_cfg)) == default_cfg

    def test_yaml_defaults_match_bundled(self, default_cfg):
        import yaml

        with open("configs/pioneer1_defaults.yaml") as fh:
            loaded = config_from_dict(yaml.safe_load(fh))
        assert loaded == dataclasses.replace(default_cfg, root_seed=loaded.root_seed)


class TestCsvExport:
    def test_schema_and_missing_cells(self, dataset, tmp_path):
        path = tmp_path / "ds.csv"
        with open(path, "w") as fh:
            write_dataset_csv(dataset, fh)
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        assert header == ["patient_id", "arm", "visit", "week", "baseline", "y",
                          "change", "ie_status", "ie_pattern", "missing"]
        assert len(lines) == 1 + dataset.n * 6
        n_missing_rows = sum(1 for ln in lines[1:] if ln.split(",")[9] == "1")
        assert n_missing_rows == int(dataset.miss.sum())
        for ln in lines[1:]:
            parts = ln.split(",")
            if parts[9] == "1":
                assert parts[5] == "" and parts[6] == ""
