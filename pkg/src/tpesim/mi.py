"""Sequential monotone imputation, completed-data ANCOVA, and pooling.

Monotone withdrawal lets each visit be imputed from a single regression
fitted to the rows still observed there.  The status/pattern variants
regress on residuals from per-visit prediction models instead of the raw
lagged outcomes, which mirrors the residual conditioning of the
repeated-measures models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collapse import CollapseError, PatternCoding, plan_for
from .dgm import CONTROL, J, TREATMENT, TrialDataset
from .numcore import RngStream, bayes_lm_draw, fit_ols
from .results import DEFAULT_ALPHA, DEFAULT_MARGIN, EstimateResult, t_inference


@dataclass
class CompletedDataset:
    """One imputed copy: observed values bit-identical, no gaps left."""

    imputation_index: int
    y: np.ndarray  # (n, 6) raw outcomes
    imputed: np.ndarray  # (n, 6) bool, True where the value was drawn


@dataclass
class PooledResult:
    qbar: float
    ubar: float
    b: float
    total_var: float
    df: float
    m: int


def _cell_columns(arm: np.ndarray, level: np.ndarray, fit_rows: np.ndarray,
                  predict_rows: np.ndarray):
    """Indicator columns for the (arm x level) combinations at one visit.

    Every combination needing prediction must appear among the fitting
    rows; the collapse coding is responsible for that.
    """
    combos = sorted(set(zip(arm[fit_rows].tolist(), level[fit_rows].tolist())))
    need = set(zip(arm[predict_rows].tolist(), level[predict_rows].tolist()))
    missing = need - set(combos)
    if missing:
        raise CollapseError(f"unestimable imputation cells {sorted(missing)}")
    cols = np.zeros((arm.size, len(combos)))
    for c, (a, lv) in enumerate(combos):
        cols[:, c] = (arm == a) & (level == lv)
    return cols


def _impute(dataset: TrialDataset, m: int, rng: RngStream,
            coding: PatternCoding | None) -> list[CompletedDataset]:
    """Shared driver; ``coding`` selects the simple or residual variants."""
    n = dataset.n
    miss = np.column_stack([np.zeros(n, dtype=bool), dataset.miss])  # (n, 6)
    base_cols = np.column_stack([
        (dataset.arm == CONTROL).astype(float),
        (dataset.arm == TREATMENT).astype(float),
        dataset.baseline,
    ])
    levels = coding.level_matrix(dataset.ie_pattern()) if coding is not None else None

    out = []
    for imp in range(1, m + 1):
        y = dataset.y_tilde.copy()
        resid = np.zeros((n, J))
        for j in range(1, J + 1):
            obs = ~miss[:, j]
            mis = miss[:, j]
            if coding is None:
                X = np.column_stack([base_cols, y[:, 1:j]])
            else:
                cells = _cell_columns(dataset.arm, levels[:, j - 1], obs, mis)
                X = np.column_stack([cells, dataset.baseline, resid[:, : j - 1]])
            if mis.any():
                fit = fit_ols(X[obs], y[obs, j])
                coef, sigma2 = bayes_lm_draw(fit, rng.child(imp, j, 0))
                noise = rng.child(imp, j, 1).generator().standard_normal(int(mis.sum()))
                y[mis, j] = X[mis] @ coef + np.sqrt(sigma2) * noise
            if coding is not None:
                # prediction model on the completed visit, lagging raw outcomes
                Xp = np.column_stack([
                    _cell_columns(dataset.arm, levels[:, j - 1], obs, mis),
                    dataset.baseline,
                    y[:, 1:j],
                ])
                coef_p, *_ = np.linalg.lstsq(Xp, y[:, j], rcond=None)
                resid[:, j - 1] = y[:, j] - Xp @ coef_p
        out.append(CompletedDataset(imputation_index=imp, y=y, imputed=miss.copy()))
    return out


def impute_mi1(dataset: TrialDataset, m: int, rng: RngStream) -> list[CompletedDataset]:
    """Visit-by-visit regression on arm, baseline, and earlier outcomes."""
    return _impute(dataset, m, rng, None)


def impute_mi2(dataset: TrialDataset, m: int, rng: RngStream,
               coding: PatternCoding) -> list[CompletedDataset]:
    """Adds the recoded discontinuation status (with arm interaction) and
    conditions on prediction-model residuals instead of raw lags."""
    return _impute(dataset, m, rng, coding)


def impute_mi3(dataset: TrialDataset, m: int, rng: RngStream,
               coding: PatternCoding) -> list[CompletedDataset]:
    """Like the status variant but with the recoded pattern levels."""
    return _impute(dataset, m, rng, coding)


def ancova(completed: CompletedDataset, arm: np.ndarray,
           visit: int = J) -> tuple[float, float, int]:
    """Change-from-baseline ANCOVA at a visit: effect, SE, residual df."""
    y = completed.y if isinstance(completed, CompletedDataset) else completed
    change = y[:, visit] - y[:, 0]
    return ancova_change(change, arm, y[:, 0])


def ancova_change(change: np.ndarray, arm: np.ndarray,
                  baseline: np.ndarray) -> tuple[float, float, int]:
    n = change.size
    X = np.column_stack([np.ones(n), (arm == TREATMENT).astype(float), baseline])
    fit = fit_ols(X, change)
    est = float(fit.coefficients[1])
    se = float(np.sqrt(fit.residual_variance * fit.scaled_inverse_gram[1, 1]))
    return est, se, fit.residual_df


def rubin_pool(estimates, variances, df_com: int,
               df_method: str = "barnard_rubin") -> PooledResult:
    """Combine per-imputation estimates and variances.

    ``barnard_rubin`` applies the small-sample df adjustment anchored at
    the completed-data df; ``rubin`` is the classic large-sample formula
    (whose df tends to m - 1 as the between variance dominates).
    """
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    m = est.size
    if m < 2:
        raise ValueError("pooling needs at least two imputations")
    qbar = float(est.mean())
    ubar = float(var.mean())
    b = float(est.var(ddof=1))
    total = ubar + (1.0 + 1.0 / m) * b
    gamma = (1.0 + 1.0 / m) * b / total if total > 0 else 0.0
    nu_com = float(df_com)
    if df_method == "rubin":
        df = (m - 1) / gamma**2 if gamma > 0 else 1e7
    elif df_method == "barnard_rubin":
        nu_obs = (1.0 - gamma) * nu_com * (nu_com + 1.0) / (nu_com + 3.0)
        if gamma > 0:
            nu_m = (m - 1) / gamma**2
            df = 1.0 / (1.0 / nu_m + 1.0 / nu_obs)
        else:
            df = nu_obs
    else:
        raise ValueError(f"unknown pooling df method {df_method!r}")
    return PooledResult(qbar, ubar, b, total, float(df), m)


def pooled_estimate(method: str, completed: list[CompletedDataset], arm: np.ndarray,
                    margin: float = DEFAULT_MARGIN, alpha: float = DEFAULT_ALPHA,
                    collapse_level: int | None = None, collapse_label: str | None = None,
                    pool_df_method: str = "barnard_rubin") -> EstimateResult:
    ests, variances, df_com = [], [], None
    for comp in completed:
        e, s, df_com = ancova(comp, arm)
        ests.append(e)
        variances.append(s * s)
    pooled = rubin_pool(ests, variances, df_com, pool_df_method)
    se = float(np.sqrt(pooled.total_var))
    ci, p_zero, p_margin = t_inference(pooled.qbar, se, pooled.df, margin, alpha)
    return EstimateResult(
        method=method, estimate=pooled.qbar, se=se, df=pooled.df,
        ci_lo=ci[0], ci_hi=ci[1], p_zero=p_zero, p_margin=p_margin,
        collapse_level=collapse_level, collapse_label=collapse_label,
        diagnostics={"ubar": pooled.ubar, "b": pooled.b, "m": pooled.m},
    )


def estimate_mi(dataset: TrialDataset, variant: int, m: int, rng: RngStream,
                margin: float = DEFAULT_MARGIN, alpha: float = DEFAULT_ALPHA,
                pool_df_method: str = "barnard_rubin") -> EstimateResult:
    """Impute with the requested variant, analyze, and pool."""
    if variant == 1:
        completed = impute_mi1(dataset, m, rng)
        level, label = None, None
    else:
        coding = plan_for(dataset, "status" if variant == 2 else "pattern")
        completed = _impute(dataset, m, rng, coding)
        level, label = coding.n_levels, coding.label
    return pooled_estimate(f"MI{variant}", completed, dataset.arm, margin, alpha,
                           level, label, pool_df_method)


def estimate_full(dataset: TrialDataset, margin: float = DEFAULT_MARGIN,
                  alpha: float = DEFAULT_ALPHA) -> EstimateResult:
    """ANCOVA on the complete trajectories, before any withdrawal."""
    change = dataset.change()[:, J - 1]
    est, se, df = ancova_change(change, dataset.arm, dataset.baseline)
    ci, p_zero, p_margin = t_inference(est, se, df, margin, alpha)
    return EstimateResult("FULL", est, se, float(df), ci[0], ci[1], p_zero, p_margin)
