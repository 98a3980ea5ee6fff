"""Shared estimate container and t-based inference helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import t as t_dist

DEFAULT_MARGIN = -0.25
DEFAULT_ALPHA = 0.05


@dataclass
class EstimateResult:
    """One method's answer on one dataset.

    ``p_zero`` is the two-sided p-value against a zero effect; ``p_margin``
    is the one-sided p-value for the effect being below the margin (small
    values favour superiority by the margin).  ``collapse_level`` is the
    number of covariate levels actually fitted by the retrieved-dropout
    models (None for methods without pattern covariates).
    """

    method: str
    estimate: float
    se: float
    df: float
    ci_lo: float
    ci_hi: float
    p_zero: float
    p_margin: float
    collapse_level: int | None = None
    collapse_label: str | None = None
    diagnostics: dict = field(default_factory=dict)


def t_inference(estimate: float, se: float, df: float,
                margin: float = DEFAULT_MARGIN, alpha: float = DEFAULT_ALPHA):
    """Symmetric t interval plus the two test p-values."""
    if se < 0 or not np.isfinite(df) or df <= 0:
        raise ValueError(f"bad inference inputs se={se}, df={df}")
    if se == 0.0:
        ci = (estimate, estimate)
        p_zero = 0.0 if estimate != 0.0 else 1.0
        if estimate < margin:
            p_margin = 0.0
        elif estimate > margin:
            p_margin = 1.0
        else:
            p_margin = 0.5
        return ci, p_zero, p_margin
    crit = t_dist.ppf(1.0 - alpha / 2.0, df)
    ci = (estimate - crit * se, estimate + crit * se)
    p_zero = 2.0 * t_dist.sf(abs(estimate) / se, df)
    p_margin = t_dist.cdf((estimate - margin) / se, df)
    return ci, float(p_zero), float(p_margin)
