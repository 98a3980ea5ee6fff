import numpy as np
import pytest

RESULTS_HEADER = (
    "scenario_id,mechanism,shift_model,theta,method,n_reps,n_failed,bias,bias_mcse,"
    "sd,mean_se,power,power_mcse,type1,type1_mcse,coverage,coverage_mcse,rmse,"
    "collapse_level_counts"
)
REPLICATES_HEADER = (
    "scenario_id,replicate,method,estimate,se,df,ci_lo,ci_hi,p_zero,p_margin,"
    "collapse_level,seconds"
)

# Desk-scale-shaped summary numbers: simple methods most anti-conservative,
# pattern methods nearest zero, and the reference-increment rule worst of the
# reference-based trio.
BIAS_BY_METHOD = {
    "FULL": 0.001,
    "MMRM1": -0.055, "MI1": -0.057,
    "MMRM2": -0.018, "MI2": -0.020,
    "MMRM3": -0.006, "MI3": -0.007,
    "J2R": -0.008, "CIR": -0.044, "CR": -0.021,
}
SD_BY_METHOD = {
    "FULL": 0.110, "MMRM1": 0.117, "MI1": 0.118, "MMRM2": 0.140, "MI2": 0.141,
    "MMRM3": 0.150, "MI3": 0.151, "J2R": 0.108, "CIR": 0.108, "CR": 0.108,
}
METHODS = list(BIAS_BY_METHOD)
DELTA_TRUE = -0.605


def _results_rows():
    rows = []
    for shift in ("instant", "gradual"):
        for s in range(1, 7):
            theta = s / 10.0
            for m in METHODS:
                scale = 0.3 + 0.7 * (s - 1) / 5.0  # growing with missingness
                bias = BIAS_BY_METHOD[m] * (scale if m != "FULL" else 1.0)
                sd = SD_BY_METHOD[m]
                rows.append(
                    f"{shift == 'gradual' and 'dar_gradual' or 'dar_instant'}_s{s},dar,{shift},"
                    f"{theta},{m},500,0,{bias},{sd / 22.4},{sd},{sd * 1.02},0.85,0.016,,,"
                    f"0.94,0.011,{abs(bias) + sd},"
                )
    return rows


@pytest.fixture()
def results_csv(tmp_path):
    path = tmp_path / "results.csv"
    path.write_text(RESULTS_HEADER + "\n" + "\n".join(_results_rows()) + "\n")
    return path


@pytest.fixture()
def replicates_csv(tmp_path, results_csv):
    """200 synthetic replicates for two methods in one scenario, consistent
    with the summary rows (estimates drawn at the stated bias and sd)."""
    gen = np.random.default_rng(12)
    lines = [REPLICATES_HEADER]
    rows_meta = {}
    for m in ("MMRM1", "J2R"):
        scale = 0.3 + 0.7 * (6 - 1) / 5.0
        bias = BIAS_BY_METHOD[m] * scale
        sd = SD_BY_METHOD[m]
        ests = DELTA_TRUE + bias + sd * gen.standard_normal(200)
        # force the summary's bias to match exactly: delta = mean - bias
        ests += (DELTA_TRUE + bias) - ests.mean()
        for r, est in enumerate(ests):
            half = 1.96 * sd
            lines.append(
                f"dar_instant_s6,{r},{m},{float(est)!r},{sd!r},396.0,"
                f"{float(est - half)!r},{float(est + half)!r},0.001,0.01,,0.1"
            )
        rows_meta[m] = ests
    path = tmp_path / "replicates.csv"
    path.write_text("\n".join(lines) + "\n")
    # rewrite the matching results rows so bias is exactly consistent
    return path, rows_meta
