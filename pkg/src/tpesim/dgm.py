"""Data-generating model for the simulated two-arm HbA1c trial.

Generation runs in four steps per replicate: on-treatment multivariate
normal trajectories, a discrete-time discontinuation hazard, an
off-treatment shift, and monotone withdrawal.  Baseline is never affected
and the discontinuation visit is known for every patient even when their
outcomes are missing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .numcore import (
    InvalidParameterError,
    RngStream,
    chol_pd,
    expit,
    spatial_power_cov,
)

VISIT_WEEKS = (0.0, 4.0, 8.0, 14.0, 20.0, 26.0)
N_VISITS = 6  # baseline + 5 post-baseline
J = 5  # last post-baseline visit index

CONTROL, TREATMENT = 0, 1
ARM_LABELS = ("C", "T")

# Trial-calibrated defaults: per-visit means and variances, spatial-power
# correlation, discontinuation hazard coefficients, off-treatment shifts,
# and the withdrawal-probability grid.
TREATMENT_MEANS = (7.92, 7.55, 7.2, 7.1, 7.05, 7.05)
CONTROL_MEANS = (7.92, 7.82, 7.8, 7.8, 7.78, 7.78)
TREATMENT_VARIANCES = (0.48, 0.75, 0.8, 0.9, 1.06, 1.14)
CONTROL_VARIANCES = (0.48, 0.8, 1.1, 1.4, 1.23, 1.48)
RHO = 0.8

DAR_INTERCEPT = (-15.0,) * 5
DNAR_INTERCEPT = (-21.0,) * 5
IE_BASELINE_COEF = (0.0, 0.3, 0.1, 0.05, 0.0)
IE_PREVIOUS_COEF_T = (1.42, 1.14, 1.47, 1.48, 1.40)
IE_PREVIOUS_COEF_C = (1.42, 1.14, 1.33, 1.51, 1.46)
IE_CURRENT_COEF_T = (0.72, 0.75, 0.77, 0.77, 0.76)
IE_CURRENT_COEF_C = (0.69, 0.69, 0.69, 0.72, 0.72)

INSTANT_SHIFT = {"C": -0.6, "T": -0.2}
GRADUAL_SHIFT = {"C": -0.8, "T": -0.25}
SHIFT_RAMP_VISITS = 3

THETA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)

# RNG stage ids: streams are derived as (root_seed, replicate, stage, ...)
STAGE_ON_TREATMENT = 0
STAGE_IE = 1
STAGE_MISSINGNESS = 2
STAGE_TRUTH = 3


@dataclass(frozen=True)
class ArmParams:
    """Per-arm generative parameters."""

    means: tuple[float, ...]
    variances: tuple[float, ...]
    ie_intercept: tuple[float, ...]
    ie_baseline: tuple[float, ...]
    ie_previous: tuple[float, ...]
    ie_current: tuple[float, ...] | None  # only under the not-at-random hazard
    shift_size: float


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete parameterization of one simulation scenario."""

    control: ArmParams
    treatment: ArmParams
    ie_mechanism: str  # "dar" | "dnar"
    shift_model: str  # "instant" | "gradual"
    missingness_theta: float
    root_seed: int
    n_per_arm: int = 200
    visit_weeks: tuple[float, ...] = VISIT_WEEKS
    rho: float = RHO
    shift_ramp_visits: int = SHIFT_RAMP_VISITS
    null_mode: bool = False

    def __post_init__(self):
        if len(self.visit_weeks) != N_VISITS:
            raise InvalidParameterError(f"expected {N_VISITS} visits, got {len(self.visit_weeks)}")
        if self.ie_mechanism not in ("dar", "dnar"):
            raise InvalidParameterError(f"unknown ie_mechanism {self.ie_mechanism!r}")
        if self.shift_model not in ("instant", "gradual"):
            raise InvalidParameterError(f"unknown shift_model {self.shift_model!r}")
        for arm in (self.control, self.treatment):
            if len(arm.means) != N_VISITS or len(arm.variances) != N_VISITS:
                raise InvalidParameterError("per-arm means/variances must cover all visits")
            has_current = arm.ie_current is not None
            if self.ie_mechanism == "dar" and has_current:
                raise InvalidParameterError("at-random hazard must not carry current-visit coefficients")
            if self.ie_mechanism == "dnar" and not has_current:
                raise InvalidParameterError("not-at-random hazard needs current-visit coefficients")
        if self.null_mode and self.treatment != self.control:
            raise InvalidParameterError("null_mode requires both arms to share control parameters")

    def arm(self, arm_index: int) -> ArmParams:
        return self.control if arm_index == CONTROL else self.treatment

    def covariance(self, arm_index: int) -> np.ndarray:
        return spatial_power_cov(self.arm(arm_index).variances, self.visit_weeks, self.rho)

    def shift_at(self, arm_index: int, visits_since_ie: np.ndarray) -> np.ndarray:
        """Shift added to on-treatment values, as a function of s = j - tau."""
        a = self.arm(arm_index).shift_size
        if self.shift_model == "instant":
            return np.full_like(np.asarray(visits_since_ie, dtype=float), a)
        b = self.shift_ramp_visits
        return a * np.minimum(np.asarray(visits_since_ie, dtype=float), b) / b


def _default_arm(label: str, mechanism: str) -> ArmParams:
    treat = label == "T"
    return ArmParams(
        means=TREATMENT_MEANS if treat else CONTROL_MEANS,
        variances=TREATMENT_VARIANCES if treat else CONTROL_VARIANCES,
        ie_intercept=DAR_INTERCEPT if mechanism == "dar" else DNAR_INTERCEPT,
        ie_baseline=IE_BASELINE_COEF,
        ie_previous=IE_PREVIOUS_COEF_T if treat else IE_PREVIOUS_COEF_C,
        ie_current=None if mechanism == "dar" else (IE_CURRENT_COEF_T if treat else IE_CURRENT_COEF_C),
        shift_size=0.0,
    )


def pioneer1_config(
    mechanism: str = "dar",
    shift: str = "instant",
    theta: float = 0.1,
    root_seed: int = 0,
    n_per_arm: int = 200,
    null_mode: bool = False,
    allow_offgrid: bool = False,
) -> ScenarioConfig:
    """Bundled default scenario encoding the calibrated parameter tables."""
    theta = float(theta)
    if not allow_offgrid and not any(abs(theta - g) < 1e-9 for g in THETA_GRID):
        raise InvalidParameterError(
            f"theta {theta} is not in the scenario grid {THETA_GRID}; pass allow_offgrid to override"
        )
    shifts = INSTANT_SHIFT if shift == "instant" else GRADUAL_SHIFT
    control = dataclasses.replace(_default_arm("C", mechanism), shift_size=shifts["C"])
    treatment = dataclasses.replace(_default_arm("T", mechanism), shift_size=shifts["T"])
    if null_mode:
        treatment = control
    return ScenarioConfig(
        control=control,
        treatment=treatment,
        ie_mechanism=mechanism,
        shift_model=shift,
        missingness_theta=theta,
        root_seed=root_seed,
        n_per_arm=n_per_arm,
        null_mode=null_mode,
    )


def theta_scenario_index(theta: float) -> int:
    """1-based missingness scenario number for an on-grid theta."""
    for i, g in enumerate(THETA_GRID, start=1):
        if abs(theta - g) < 1e-9:
            return i
    raise InvalidParameterError(f"theta {theta} is not on the scenario grid")


@dataclass
class TrialDataset:
    """One generated trial, stored column-wise.

    ``y_tilde`` holds the complete (shifted) trajectories; ``miss`` flags
    which post-baseline values the analyst never sees.  ``tau`` is the
    first discontinuation-affected visit (1..5) or 0 for completers and is
    known for every patient regardless of missingness.
    """

    arm: np.ndarray  # (n,) int, 0=control 1=treatment
    y_tilde: np.ndarray  # (n, 6) float, complete shifted trajectories
    y_on: np.ndarray  # (n, 6) float, hypothetical on-treatment trajectories
    tau: np.ndarray  # (n,) int, 0 = no discontinuation
    miss: np.ndarray  # (n, 5) bool for visits 1..5

    @property
    def n(self) -> int:
        return self.arm.size

    @property
    def baseline(self) -> np.ndarray:
        return self.y_tilde[:, 0]

    def change(self) -> np.ndarray:
        """Complete change-from-baseline matrix for visits 1..5."""
        return self.y_tilde[:, 1:] - self.y_tilde[:, [0]]

    def observed_change(self) -> np.ndarray:
        """Change matrix with NaN where the value is missing."""
        out = self.change().copy()
        out[self.miss] = np.nan
        return out

    def observed_y(self) -> np.ndarray:
        """Raw outcome matrix (all 6 visits) with NaN where missing."""
        out = self.y_tilde.copy()
        out[:, 1:][self.miss] = np.nan
        return out

    def ie_pattern(self) -> np.ndarray:
        """Per-patient pattern label: tau for discontinuers, 6 otherwise."""
        return np.where(self.tau > 0, self.tau, 6)

    def ie_status(self) -> np.ndarray:
        """(n, 5) indicator of being post-IE at visits 1..5."""
        visits = np.arange(1, N_VISITS)
        return (self.tau[:, None] > 0) & (self.tau[:, None] <= visits[None, :])

    def pattern_indicator(self) -> np.ndarray:
        """(n, 5) indicator of the first IE-affected visit."""
        visits = np.arange(1, N_VISITS)
        return self.tau[:, None] == visits[None, :]

    def validate(self) -> None:
        status = self.ie_status()
        if np.any(self.miss & ~status):
            raise AssertionError("missing value on a patient without a prior IE")
        m = self.miss
        if np.any(m[:, :-1] & ~m[:, 1:]):
            raise AssertionError("missingness is not monotone")
        if np.any(self.pattern_indicator().sum(axis=1) > 1):
            raise AssertionError("more than one first-IE visit")
        if np.any(status[:, :-1] & ~status[:, 1:]):
            raise AssertionError("IE status is not monotone")


def simulate_on_treatment(cfg: ScenarioConfig, arm_index: int, rng: RngStream) -> np.ndarray:
    """Step 1: hypothetical trajectories, MVN per arm."""
    params = cfg.arm(arm_index)
    cov = cfg.covariance(arm_index)
    L = chol_pd(cov)
    z = rng.generator().standard_normal((cfg.n_per_arm, N_VISITS))
    return np.asarray(params.means) + z @ L.T


def simulate_ie(cfg: ScenarioConfig, y_on: np.ndarray, arm_index: int, rng: RngStream) -> np.ndarray:
    """Step 2: first discontinuation-affected visit per patient (0 = none).

    At each visit the at-risk hazard is a logistic function of baseline and
    the previous on-treatment value, plus the current value under the
    not-at-random mechanism.
    """
    params = cfg.arm(arm_index)
    n = y_on.shape[0]
    gen = rng.generator()
    tau = np.zeros(n, dtype=np.int64)
    for j in range(1, N_VISITS):
        at_risk = tau == 0
        lp = (
            params.ie_intercept[j - 1]
            + params.ie_baseline[j - 1] * y_on[:, 0]
            + params.ie_previous[j - 1] * y_on[:, j - 1]
        )
        if params.ie_current is not None:
            lp = lp + params.ie_current[j - 1] * y_on[:, j]
        u = gen.random(n)
        hit = at_risk & (u < expit(lp))
        tau[hit] = j
    return tau


def apply_offtreatment_shift(
    cfg: ScenarioConfig, y_on: np.ndarray, tau: np.ndarray, arm_index: int
) -> np.ndarray:
    """Step 3: add the post-discontinuation shift from visit tau onward.

    The shift is evaluated at s = j - tau, so the first affected visit gets
    the full constant under the instant model but zero under the gradual
    ramp (which reaches its plateau after ``shift_ramp_visits`` visits).
    """
    y = y_on.copy()
    has_ie = tau > 0
    if not np.any(has_ie):
        return y
    visits = np.arange(N_VISITS)
    s = visits[None, :] - tau[:, None]
    affected = has_ie[:, None] & (s >= 0)
    shift = cfg.shift_at(arm_index, np.maximum(s, 0))
    y += np.where(affected, shift, 0.0)
    return y


def simulate_missingness(cfg: ScenarioConfig, tau: np.ndarray, rng: RngStream) -> np.ndarray:
    """Step 4: monotone withdrawal among post-IE visits.

    Each post-IE visit of a not-yet-missing patient is withdrawn with
    probability ``missingness_theta``; afterwards every later visit is
    missing too.  The grid value is the withdrawal probability itself: the
    generated observed/missing splits match the published per-scenario
    percentage tables, which a logistic transform of the grid would not.
    """
    n = tau.size
    theta = cfg.missingness_theta
    gen = rng.generator()
    miss = np.zeros((n, J), dtype=bool)
    already = np.zeros(n, dtype=bool)
    for j in range(1, N_VISITS):
        post_ie = (tau > 0) & (tau <= j)
        u = gen.random(n)
        new_miss = post_ie & ~already & (u < theta)
        already |= new_miss
        miss[:, j - 1] = already
    return miss


def generate_trial(cfg: ScenarioConfig, replicate_id: int) -> TrialDataset:
    """Compose the four generation steps with stage-separated streams."""
    base = RngStream(cfg.root_seed)
    arms, ys_on, ys_tilde, taus, misses = [], [], [], [], []
    for arm_index in (CONTROL, TREATMENT):
        stream = base.child(replicate_id)
        y_on = simulate_on_treatment(cfg, arm_index, stream.child(STAGE_ON_TREATMENT, arm_index))
        tau = simulate_ie(cfg, y_on, arm_index, stream.child(STAGE_IE, arm_index))
        y_tilde = apply_offtreatment_shift(cfg, y_on, tau, arm_index)
        miss = simulate_missingness(cfg, tau, stream.child(STAGE_MISSINGNESS, arm_index))
        arms.append(np.full(cfg.n_per_arm, arm_index, dtype=np.int64))
        ys_on.append(y_on)
        ys_tilde.append(y_tilde)
        taus.append(tau)
        misses.append(miss)
    return TrialDataset(
        arm=np.concatenate(arms),
        y_tilde=np.vstack(ys_tilde),
        y_on=np.vstack(ys_on),
        tau=np.concatenate(taus),
        miss=np.vstack(misses),
    )


def true_estimand(cfg: ScenarioConfig, n_big: int = 200_000) -> tuple[float, float]:
    """Oracle value of the policy contrast and its Monte Carlo SE.

    Simulates ``n_big`` patients per arm with the off-treatment shift
    applied and no withdrawal, and returns the between-arm difference in
    mean change from baseline at the final visit.
    """
    big = dataclasses.replace(cfg, n_per_arm=int(n_big))
    base = RngStream(cfg.root_seed)
    arm_means, arm_vars = [], []
    for arm_index in (CONTROL, TREATMENT):
        stream = base.child(0, STAGE_TRUTH, arm_index)
        y_on = simulate_on_treatment(big, arm_index, stream.child(0))
        tau = simulate_ie(big, y_on, arm_index, stream.child(1))
        y_tilde = apply_offtreatment_shift(big, y_on, tau, arm_index)
        delta = y_tilde[:, J] - y_tilde[:, 0]
        arm_means.append(delta.mean())
        arm_vars.append(delta.var(ddof=1) / n_big)
    delta_true = arm_means[TREATMENT] - arm_means[CONTROL]
    mc_se = float(np.sqrt(arm_vars[0] + arm_vars[1]))
    return float(delta_true), mc_se


def dataset_to_rows(ds: TrialDataset):
    """Yield per patient-visit export rows.

    Columns: patient_id, arm, visit, week, baseline, y, change, ie_status,
    ie_pattern, missing.  ``y``/``change`` are empty for missing values.
    """
    status = ds.ie_status()
    pattern = ds.pattern_indicator()
    for i in range(ds.n):
        for j in range(N_VISITS):
            missing = bool(ds.miss[i, j - 1]) if j > 0 else False
            y = "" if missing else repr(float(ds.y_tilde[i, j]))
            change = "" if missing else repr(float(ds.y_tilde[i, j] - ds.y_tilde[i, 0]))
            yield (
                i,
                ARM_LABELS[ds.arm[i]],
                j,
                VISIT_WEEKS[j],
                repr(float(ds.y_tilde[i, 0])),
                y,
                change,
                int(status[i, j - 1]) if j > 0 else 0,
                int(pattern[i, j - 1]) if j > 0 else 0,
                int(missing),
            )


DATASET_CSV_HEADER = (
    "patient_id,arm,visit,week,baseline,y,change,ie_status,ie_pattern,missing"
)


def write_dataset_csv(ds: TrialDataset, fh) -> None:
    fh.write(DATASET_CSV_HEADER + "\n")
    for row in dataset_to_rows(ds):
        fh.write(",".join(str(c) for c in row) + "\n")


def config_to_dict(cfg: ScenarioConfig) -> dict:
    def arm_dict(a: ArmParams) -> dict:
        d = dataclasses.asdict(a)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    return {
        "n_per_arm": cfg.n_per_arm,
        "visit_weeks": list(cfg.visit_weeks),
        "rho": cfg.rho,
        "ie_mechanism": cfg.ie_mechanism,
        "shift_model": cfg.shift_model,
        "shift_ramp_visits": cfg.shift_ramp_visits,
        "missingness_theta": cfg.missingness_theta,
        "root_seed": cfg.root_seed,
        "null_mode": cfg.null_mode,
        "control": arm_dict(cfg.control),
        "treatment": arm_dict(cfg.treatment),
    }


def config_from_dict(d: dict) -> ScenarioConfig:
    def arm_from(a: dict) -> ArmParams:
        cur = a.get("ie_current")
        return ArmParams(
            means=tuple(a["means"]),
            variances=tuple(a["variances"]),
            ie_intercept=tuple(a["ie_intercept"]),
            ie_baseline=tuple(a["ie_baseline"]),
            ie_previous=tuple(a["ie_previous"]),
            ie_current=tuple(cur) if cur is not None else None,
            shift_size=float(a["shift_size"]),
        )

    return ScenarioConfig(
        control=arm_from(d["control"]),
        treatment=arm_from(d["treatment"]),
        ie_mechanism=d["ie_mechanism"],
        shift_model=d["shift_model"],
        missingness_theta=float(d["missingness_theta"]),
        root_seed=int(d["root_seed"]),
        n_per_arm=int(d.get("n_per_arm", 200)),
        visit_weeks=tuple(d.get("visit_weeks", VISIT_WEEKS)),
        rho=float(d.get("rho", RHO)),
        shift_ramp_visits=int(d.get("shift_ramp_visits", SHIFT_RAMP_VISITS)),
        null_mode=bool(d.get("null_mode", False)),
    )
