"""Scenario runner and operating-characteristics aggregation.

Replicates are the unit of parallelism; every random stream is derived
from (plan seed, scenario index, replicate, stage), so results do not
depend on worker count or execution order.  A method failing on one
replicate is tallied and excluded from that method's aggregates without
aborting the run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import dgm, mi, mmrm, rbi
from .dgm import ScenarioConfig, generate_trial, pioneer1_config, theta_scenario_index, true_estimand
from .numcore import RngStream, derive_seed

ALL_METHODS = ("FULL", "MMRM1", "MMRM2", "MMRM3", "MI1", "MI2", "MI3", "J2R", "CIR", "CR")

# method stage offsets inside a replicate's stream
_STAGE_MI = {"MI1": 10, "MI2": 11, "MI3": 12}
_STAGE_RBI_FIT = 20
_STAGE_RBI_NOISE = 21


@dataclass(frozen=True)
class ScenarioSpec:
    mechanism: str = "dar"
    shift: str = "instant"
    theta: float = 0.1
    null_mode: bool = False

    @property
    def scenario_index(self) -> int:
        mech = 0 if self.mechanism == "dar" else 1
        shf = 0 if self.shift == "instant" else 1
        return mech * 1000 + shf * 100 + theta_scenario_index(self.theta) * 10 + int(self.null_mode)

    @property
    def scenario_id(self) -> str:
        sid = f"{self.mechanism}_{self.shift}_s{theta_scenario_index(self.theta)}"
        return sid + ("_null" if self.null_mode else "")


@dataclass(frozen=True)
class RunPlan:
    scenarios: tuple[ScenarioSpec, ...]
    methods: tuple[str, ...]
    n_replicates: int = 500
    m_imputations: int = 50
    margin: float = -0.25
    alpha: float = 0.05
    truth_n: int = 200_000
    root_seed: int = 20240
    df_method: str = "kr"
    power_rule: str = "ci"
    pool_df_method: str = "barnard_rubin"
    n_per_arm: int = 200
    threads: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ValueError("method list must not be empty")
        unknown = [m for m in self.methods if m not in ALL_METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {ALL_METHODS}")
        if self.margin >= 0:
            raise ValueError("margin must be negative (favourable effects are negative)")


@dataclass
class ReplicateRecord:
    scenario_id: str
    replicate: int
    method: str
    estimate: float = np.nan
    se: float = np.nan
    df: float = np.nan
    ci_lo: float = np.nan
    ci_hi: float = np.nan
    p_zero: float = np.nan
    p_margin: float = np.nan
    collapse_level: int | None = None
    seconds: float = 0.0
    error: str | None = None


@dataclass
class OperatingCharacteristics:
    method: str
    n_reps: int
    n_failed: int
    bias: float
    bias_mcse: float
    sd: float
    mean_se: float
    power: float
    power_mcse: float
    type1: float | None
    type1_mcse: float | None
    coverage: float
    coverage_mcse: float
    rmse: float
    collapse_counts: dict = field(default_factory=dict)


def scenario_config(plan: RunPlan, scenario: ScenarioSpec) -> ScenarioConfig:
    return pioneer1_config(
        mechanism=scenario.mechanism,
        shift=scenario.shift,
        theta=scenario.theta,
        root_seed=derive_seed(plan.root_seed, scenario.scenario_index),
        n_per_arm=plan.n_per_arm,
        null_mode=scenario.null_mode,
    )


def limit_blas_threads(n: int = 1):
    """Cap BLAS pools; the fits use many tiny factorizations where thread
    fan-out costs far more than it saves."""
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except Exception:
        pass


def run_replicate(cfg: ScenarioConfig, scenario_id: str, replicate: int,
                  methods: tuple[str, ...], m_imputations: int, margin: float,
                  alpha: float, df_method: str, pool_df_method: str) -> list[ReplicateRecord]:
    dataset = generate_trial(cfg, replicate)
    base = RngStream(cfg.root_seed).child(replicate)
    rbi_draws = None
    records = []
    for method in methods:
        t0 = time.perf_counter()
        rec = ReplicateRecord(scenario_id, replicate, method)
        try:
            if method == "FULL":
                res = mi.estimate_full(dataset, margin, alpha)
            elif method.startswith("MMRM"):
                res = mmrm.estimate_mmrm(dataset, int(method[-1]), df_method, margin, alpha)
            elif method.startswith("MI"):
                res = mi.estimate_mi(dataset, int(method[-1]), m_imputations,
                                     base.child(_STAGE_MI[method]), margin, alpha,
                                     pool_df_method)
            elif method in rbi.ASSUMPTIONS:
                if rbi_draws is None:
                    rbi_draws = rbi.fit_bayesian_mmrm(dataset, m_imputations,
                                                      base.child(_STAGE_RBI_FIT))
                res = rbi.estimate_rbi(dataset, method, m_imputations,
                                       base.child(_STAGE_RBI_NOISE), margin, alpha,
                                       rbi_draws, pool_df_method)
            else:
                raise ValueError(f"unknown method {method}")
            rec.estimate, rec.se, rec.df = res.estimate, res.se, res.df
            rec.ci_lo, rec.ci_hi = res.ci_lo, res.ci_hi
            rec.p_zero, rec.p_margin = res.p_zero, res.p_margin
            rec.collapse_level = res.collapse_level
        except Exception as exc:  # noqa: BLE001 — failures are a tallied outcome
            rec.error = f"{type(exc).__name__}: {exc}"
        rec.seconds = time.perf_counter() - t0
        records.append(rec)
    return records


def _worker(args):
    return run_replicate(*args)


def aggregate(records: list[ReplicateRecord], delta_true: float, margin: float,
              alpha: float = 0.05, power_rule: str = "ci",
              null_mode: bool = False) -> OperatingCharacteristics:
    """Operating characteristics for one method's replicate records."""
    ok = [r for r in records if r.error is None]
    n_failed = len(records) - len(ok)
    if len(ok) < 2:
        raise ValueError("need at least two successful replicates to aggregate")
    method = ok[0].method
    est = np.array([r.estimate for r in ok])
    se = np.array([r.se for r in ok])
    lo = np.array([r.ci_lo for r in ok])
    hi = np.array([r.ci_hi for r in ok])
    p_zero = np.array([r.p_zero for r in ok])
    p_margin = np.array([r.p_margin for r in ok])
    m = est.size

    bias = float(est.mean() - delta_true)
    sd = float(est.std(ddof=1))
    if power_rule == "ci":
        reject_margin = hi < margin
    elif power_rule == "ttest":
        reject_margin = p_margin < alpha / 2.0
    else:
        raise ValueError(f"unknown power rule {power_rule!r}")
    power = float(reject_margin.mean())
    covered = (lo <= delta_true) & (delta_true <= hi)
    coverage = float(covered.mean())
    rmse = float(np.sqrt(np.mean((est - delta_true) ** 2)))
    type1 = float((p_zero < alpha).mean()) if null_mode else None

    def rate_mcse(p):
        return float(np.sqrt(p * (1.0 - p) / m))

    counts: dict[int, int] = {}
    for r in ok:
        if r.collapse_level is not None:
            counts[r.collapse_level] = counts.get(r.collapse_level, 0) + 1

    return OperatingCharacteristics(
        method=method,
        n_reps=m,
        n_failed=n_failed,
        bias=bias,
        bias_mcse=float(sd / np.sqrt(m)),
        sd=sd,
        mean_se=float(se.mean()),
        power=power,
        power_mcse=rate_mcse(power),
        type1=type1,
        type1_mcse=rate_mcse(type1) if type1 is not None else None,
        coverage=coverage,
        coverage_mcse=rate_mcse(coverage),
        rmse=rmse,
        collapse_counts=counts,
    )


def run_scenario(plan: RunPlan, scenario: ScenarioSpec, delta_true: float | None = None):
    """All replicates and methods for one scenario.

    Returns (delta_true, {method: OperatingCharacteristics}, records).
    """
    cfg = scenario_config(plan, scenario)
    if delta_true is None:
        delta_true, _ = true_estimand(cfg, plan.truth_n)
    args = [
        (cfg, scenario.scenario_id, r, plan.methods, plan.m_imputations,
         plan.margin, plan.alpha, plan.df_method, plan.pool_df_method)
        for r in range(plan.n_replicates)
    ]
    limit_blas_threads()
    if plan.threads > 1:
        with get_context("fork").Pool(plan.threads, initializer=limit_blas_threads) as pool:
            nested = pool.map(_worker, args, chunksize=4)
    else:
        nested = [_worker(a) for a in args]
    records = [rec for group in nested for rec in group]
    by_method = {}
    for method in plan.methods:
        mrecs = [r for r in records if r.method == method]
        by_method[method] = aggregate(mrecs, delta_true, plan.margin, plan.alpha,
                                      plan.power_rule, scenario.null_mode)
    return delta_true, by_method, records


RESULTS_COLUMNS = (
    "scenario_id,mechanism,shift_model,theta,method,n_reps,n_failed,bias,bias_mcse,"
    "sd,mean_se,power,power_mcse,type1,type1_mcse,coverage,coverage_mcse,rmse,"
    "collapse_level_counts"
)
REPLICATES_COLUMNS = (
    "scenario_id,replicate,method,estimate,se,df,ci_lo,ci_hi,p_zero,p_margin,"
    "collapse_level,seconds"
)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        if np.isnan(x):
            return ""
        return repr(float(x))
    return str(x)


def _encode_counts(counts: dict) -> str:
    return "|".join(f"{k}:{v}" for k, v in sorted(counts.items(), reverse=True))


def run_plan(plan: RunPlan, out_dir: str | Path | None = None,
             truths: dict[str, float] | None = None, log=None):
    """Run the whole grid; optionally write the two CSV files.

    Returns (results_rows, records, truths) where ``results_rows`` are
    (scenario, method, OperatingCharacteristics) triples.
    """
    results_rows = []
    all_records = []
    truths = dict(truths or {})
    for scenario in plan.scenarios:
        known = truths.get(scenario.scenario_id)
        t0 = time.perf_counter()
        delta_true, by_method, records = run_scenario(plan, scenario, known)
        truths[scenario.scenario_id] = delta_true
        all_records.extend(records)
        for method in plan.methods:
            results_rows.append((scenario, method, by_method[method]))
        if log is not None:
            log(f"{scenario.scenario_id}: delta_true={delta_true:+.4f} "
                f"({time.perf_counter() - t0:.1f}s, {plan.n_replicates} replicates)")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_results(results_rows, out / "results.csv")
        write_replicates(all_records, out / "replicates.csv")
    return results_rows, all_records, truths


def write_results(results_rows, path) -> None:
    with open(path, "w") as fh:
        fh.write(RESULTS_COLUMNS + "\n")
        for scenario, method, oc in results_rows:
            row = [
                scenario.scenario_id, scenario.mechanism, scenario.shift,
                _fmt(scenario.theta), method, oc.n_reps, oc.n_failed,
                _fmt(oc.bias), _fmt(oc.bias_mcse), _fmt(oc.sd), _fmt(oc.mean_se),
                _fmt(oc.power), _fmt(oc.power_mcse), _fmt(oc.type1), _fmt(oc.type1_mcse),
                _fmt(oc.coverage), _fmt(oc.coverage_mcse), _fmt(oc.rmse),
                _encode_counts(oc.collapse_counts),
            ]
            fh.write(",".join(str(c) for c in row) + "\n")


def write_replicates(records: list[ReplicateRecord], path) -> None:
    ordered = sorted(records, key=lambda r: (r.scenario_id, r.replicate,
                                             ALL_METHODS.index(r.method)))
    with open(path, "w") as fh:
        fh.write(REPLICATES_COLUMNS + "\n")
        for r in ordered:
            row = [
                r.scenario_id, r.replicate, r.method, _fmt(r.estimate), _fmt(r.se),
                _fmt(r.df), _fmt(r.ci_lo), _fmt(r.ci_hi), _fmt(r.p_zero),
                _fmt(r.p_margin), _fmt(r.collapse_level), _fmt(r.seconds),
            ]
            fh.write(",".join(str(c) for c in row) + "\n")


def default_grid(mechanism: str = "dar", shift: str = "instant",
                 thetas=dgm.THETA_GRID, null_mode: bool = False) -> tuple[ScenarioSpec, ...]:
    return tuple(ScenarioSpec(mechanism, shift, t, null_mode) for t in thetas)
