"""Treatment-policy estimator comparison on a simulated longitudinal trial."""

from .dgm import ScenarioConfig, TrialDataset, generate_trial, pioneer1_config, true_estimand
from .harness import RunPlan, ScenarioSpec, run_plan, run_scenario
from .results import EstimateResult

__all__ = [
    "ScenarioConfig",
    "TrialDataset",
    "generate_trial",
    "pioneer1_config",
    "true_estimand",
    "RunPlan",
    "ScenarioSpec",
    "run_plan",
    "run_scenario",
    "EstimateResult",
]
