#!/usr/bin/env python3
"""Print the large-sample oracle value of the policy contrast per scenario."""

import argparse
import sys

from tpesim.dgm import THETA_GRID, pioneer1_config, true_estimand
from tpesim.harness import RunPlan, ScenarioSpec, scenario_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mechanism", choices=("dar", "dnar"), default="dar")
    ap.add_argument("--shift", choices=("instant", "gradual"), default="instant")
    ap.add_argument("--truth-n", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=20240)
    ap.add_argument("--null", action="store_true")
    args = ap.parse_args()

    plan = RunPlan(scenarios=(), methods=("FULL",), root_seed=args.seed)
    for theta in THETA_GRID:
        spec = ScenarioSpec(args.mechanism, args.shift, theta, args.null)
        cfg = scenario_config(plan, spec)
        delta, mc_se = true_estimand(cfg, args.truth_n)
        print(f"{spec.scenario_id}: delta_true={delta:+.5f} (mc_se {mc_se:.5f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
