"""Adversarial load-forecast attacks and their effect on staged distribution restoration."""

__version__ = "0.1.0"

from .attacks import AttackConfig, greedy_pgd_attack, pgd_attack, sparse_attack  # noqa: E402
from .clpu import ClpuParams, apply_clpu, clpu_power  # noqa: E402
from .feeder import Feeder, load_bundled_feeder, load_feeder  # noqa: E402
from .forecast import ForecastModel, build_windows, train  # noqa: E402
from .lp import LpProblem, MilpProblem, solve_lp, solve_milp  # noqa: E402
from .planner import PlannerInput, RestorationPlan, plan_diff, plan_restoration  # noqa: E402
from .validator import StageProblem, validate_plan, validate_stage  # noqa: E402

__all__ = [
    "AttackConfig",
    "ClpuParams",
    "Feeder",
    "ForecastModel",
    "LpProblem",
    "MilpProblem",
    "PlannerInput",
    "RestorationPlan",
    "StageProblem",
    "apply_clpu",
    "build_windows",
    "clpu_power",
    "greedy_pgd_attack",
    "load_bundled_feeder",
    "load_feeder",
    "pgd_attack",
    "plan_diff",
    "plan_restoration",
    "solve_lp",
    "solve_milp",
    "sparse_attack",
    "train",
    "validate_plan",
    "validate_stage",
]
