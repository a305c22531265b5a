"""Structure-preserving PE attacks, the GA optimizer and the attack harness."""

from .ga import GaConfig, GaResult, ga_optimize, random_fill
from .harness import (
    ATTACKS,
    SCHEMES,
    Predictor,
    attack_file,
    build_plan,
    make_predictor,
    plan_certified,
    rows_to_jsonl,
    run_attack,
    summarize,
    summary_table,
)
from .manipulations import (
    AttackPlan,
    alignment_mismatches,
    PlanKind,
    combined,
    compose,
    extend_code_caves,
    identity,
    inject_sections,
    padding_slack,
    shift_sections,
    validate_plan,
)

__all__ = [
    "ATTACKS", "SCHEMES", "AttackPlan", "alignment_mismatches", "GaConfig", "GaResult", "PlanKind", "Predictor", "attack_file",
    "build_plan", "combined", "compose", "extend_code_caves", "ga_optimize", "identity", "inject_sections",
    "make_predictor", "padding_slack", "plan_certified", "random_fill", "rows_to_jsonl", "run_attack",
    "shift_sections", "summarize", "summary_table", "validate_plan",
]
