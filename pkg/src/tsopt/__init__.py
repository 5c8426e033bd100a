"""Two-stage traffic signal optimization.

Stage one searches the space of valid fixed-time plans with constrained
evolution strategies. Stage two logs cycles around the found plan and trains
decentralized actors with centralized critics, entirely offline, to adjust
phase durations within a small bound.
"""
from .es import EsConfig, EsResult, run_es
from .marl import (
    BatchDataset,
    MaddpgConfig,
    TrainedPolicy,
    collect_batch,
    evaluate_policies,
    load_dataset,
    save_dataset,
    train_offline,
)
from .plans import (
    Bounds,
    InfeasibleRepairError,
    IntersectionSpec,
    PhaseSpec,
    PlanDelta,
    SignalPlan,
    apply_delta,
    repair_plan,
    uniform_plan,
    validate_plan,
)
from .scenarios import load_case
from .sim import (
    LinkSpec,
    MovementSpec,
    NetworkSpec,
    Simulator,
    cycle_reward,
    evaluate_plan,
)

__version__ = "0.1.0"

__all__ = [
    "EsConfig",
    "EsResult",
    "run_es",
    "BatchDataset",
    "MaddpgConfig",
    "TrainedPolicy",
    "collect_batch",
    "evaluate_policies",
    "load_dataset",
    "save_dataset",
    "train_offline",
    "Bounds",
    "InfeasibleRepairError",
    "IntersectionSpec",
    "PhaseSpec",
    "PlanDelta",
    "SignalPlan",
    "apply_delta",
    "repair_plan",
    "uniform_plan",
    "validate_plan",
    "load_case",
    "LinkSpec",
    "MovementSpec",
    "NetworkSpec",
    "Simulator",
    "cycle_reward",
    "evaluate_plan",
    "__version__",
]
