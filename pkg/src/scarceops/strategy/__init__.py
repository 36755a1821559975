from .plans import (
    KINDS,
    StrategyConfig,
    StrategyPlan,
    best_known,
    conceive_dataset,
    conception_pool,
    default_scorer,
    default_tau,
    metadata_affinity,
    plan_key,
    rank_strategies,
    rank_strategies_metadata_only,
    similarity_weight,
    utility,
)
from .tasks import TaskSpec, TaskStore

__all__ = [
    "KINDS",
    "StrategyConfig",
    "StrategyPlan",
    "best_known",
    "conceive_dataset",
    "conception_pool",
    "default_scorer",
    "default_tau",
    "metadata_affinity",
    "plan_key",
    "rank_strategies",
    "rank_strategies_metadata_only",
    "similarity_weight",
    "utility",
    "TaskSpec",
    "TaskStore",
]
