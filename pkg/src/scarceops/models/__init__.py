from .metrics import METRICS, accuracy, check_metric, macro_f1, neg_mse, score
from .networks import (
    FitConfig,
    TrialFailure,
    build_network,
    compatible,
    descriptor_for,
    encode_network,
    evaluate,
    evaluation_split,
    fit,
    infer,
    network_from_checkpoint,
    predict_labels,
    warm_start,
)
from .store import STATUSES, ModelRecord, ModelStore, RunRecord, best_key, choose_best

__all__ = [
    "METRICS",
    "accuracy",
    "macro_f1",
    "neg_mse",
    "score",
    "check_metric",
    "FitConfig",
    "TrialFailure",
    "build_network",
    "compatible",
    "descriptor_for",
    "encode_network",
    "evaluate",
    "evaluation_split",
    "fit",
    "infer",
    "network_from_checkpoint",
    "predict_labels",
    "warm_start",
    "STATUSES",
    "ModelRecord",
    "ModelStore",
    "RunRecord",
    "best_key",
    "choose_best",
]
