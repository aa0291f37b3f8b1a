"""Risk-model training: ERM, fairness-regularised objectives and GroupDRO."""

from .models import Architecture, RiskModel, StratifiedModel, load_model
from .objectives import (dro_update, mmd_penalty, parity_penalty, relaxed_metric, surrogate,
                         weighted_mmd)
from .trainer import (Candidate, TrainConfig, TrainData, TrainResult, cross_fit, fit,
                      select_model, train_dro, train_erm, train_one, train_regularized,
                      train_stratified, training_log_csv, validation_metrics)

__all__ = [
    "Architecture", "RiskModel", "StratifiedModel", "load_model", "dro_update", "mmd_penalty",
    "parity_penalty", "relaxed_metric", "surrogate", "weighted_mmd", "Candidate", "TrainConfig",
    "TrainData", "TrainResult", "cross_fit", "fit", "select_model", "train_dro", "train_erm",
    "train_one", "train_regularized", "train_stratified", "training_log_csv", "validation_metrics",
]
