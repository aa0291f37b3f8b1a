"""Fairness-aware risk prediction under censoring, evaluated with net benefit.

Modules:
    cohort: data model, synthetic generator, CSV ingestion and partitioning.
    censoring: composite horizon outcomes and IPCW weights.
    metrics: IPCW metrics, calibration curves and bootstrap intervals.
    decision: net benefit, calibrated net benefit and decision curves.
    train: risk models, fairness-regularised objectives and GroupDRO.
    sim: analytic simulation of calibration and decision thresholds.
    report: test-set metric reports.
"""

from .errors import (CalibrationError, CohortParseError, ConfigError, DomainError, FairNBError,
                     NonInvertibleError, SizingError, StratificationError, TrainingError,
                     UndefinedMetricError)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError", "CohortParseError", "ConfigError", "DomainError", "FairNBError",
    "NonInvertibleError", "SizingError", "StratificationError", "TrainingError",
    "UndefinedMetricError", "__version__",
]
