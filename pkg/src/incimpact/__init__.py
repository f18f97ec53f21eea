"""Traffic incident impact pipeline: labeling, few-shot prediction, evaluation.

The package labels incidents from upstream speed data, selects in-context
examples for LLM classification, predicts through real or mock providers,
and scores everything with imbalance-aware F1 reports. It runs fully offline
against synthetic data and the deterministic mock provider.
"""

__version__ = "0.1.0"

from .errors import PipelineError
from .model import (
    CLASSES,
    ClassThresholds,
    DEFAULT_THRESHOLDS,
    Direction,
    FeatureVector,
    ImpactClass,
    Incident,
    IncidentFeatures,
    LabeledExample,
    LogLine,
    PredictionTask,
    TimeStep,
    TrafficFeatures,
    impact_class_from_ratio,
)

__all__ = [
    "CLASSES",
    "ClassThresholds",
    "DEFAULT_THRESHOLDS",
    "Direction",
    "FeatureVector",
    "ImpactClass",
    "Incident",
    "IncidentFeatures",
    "LabeledExample",
    "LogLine",
    "PipelineError",
    "PredictionTask",
    "TimeStep",
    "TrafficFeatures",
    "impact_class_from_ratio",
    "__version__",
]
