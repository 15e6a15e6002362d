"""ICU admission prediction from windowed clinical data, with feature-impact
pruning and demographic trust quantification."""

from .clinical_data import (FeatureSchema, LabeledDataset, PatientTimeline, WindowId,
                            derive_label, impute_forward, parse_dataset, prepare,
                            split_patients, synthesize_dataset)
from .explain import ImpactPruner, ImpactReport, PrunePlan, feature_impact, prune_features
from .nn_core import ICUNetClassifier, MlpArchitecture, MlpModel, TrainConfig, param_count
from .trust import TrustParams, question_answer_trust, trust_report

__version__ = "0.1.0"

__all__ = [
    "FeatureSchema", "LabeledDataset", "PatientTimeline", "WindowId", "derive_label",
    "impute_forward", "parse_dataset", "prepare", "split_patients", "synthesize_dataset",
    "ImpactPruner", "ImpactReport", "PrunePlan", "feature_impact", "prune_features",
    "ICUNetClassifier", "MlpArchitecture", "MlpModel", "TrainConfig", "param_count",
    "TrustParams", "question_answer_trust", "trust_report",
]
