"""Abdominal body-scan shape modelling: mesh slicing, circumference PCA,
recurrent hybrid networks, evaluation and a synthetic cohort."""

__version__ = "0.1.0"

from .cohort import (
    CohortSplit,
    ParticipantRecord,
    Scan,
    generate_synthetic_cohort,
    load_cohort_csv,
    split_cohort,
    write_cohort_csv,
)
from .estimators import HybridModel, HybridNetClassifier, HybridNetRegressor, forward_hybrid
from .features import CircumferencePCA, SequenceFeaturizer, ZScoreScaler, fit_normalizer, fit_pca
from .geometry import CircumferenceSequence, TriangleMesh, extract_sequence, load_obj, parse_obj, slice_at_height
from .metrics import auc_mann_whitney, bland_altman, classification_report, hidden_state_heatmap, regression_report
from .persistence import ModelArtifact, load_model, save_model
from .pipeline import TrainConfig, run_ablation, run_baselines, train_hybrid

__all__ = [
    "CircumferencePCA", "CircumferenceSequence", "CohortSplit", "HybridModel", "HybridNetClassifier",
    "HybridNetRegressor", "ModelArtifact", "ParticipantRecord", "Scan", "SequenceFeaturizer", "TrainConfig",
    "TriangleMesh", "ZScoreScaler", "auc_mann_whitney", "bland_altman", "classification_report",
    "extract_sequence", "fit_normalizer", "fit_pca", "forward_hybrid", "generate_synthetic_cohort",
    "hidden_state_heatmap", "load_cohort_csv", "load_model", "load_obj", "parse_obj", "regression_report",
    "run_ablation", "run_baselines", "save_model", "slice_at_height", "split_cohort", "train_hybrid",
    "write_cohort_csv",
]
