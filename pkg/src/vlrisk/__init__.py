"""Multimodal longitudinal risk prediction on synthetic EHR cohorts.

A float64 tape autodiff engine drives image/text encoders with debiased
contrastive alignment, a time-aware causal decoder, a disease-graph adapter
and a calibrated risk head with MC-dropout review flags.
"""

from .cohort import CohortConfig, PatientRecord, generate_cohort, load_cohort, save_cohort
from .model import ModelConfig, RiskFormer
from .training import TrainConfig, TrainState, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CohortConfig",
    "ModelConfig",
    "PatientRecord",
    "RiskFormer",
    "TrainConfig",
    "TrainState",
    "evaluate",
    "generate_cohort",
    "load_cohort",
    "save_cohort",
    "train",
]
