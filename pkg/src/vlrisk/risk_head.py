"""Class logits, temperature softmax, MC-dropout uncertainty and action lists."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Module, uniform_param
from .rng import Rng
from .tensor import Tensor

ACTIONS = ("diet_modification", "exercise_plan", "stress_management", "virtual_followup", "medication_reminder")

DEFAULT_ACTIONS_BY_DISEASE = {
    "low_risk": ["exercise_plan", "virtual_followup"],
    "diabetes": ["diet_modification", "exercise_plan", "medication_reminder"],
    "hypertension": ["stress_management", "medication_reminder", "diet_modification"],
    "chronic_kidney_disease": ["virtual_followup", "medication_reminder", "diet_modification"],
    "heart_failure": ["medication_reminder", "virtual_followup", "exercise_plan"],
    "copd": ["exercise_plan", "virtual_followup", "medication_reminder"],
}


class ActionTable:
    def __init__(self, class_names, actions_by_disease=None, top_k: int = 2):
        table = actions_by_disease or DEFAULT_ACTIONS_BY_DISEASE
        self.class_names = list(class_names)
        self.top_k = top_k
        self._rows = {}
        for c, name in enumerate(self.class_names):
            acts = list(table.get(name, ["virtual_followup", "medication_reminder"]))
            unknown = [a for a in acts if a not in ACTIONS]
            if unknown:
                raise ValueError(f"unknown actions {unknown} for {name}")
            if not acts:
                raise ValueError(f"disease {name} has no actions")
            self._rows[c] = acts

    def actions_for(self, class_id: int) -> list:
        if class_id not in self._rows:
            raise KeyError(f"unknown class id {class_id}")
        return list(self._rows[class_id])


def recommend(predicted: int, proba, table: ActionTable, top_k: int | None = None) -> list:
    """Leading table actions for the predicted class."""
    k = table.top_k if top_k is None else top_k
    return table.actions_for(int(predicted))[:k]


@dataclass
class PredictionBundle:
    proba: np.ndarray
    uncertainty: float
    recommendations: list = field(default_factory=list)
    review_flag: bool = False
    patient_id: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "patient_id": self.patient_id,
                "proba": [float(p) for p in self.proba],
                "s": float(self.uncertainty),
                "actions": list(self.recommendations),
                "review_flag": bool(self.review_flag),
            }
        )


class RiskHead(Module):
    def __init__(self, d_model: int, n_classes: int, rng: Rng, dropout: float = 0.1, mc_samples: int = 20):
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        self.weight = uniform_param((d_model, n_classes), d_model, rng)  # omega_c as columns
        self.bias = uniform_param((n_classes,), d_model, rng)
        self.dropout = dropout
        self.mc_samples = mc_samples
        self.temperature = 1.0

    def logits(self, h_cls) -> Tensor:
        h = T.as_tensor(h_cls)
        if h.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"state has length {h.shape[-1]}, expected {self.weight.shape[0]}")
        return h @ self.weight + self.bias if h.ndim > 1 else (h.reshape(1, -1) @ self.weight + self.bias).reshape(-1)


def calibrated_proba(logits, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)) / temperature
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p if np.ndim(logits) > 1 else p[0]


def population_variance_score(samples: np.ndarray) -> np.ndarray:
    """Mean over classes of the divide-by-M variance; samples (M, ..., C)."""
    return np.var(samples, axis=0).mean(axis=-1)


def mc_uncertainty(h_cls, head: RiskHead, rng: Rng, enabled: bool = True) -> np.ndarray:
    """Per-patient variance of M dropout-perturbed probability vectors."""
    raw = T.as_tensor(h_cls).data
    h = np.atleast_2d(raw)
    if not enabled or head.dropout == 0.0 or head.mc_samples == 1:
        s = np.zeros(h.shape[0])
    else:
        samples = []
        for _ in range(head.mc_samples):
            dropped = T.dropout(Tensor(h), head.dropout, rng, enabled=True).data
            samples.append(calibrated_proba(dropped @ head.weight.data + head.bias.data, head.temperature))
        s = population_variance_score(np.stack(samples))
    return s if raw.ndim > 1 else float(s[0])


def build_bundles(proba, s, table: ActionTable, review_threshold: float | None, patient_ids=None) -> list:
    """Assemble bundles; flagged (high-variance) patients get no automatic actions."""
    bundles = []
    for i, (p, si) in enumerate(zip(proba, s)):
        flag = review_threshold is not None and si > review_threshold
        acts = [] if flag else recommend(int(np.argmax(p)), p, table)
        bundles.append(
            PredictionBundle(
                proba=np.asarray(p),
                uncertainty=float(si),
                recommendations=acts,
                review_flag=bool(flag),
                patient_id=None if patient_ids is None else patient_ids[i],
            )
        )
    return bundles
