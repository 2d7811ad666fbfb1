"""Synthetic longitudinal multimodal cohort with a known risk function.

Each patient carries a latent vector ``u``.  The outcome is drawn from a
softmax over ``signal * A @ u + intercept``; image features, note tokens,
visit gaps and diagnosis codes are all noisy views of ``u``:

* dims 0-6 are visible to the image features (linear map plus noise) and
  to the note tokens (topic blocks keyed on the sign of each dim);
* dim 0 also drives age, dim 1 the overall diagnosis burden;
* dim 2 ("deterioration") raises the share of short visit gaps;
* dim 7 is visible only through the comorbid chain codes 0 -> 1 -> 2.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

LATENT_DIM = 8
_VISIBLE_DIMS = 7
_CHAIN = (0, 1, 2)
_GENERIC_TOKENS = 4

DISEASE_NAMES = (
    "low_risk",
    "diabetes",
    "hypertension",
    "chronic_kidney_disease",
    "heart_failure",
    "copd",
)


class CohortFormatError(ValueError):
    pass


def class_names(n_classes: int) -> list[str]:
    names = list(DISEASE_NAMES[:n_classes])
    names += [f"disease_{c}" for c in range(len(names), n_classes)]
    return names


@dataclass
class CohortConfig:
    n_patients: int = 2000
    n_classes: int = 2
    d_img: int = 16
    vocab_size: int = 200
    max_visits: int = 16
    min_visits: int = 0  # 0 -> max(1, max_visits // 2)
    short_gap: tuple = (3.0, 30.0)
    long_gap: tuple = (90.0, 730.0)
    p_short: float = 0.5
    gap_signal: float = 1.0
    prevalence: list | None = None  # None -> uniform
    noise: float = 0.2
    token_noise: float = 0.05
    tokens_per_visit: tuple = (16, 32)
    visit_drift: float = 0.3
    signal: float = 2.5
    risk_weights: list = field(default_factory=lambda: [1.0, 0.8, 0.8, 0.6, 0.4, 0.3, 0.2, 0.3])
    n_chapters: int = 4
    codes_per_chapter: int = 4
    seed: int = 7

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.max_visits < 1:
            raise ValueError("max_visits must be >= 1")
        if self.min_visits > self.max_visits:
            raise ValueError("min_visits exceeds max_visits")
        if self.d_img < 1:
            raise ValueError("d_img must be >= 1")
        if self.vocab_size < 2 * _VISIBLE_DIMS + _GENERIC_TOKENS:
            raise ValueError(f"vocab_size must be >= {2 * _VISIBLE_DIMS + _GENERIC_TOKENS}")
        if len(self.risk_weights) != LATENT_DIM:
            raise ValueError(f"risk_weights needs {LATENT_DIM} entries")
        prev = self.prevalence_targets()
        if len(prev) != self.n_classes or np.any(prev <= 0) or abs(prev.sum() - 1.0) > 1e-9:
            raise ValueError("prevalence targets must be positive, one per class, summing to 1")
        lo, hi = self.tokens_per_visit
        if not 1 <= lo <= hi:
            raise ValueError("tokens_per_visit must satisfy 1 <= lo <= hi")
        if self.n_chapters * self.codes_per_chapter < len(_CHAIN):
            raise ValueError("need at least 3 diagnosis codes")
        if not 0.0 < self.p_short < 1.0:
            raise ValueError("p_short must lie in (0, 1)")

    def prevalence_targets(self) -> np.ndarray:
        if self.prevalence is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return np.asarray(self.prevalence, dtype=np.float64)

    @property
    def n_codes(self) -> int:
        return self.n_chapters * self.codes_per_chapter

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("short_gap", "long_gap", "tokens_per_visit"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Visit:
    img: np.ndarray
    tokens: list
    delta_t: float
    dx: list

    def __eq__(self, other):
        return (
            isinstance(other, Visit)
            and np.array_equal(self.img, other.img)
            and list(self.tokens) == list(other.tokens)
            and self.delta_t == other.delta_t
            and list(self.dx) == list(other.dx)
        )


@dataclass
class PatientRecord:
    patient_id: str
    age: int
    sex: str
    visits: list
    label: int
    length_of_stay: float
    latent: dict | None = None  # {"u": [...], "risk": [...]} when generated here

    def n_distinct_dx(self) -> int:
        return len({c for v in self.visits for c in v.dx})


# -- generation -------------------------------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class _World:
    """Population-level parameters shared by every patient of one cohort."""

    def __init__(self, cfg: CohortConfig, rng: Rng):
        C = cfg.n_classes
        w = np.asarray(cfg.risk_weights, dtype=np.float64)
        self.A = np.zeros((C, LATENT_DIM))
        self.A[1] = w / np.linalg.norm(w)
        for c in range(2, C):
            row = rng.normal(size=LATENT_DIM) * np.abs(w)
            self.A[c] = row / np.linalg.norm(row)

        self.B = rng.normal(size=(cfg.d_img, LATENT_DIM)) / np.sqrt(_VISIBLE_DIMS)
        self.B[:, _VISIBLE_DIMS:] = 0.0

        n_codes = cfg.n_codes
        self.dx_base = rng.uniform(-3.0, -1.8, size=n_codes)
        self.dx_load = rng.normal(scale=0.2, size=(n_codes, LATENT_DIM))
        self.dx_load[:, 1] += 0.6
        for k in _CHAIN:
            self.dx_load[k, 7] += 1.4
        self.dx_base[list(_CHAIN)] += 0.3

        self.block = (cfg.vocab_size - _GENERIC_TOKENS) // (2 * _VISIBLE_DIMS)

        # intercepts chosen so the population prevalence hits the targets
        target = cfg.prevalence_targets()
        draws = rng.normal(size=(20000, LATENT_DIM))
        base = cfg.signal * draws @ self.A.T
        self.intercept = np.zeros(C)
        for _ in range(200):
            logits = base + self.intercept
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            step = np.log(target) - np.log(p.mean(axis=0))
            self.intercept += step - step[0]
            if np.abs(step).max() < 1e-10:
                break

    def risk_logits(self, u: np.ndarray, signal: float) -> np.ndarray:
        return signal * self.A @ u + self.intercept


def _make_patient(i: int, cfg: CohortConfig, world: _World, rng: Rng) -> PatientRecord:
    u = rng.normal(size=LATENT_DIM)
    risk = world.risk_logits(u, cfg.signal)
    p = np.exp(risk - risk.max())
    p /= p.sum()
    label = int(rng.choice(cfg.n_classes, p=p))

    age = int(np.clip(round(58.0 + 12.0 * u[0] + rng.normal(scale=5.0)), 18, 100))
    sex = "F" if rng.random() < 0.5 else "M"
    los = float(np.round(np.exp(1.2 + 0.35 * u[1] + rng.normal(scale=0.5)), 2))

    lo = cfg.min_visits or max(1, cfg.max_visits // 2)
    n_visits = int(rng.integers(lo, cfg.max_visits + 1))
    p_short = _sigmoid(np.log(cfg.p_short / (1 - cfg.p_short)) + cfg.gap_signal * u[2])

    visits = []
    tok_lo, tok_hi = cfg.tokens_per_visit
    for t in range(n_visits):
        if t == 0:
            gap = 0.0
        elif rng.random() < p_short:
            gap = float(np.round(rng.uniform(*cfg.short_gap), 3))
        else:
            gap = float(np.round(rng.uniform(*cfg.long_gap), 3))
        u_t = u + cfg.visit_drift * rng.normal(size=LATENT_DIM)
        img = world.B @ u_t + cfg.noise * rng.normal(size=cfg.d_img)

        n_tok = int(rng.integers(tok_lo, tok_hi + 1))
        tokens = []
        for _ in range(n_tok):
            if rng.random() < cfg.token_noise:
                tokens.append(int(rng.integers(cfg.vocab_size)))
            else:
                j = int(rng.integers(_VISIBLE_DIMS))
                sign = int(u_t[j] > 0)
                start = _GENERIC_TOKENS + (2 * j + sign) * world.block
                tokens.append(start + int(rng.integers(world.block)))

        logit_dx = world.dx_base + world.dx_load @ u
        active = []
        prev_chain = False
        for k in range(cfg.n_codes):
            z = logit_dx[k]
            if k in _CHAIN[1:] and prev_chain:
                z += 1.5
            hit = rng.random() < _sigmoid(z)
            if k in _CHAIN:
                prev_chain = hit
            if hit:
                active.append(k)
        visits.append(Visit(img=np.round(img, 6), tokens=tokens, delta_t=gap, dx=active))

    return PatientRecord(
        patient_id=f"P{i:06d}",
        age=age,
        sex=sex,
        visits=visits,
        label=label,
        length_of_stay=los,
        latent={"u": [float(x) for x in u], "risk": [float(x) for x in risk]},
    )


def generate_cohort(cfg: CohortConfig) -> list[PatientRecord]:
    """Draw ``cfg.n_patients`` records; patient ``i`` uses its own child stream."""
    cfg.validate()
    root = Rng(cfg.seed)
    world = _World(cfg, root.child(0))
    return [_make_patient(i, cfg, world, root.child(i + 1)) for i in range(cfg.n_patients)]


def bayes_scores(cohort) -> np.ndarray:
    """Exact generative posterior p*(y | latent) for each patient, shape (N, C)."""
    rows = []
    for rec in cohort:
        if rec.latent is None or "risk" not in rec.latent:
            raise ValueError(f"patient {rec.patient_id} has no stored latent risk")
        r = np.asarray(rec.latent["risk"], dtype=np.float64)
        e = np.exp(r - r.max())
        rows.append(e / e.sum())
    return np.array(rows)


# -- persistence ------------------------------------------------------------------

_REQUIRED = ("patient_id", "age", "sex", "label", "visits")
_VISIT_REQUIRED = ("img", "tokens", "delta_t", "dx")


def _open(path, mode: str):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def record_to_dict(rec: PatientRecord) -> dict:
    return {
        "patient_id": rec.patient_id,
        "age": rec.age,
        "sex": rec.sex,
        "label": rec.label,
        "length_of_stay": rec.length_of_stay,
        "latent": rec.latent,
        "visits": [
            {"img": [float(x) for x in v.img], "tokens": list(v.tokens), "delta_t": v.delta_t, "dx": list(v.dx)}
            for v in rec.visits
        ],
    }


def record_from_dict(d: dict, where: str = "record") -> PatientRecord:
    for key in _REQUIRED:
        if key not in d:
            raise CohortFormatError(f"{where}: missing required field {key!r}")
    visits = []
    for j, v in enumerate(d["visits"]):
        for key in _VISIT_REQUIRED:
            if key not in v:
                raise CohortFormatError(f"{where}: visit {j} missing required field {key!r}")
        visits.append(
            Visit(
                img=np.asarray(v["img"], dtype=np.float64),
                tokens=[int(t) for t in v["tokens"]],
                delta_t=float(v["delta_t"]),
                dx=[int(c) for c in v["dx"]],
            )
        )
    if not visits:
        raise CohortFormatError(f"{where}: patient has no visits")
    return PatientRecord(
        patient_id=str(d["patient_id"]),
        age=int(d["age"]),
        sex=str(d["sex"]),
        visits=visits,
        label=int(d["label"]),
        length_of_stay=float(d.get("length_of_stay", 0.0)),
        latent=d.get("latent"),
    )


def save_cohort(cohort, path) -> None:
    with _open(path, "w") as fh:
        for rec in cohort:
            fh.write(json.dumps(record_to_dict(rec), separators=(",", ":")))
            fh.write("\n")


def load_cohort(path) -> list[PatientRecord]:
    out = []
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(d, dict):
                raise CohortFormatError(f"line {lineno}: expected a JSON object")
            out.append(record_from_dict(d, where=f"line {lineno}"))
    return out


def cohort_summary(cohort) -> list[dict]:
    """Per-patient age / length-of-stay / chronic-condition count rows."""
    return [
        {
            "patient_id": r.patient_id,
            "age": r.age,
            "sex": r.sex,
            "length_of_stay": r.length_of_stay,
            "n_chronic": r.n_distinct_dx(),
            "label": r.label,
        }
        for r in cohort
    ]
