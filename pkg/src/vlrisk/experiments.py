"""History-length sweep: AUROC and ECE as the visit cap grows."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import replace

import numpy as np

from .cohort import CohortConfig, generate_cohort
from .rng import Rng
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

HISTORY_LENGTHS = (4, 8, 16, 32)
SWEEP_COLUMNS = ["max_visits", "seed", "auroc", "ece"]

# Each visit is a weak view of the latent state, so evidence accumulates
# with history length and short-gap patterns carry risk.
GAP_SENSITIVE = {
    "noise": 3.0,
    "visit_drift": 1.5,
    "token_noise": 0.5,
    "tokens_per_visit": (4, 8),
    "gap_signal": 2.0,
}


# defaults of the report command and the trend acceptance check
REPORT_COHORT = {**GAP_SENSITIVE, "n_patients": 1000}
REPORT_TRAIN = {"epochs": 8, "rl_epochs": 0}
REPORT_EXTRA_TEST = 1000


def report_seeds(base: int, n: int) -> list[int]:
    return [int(base) + k for k in range(n)]


def gap_sensitive_cohort(**overrides) -> CohortConfig:
    return CohortConfig.from_dict({**GAP_SENSITIVE, **overrides})


def history_sweep(
    cohort_cfg: CohortConfig, train_cfg: TrainConfig, lengths=HISTORY_LENGTHS, seeds=(0, 1, 2), extra_test: int = 0
):
    """Train and test once per (length, seed); returns per-run rows then per-length means.

    The seed sets both the cohort and the training stream, so every length
    sees the same patients' latent draws up to the visit cap.  ``extra_test``
    further patients from the same generator join the test split; patient
    ``i`` has its own stream, so they leave the training cohort unchanged.
    """
    rows = []
    n = cohort_cfg.n_patients
    for length in lengths:
        for seed in seeds:
            ccfg = replace(cohort_cfg, max_visits=int(length), seed=int(seed), n_patients=n + int(extra_test))
            tcfg = copy.deepcopy(train_cfg)
            tcfg.seed = int(seed)
            drawn = generate_cohort(ccfg)
            cohort = drawn[:n]
            state, _ = train(cohort, tcfg)
            by_id = {r.patient_id: r for r in cohort}
            test = [by_id[i] for i in state.split_ids["test"]] + drawn[n:]
            ev = evaluate(state.model, test, tcfg, None, Rng(seed).child(99))
            rows.append({"max_visits": int(length), "seed": str(seed), "auroc": ev.auroc(), "ece": ev.ece()})
            log.info("sweep length %d seed %d: auroc %.4f ece %.4f", length, seed, ev.auroc(), ev.ece())
    for length in lengths:
        sub = [r for r in rows if r["max_visits"] == int(length)]
        rows.append(
            {
                "max_visits": int(length),
                "seed": "mean",
                "auroc": float(np.mean([r["auroc"] for r in sub])),
                "ece": float(np.mean([r["ece"] for r in sub])),
            }
        )
    return rows


def sweep_means(rows) -> tuple[list, list, list]:
    means = [r for r in rows if r["seed"] == "mean"]
    means.sort(key=lambda r: r["max_visits"])
    return [r["max_visits"] for r in means], [r["auroc"] for r in means], [r["ece"] for r in means]


def trend_holds(values, direction: str, band: float = 0.02) -> bool:
    """Non-decreasing (``up``) or non-increasing (``down``) allowing ``band`` of slack per step."""
    v = np.asarray(values, dtype=np.float64)
    steps = np.diff(v)
    return bool(np.all(steps >= -band)) if direction == "up" else bool(np.all(steps <= band))


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "auroc": repr(float(r["auroc"])), "ece": repr(float(r["ece"]))})
