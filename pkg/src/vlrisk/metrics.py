"""AUROC, ECE, actionability and reliability tables, each with a brute-force twin."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def auroc(scores, labels) -> float:
    """Mann-Whitney rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_pairs(scores, labels) -> float:
    """O(n^2) oracle: fraction of (positive, negative) pairs ordered correctly."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return float(wins / (pos.size * neg.size))


def macro_auroc(proba, labels) -> float:
    """Binary: AUROC of the class-1 column.  Multiclass: macro one-vs-rest
    over the classes that have both positives and negatives."""
    proba = np.asarray(proba, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if proba.ndim == 1:
        return auroc(proba, labels)
    if proba.shape[1] == 2:
        return auroc(proba[:, 1], labels == 1)
    vals = []
    for c in range(proba.shape[1]):
        hit = labels == c
        if 0 < hit.sum() < hit.size:
            vals.append(auroc(proba[:, c], hit))
    if not vals:
        raise ValueError("AUROC needs both positive and negative labels")
    return float(np.mean(vals))


@dataclass
class ReliabilityBin:
    lower: float
    upper: float
    mean_confidence: float
    accuracy: float
    count: int


def _bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    # right-closed bins (k/n, (k+1)/n]; confidence 0 falls in the first bin
    return np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)


def _confidence_and_hits(proba, labels):
    proba = np.asarray(proba, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if proba.size == 0 or labels.size == 0:
        raise ValueError("ECE of an empty set is undefined")
    if proba.ndim == 1:
        proba = np.stack([1.0 - proba, proba], axis=1)
    conf = proba.max(axis=1)
    hits = (proba.argmax(axis=1) == labels).astype(np.float64)
    return conf, hits


def reliability_table(proba, labels, n_bins: int = 10) -> list[ReliabilityBin]:
    conf, hits = _confidence_and_hits(proba, labels)
    idx = _bin_index(conf, n_bins)
    table = []
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        table.append(
            ReliabilityBin(
                lower=b / n_bins,
                upper=(b + 1) / n_bins,
                mean_confidence=float(conf[sel].mean()) if n else 0.0,
                accuracy=float(hits[sel].mean()) if n else 0.0,
                count=n,
            )
        )
    return table


def ece(proba, labels, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins."""
    conf, hits = _confidence_and_hits(proba, labels)
    idx = _bin_index(conf, n_bins)
    n = conf.size
    total = 0.0
    for b in range(n_bins):
        sel = idx == b
        if sel.any():
            total += sel.sum() / n * abs(hits[sel].mean() - conf[sel].mean())
    return float(total)


def write_reliability_csv(table, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lower", "upper", "mean_confidence", "accuracy", "count"])
        for b in table:
            w.writerow([f"{b.lower:.2f}", f"{b.upper:.2f}", repr(b.mean_confidence), repr(b.accuracy), b.count])


def actionability(bundles, threshold: float = 0.5, table=None) -> float:
    """Share of confident patients whose bundle carries a table action for
    the predicted class.  No confident patients -> 1.0."""
    eligible = 0
    served = 0
    for b in bundles:
        proba = np.asarray(b.proba)
        if proba.max() < threshold:
            continue
        eligible += 1
        predicted = int(proba.argmax())
        allowed = set(table.actions_for(predicted)) if table is not None else None
        acts = list(b.recommendations)
        if acts and (allowed is None or any(a in allowed for a in acts)):
            served += 1
    return 1.0 if eligible == 0 else served / eligible
