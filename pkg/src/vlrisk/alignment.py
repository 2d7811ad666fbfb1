"""Debiased InfoNCE of image queries against text: own note, momentum queue, other patients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class AlignmentConfig:
    tau: float = 0.07
    alpha_min: float = 0.1
    margin: float = 0.1

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.alpha_min <= 1.0:
            raise ValueError("alpha_min must lie in (0, 1]")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def l2_normalize(x: Tensor) -> Tensor:
    """Row-wise unit scaling of a (N, d) tensor."""
    norm = T.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / norm


def adaptive_alpha(pos_sim: float, queue_sims, cfg: AlignmentConfig) -> float:
    """Clamped fraction of negatives within ``margin`` of the positive."""
    queue_sims = np.asarray(queue_sims, dtype=np.float64)
    if queue_sims.size == 0:
        raise ValueError("negative queue is empty")
    hard = float(np.mean(queue_sims >= pos_sim - cfg.margin))
    return float(np.clip(hard, cfg.alpha_min, 1.0))


class NegativeQueue:
    """Ring buffer of unit-norm momentum text embeddings."""

    def __init__(self, dim: int, capacity: int = 1024):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.dim = dim
        self.capacity = capacity
        self._buf = np.zeros((capacity, dim))
        self._head = 0  # next write slot
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    def enqueue(self, embeddings) -> None:
        arr = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings, dtype=np.float64)
        arr = np.atleast_2d(arr)
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("cannot enqueue a zero vector")
        for row in arr / norms:
            self._buf[self._head] = row
            self._head = (self._head + 1) % self.capacity
            self.fill = min(self.fill + 1, self.capacity)

    def snapshot(self) -> np.ndarray:
        """Stored vectors, oldest first (a copy)."""
        if self.fill < self.capacity:
            return self._buf[: self.fill].copy()
        return np.concatenate([self._buf[self._head :], self._buf[: self._head]])

    def state(self) -> dict:
        return {"queue": self.snapshot()}

    def load_state(self, snap: np.ndarray) -> None:
        """Restore a snapshot verbatim (already unit-norm, oldest first)."""
        snap = np.asarray(snap, dtype=np.float64).reshape(-1, self.dim)[-self.capacity :]
        self._buf[:] = 0.0
        self.fill = len(snap)
        self._buf[: self.fill] = snap
        self._head = self.fill % self.capacity


def _negatives(negatives) -> np.ndarray:
    arr = negatives.snapshot() if isinstance(negatives, NegativeQueue) else np.asarray(negatives, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("negative queue is empty")
    return arr


def _similarities(img, txt, negatives: np.ndarray, in_batch: bool, groups):
    """Positive sims (B,), negative sims (B, K) and the admissible-negative mask."""
    zi = l2_normalize(T.as_tensor(img))
    zt = l2_normalize(T.as_tensor(txt))
    pos = (zi * zt).sum(axis=1)
    neg = zi @ Tensor(negatives.T)
    admissible = np.ones(neg.shape, dtype=bool)
    B = pos.shape[0]
    if in_batch and B > 1:
        off = ~np.eye(B, dtype=bool)
        if groups is not None:
            groups = np.asarray(groups)
            off &= groups[:, None] != groups[None, :]
        cross = zi @ zt.T + Tensor(np.where(off, 0.0, -1e4))  # excluded pairs pushed out of the sum
        neg = T.concat([neg, cross], axis=1)
        admissible = np.concatenate([admissible, off], axis=1)
    return pos, neg, admissible


def _alpha_rule(pos: np.ndarray, neg: np.ndarray, admissible: np.ndarray, cfg: AlignmentConfig) -> np.ndarray:
    hard = (neg >= pos[:, None] - cfg.margin) & admissible
    return np.clip(hard.sum(axis=1) / admissible.sum(axis=1), cfg.alpha_min, 1.0)


def contrastive_alpha(img, txt, queue, cfg: AlignmentConfig, in_batch: bool = False, groups=None) -> np.ndarray:
    """The adaptive alpha that ``infonce_loss`` would use for these embeddings."""
    with T.no_grad():
        pos, neg, admissible = _similarities(img, txt, _negatives(queue), in_batch, groups)
    return _alpha_rule(pos.data, neg.data, admissible, cfg)


def infonce_loss(
    img: Tensor, txt: Tensor, queue, cfg: AlignmentConfig, alpha=None, in_batch: bool = False, groups=None
) -> Tensor:
    """Debiased InfoNCE over a batch of positive (image, text) pairs.

    loss_k = log(1 + alpha_k * Z_k * exp(-s_k / tau)) = -log(e^{s_k/tau} / (e^{s_k/tau} + alpha_k Z_k)),
    with Z_k summed over the queue.  ``in_batch`` also counts the other text
    embeddings of the batch as negatives, which keeps the text encoder from
    escaping the (lagging) queue instead of aligning; rows sharing a
    ``groups`` id (visits of one patient) are never negatives of each other.
    ``alpha`` defaults to the adaptive rule and is a per-step constant; pass a
    scalar or array to override it.
    """
    cfg.validate()
    pos, neg, admissible = _similarities(img, txt, _negatives(queue), in_batch, groups)
    if alpha is None:
        alpha = _alpha_rule(pos.data, neg.data, admissible, cfg)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), pos.shape)
    if np.any(alpha < 0):
        raise ValueError("alpha must be non-negative")
    live = alpha > 0
    log_alpha = np.log(np.where(live, alpha, 1.0))
    gap = T.logsumexp(neg * (1.0 / cfg.tau), axis=1) - pos * (1.0 / cfg.tau) + log_alpha
    per_pair = T.softplus(gap) * live.astype(np.float64)
    return per_pair.mean()


def infonce_textbook(img: Tensor, txt: Tensor, negatives: np.ndarray, tau: float) -> Tensor:
    """Plain InfoNCE: cross-entropy of the positive against [positive, negatives]."""
    zi = l2_normalize(T.as_tensor(img))
    zt = l2_normalize(T.as_tensor(txt))
    pos = (zi * zt).sum(axis=1, keepdims=True)
    neg = zi @ Tensor(np.asarray(negatives).T)
    logits = T.concat([pos, neg], axis=1) * (1.0 / tau)
    return -(T.log_softmax(logits, axis=1)[:, 0]).mean()
