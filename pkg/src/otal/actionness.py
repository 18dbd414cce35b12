"""Positive-unlabeled actionness learning.

Foreground-labeled samples are positives; label-0 samples form an unlabeled
mixture of true background and unannotated actions. The lowest-scoring
unlabeled samples are taken as likely negatives, capped at the positive
count for a balanced binary cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import EPS_LOG, Tensor, tensor


@dataclass(frozen=True)
class ActionnessBatch:
    scores: np.ndarray  # predicted actionness in [0, 1]
    labels: np.ndarray  # 0 = unlabeled mixture, 1..K = known classes

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if s.shape != y.shape or s.ndim != 1:
            raise ValueError("scores and labels must be equal-length vectors")
        if np.any(s < 0) or np.any(s > 1):
            raise ValueError("scores must lie in [0, 1]")
        if np.any(y < 0):
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 1)

    @property
    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)


def select_negatives(batch: ActionnessBatch) -> np.ndarray:
    """Indices of the min(|P|,|U|) lowest-scoring unlabeled samples.

    Sort is stable, so equal scores resolve by original batch position.
    """
    unl = batch.unlabeled_indices
    m = min(batch.positive_indices.size, unl.size)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(batch.scores[unl], kind="stable")
    return unl[order[:m]]


def actionness_loss(positives, negatives) -> float:
    """Balanced BCE on the positive and selected-negative score sets."""
    pos = np.clip(np.asarray(positives, dtype=np.float64), EPS_LOG, 1.0 - EPS_LOG)
    neg = np.clip(np.asarray(negatives, dtype=np.float64), EPS_LOG, 1.0 - EPS_LOG)
    loss = 0.0
    if pos.size:
        loss -= float(np.mean(np.log(pos)))
    if neg.size:
        loss -= float(np.mean(np.log(1.0 - neg)))
    return loss


def pu_actionness_loss(scores: Tensor, labels) -> Tensor:
    """Differentiable PU loss over a batch of actionness scores.

    Negative selection runs on plain values; only the selected samples
    receive gradient. Either term vanishes when its set is empty.
    """
    batch = ActionnessBatch(scores.values.copy(), np.asarray(labels, dtype=np.int64))
    pos_idx = batch.positive_indices
    neg_idx = select_negatives(batch)
    total = tensor(0.0)
    if pos_idx.size:
        p = dc.clamp(dc.gather(scores, pos_idx), EPS_LOG, 1.0 - EPS_LOG)
        total = dc.sub(total, dc.mean(dc.log(p)))
    if neg_idx.size:
        n = dc.clamp(dc.gather(scores, neg_idx), EPS_LOG, 1.0 - EPS_LOG)
        one = tensor(np.ones(int(neg_idx.size)))
        total = dc.sub(total, dc.mean(dc.log(dc.sub(one, n))))
    return total
