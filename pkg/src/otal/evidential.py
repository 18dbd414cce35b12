"""Evidential classification with momentum importance-balanced re-weighting.

A K-way head predicts non-negative evidence per class. Dirichlet parameters
alpha = evidence + 1 give a predictive distribution with a built-in
uncertainty u = K / sum(alpha). Training minimizes the negative
log-likelihood of the label under that Dirichlet, with each sample's loss
scaled by a momentum-smoothed weight derived from its gradient magnitude,
so that high-influence samples drive evidence collection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import EPS_LOG, Tensor, tensor


@dataclass(frozen=True)
class EvidentialOutput:
    """Per-sample evidential head output over K known classes.

    evidence must be a non-negative vector; everything else is derived.
    """

    evidence: np.ndarray

    def __post_init__(self):
        ev = np.asarray(self.evidence, dtype=np.float64)
        if ev.ndim != 1:
            raise ValueError(f"evidence must be a vector, got shape {ev.shape}")
        if np.any(ev < 0):
            raise ValueError("evidence must be non-negative")
        object.__setattr__(self, "evidence", ev)

    @property
    def num_classes(self) -> int:
        return self.evidence.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return self.evidence + 1.0

    @property
    def strength(self) -> float:
        return float(np.sum(self.alpha))

    @property
    def uncertainty(self) -> float:
        # K/S is in (0, 1] because every alpha entry is at least 1
        return self.num_classes / self.strength

    @property
    def expected_prob(self) -> np.ndarray:
        return self.alpha / self.strength


def one_hot(labels, num_classes: int) -> np.ndarray:
    """One-hot rows for 1-indexed class labels in [1..K]."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 0:
        labels = labels[None]
    if np.any(labels < 1) or np.any(labels > num_classes):
        raise ValueError(f"labels must lie in [1..{num_classes}]")
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels - 1] = 1.0
    return out


def edl_loss(output: EvidentialOutput, label: int) -> float:
    """Dirichlet negative log-likelihood of one sample, log(S) - log(alpha_y)."""
    k = output.num_classes
    if not (1 <= label <= k):
        raise ValueError(f"label {label} outside [1..{k}]")
    alpha = output.alpha
    s = float(np.sum(alpha))
    return math.log(s) - math.log(alpha[label - 1])


def edl_loss_batch(alpha: np.ndarray, labels) -> np.ndarray:
    """Vectorized log(S_i) - log(alpha_i,y_i) for rows of alpha."""
    alpha = np.asarray(alpha, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    s = np.sum(alpha, axis=1)
    picked = alpha[np.arange(alpha.shape[0]), labels - 1]
    return np.log(s) - np.log(picked)


def edl_nll(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Per-sample EDL loss as a differentiable graph over raw logits.

    logits: (N, K) Tensor; onehot: (N, K) array with one 1 per row.
    Returns an (N,) Tensor of losses.
    """
    alpha = dc.add(dc.exp(logits), 1.0)
    s = dc.sum_(alpha, axis=1)
    log_alpha = dc.log(alpha)
    picked = dc.sum_(dc.mul(log_alpha, tensor(onehot)), axis=1)
    return dc.sub(dc.log(s), picked)


def edl_grad_closed_form(output: EvidentialOutput, label: int) -> np.ndarray:
    """Gradient magnitude driver g_j = t_j * (1/alpha_j - u).

    Only the label entry is nonzero. The value equals the derivative of the
    sample's EDL loss along the all-ones logit direction, and its magnitude
    stays inside [0, 1).
    """
    k = output.num_classes
    if not (1 <= label <= k):
        raise ValueError(f"label {label} outside [1..{k}]")
    g = np.zeros(k, dtype=np.float64)
    g[label - 1] = 1.0 / output.alpha[label - 1] - output.uncertainty
    return g


def grad_norms_batch(alpha: np.ndarray, labels) -> np.ndarray:
    """|1/alpha_label - K/S| per row; the L1 norm of the closed-form gradient."""
    alpha = np.asarray(alpha, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = alpha.shape[1]
    s = np.sum(alpha, axis=1)
    picked = alpha[np.arange(alpha.shape[0]), labels - 1]
    return np.abs(1.0 / picked - k / s)


def influence_value(g: np.ndarray, h: np.ndarray) -> float:
    """L1 norm of the outer-product parameter gradient, factorized as |g|_1 * |h|_1."""
    return float(np.sum(np.abs(g)) * np.sum(np.abs(h)))


@dataclass
class MibState:
    """Momentum accumulator for importance weights, bucketed by gradient norm.

    Proposal identity does not persist across iterations, so the moving mean
    is kept per bin over the gradient-norm range [0, 1] rather than per
    sample. Every bin starts at weight 1.0.
    """

    epsilon: float = 0.99
    num_bins: int = 50
    warmup_start: int = 0
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in [0, 1]")
        if self.num_bins < 1:
            raise ValueError("num_bins must be positive")
        if self.weights is None:
            self.weights = np.ones(self.num_bins, dtype=np.float64)


def bin_index(grad_norm: float, num_bins: int) -> int:
    """Bin of [0,1] containing grad_norm; exact boundaries go to the lower bin."""
    if not (0.0 <= grad_norm <= 1.0):
        raise ValueError(f"gradient norm {grad_norm} outside [0, 1]")
    idx = math.ceil(grad_norm * num_bins) - 1
    return min(num_bins - 1, max(0, idx))


def mib_update_batch(state: MibState, grad_norms, omegas, iteration: int) -> np.ndarray:
    """Update bin weights from a batch and return each sample's weight.

    Non-empty bins take a momentum step toward the batch mean of raw
    influence values; empty bins keep their previous weight. Before
    warmup_start iterations the state is left untouched and every sample
    gets weight 1.0.
    """
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    omegas = np.asarray(omegas, dtype=np.float64)
    if grad_norms.shape != omegas.shape:
        raise ValueError("grad_norms and omegas must align")
    n = grad_norms.shape[0]
    if iteration < state.warmup_start:
        return np.ones(n, dtype=np.float64)
    idx = np.array([bin_index(g, state.num_bins) for g in grad_norms], dtype=np.int64)
    for m in np.unique(idx):
        mean_omega = float(np.mean(omegas[idx == m]))
        state.weights[m] = state.epsilon * state.weights[m] + (1.0 - state.epsilon) * mean_omega
    return state.weights[idx].copy()


def mib_update_and_weight(state: MibState, grad_norm: float, omega: float, iteration: int) -> float:
    """Single-sample form of the batch update."""
    if state.epsilon == 1.0:
        # momentum 1 keeps the initial unit weights forever
        bin_index(grad_norm, state.num_bins)  # still validate the input
        return 1.0
    w = mib_update_batch(state, [grad_norm], [omega], iteration)
    return float(w[0])


def weighted_edl_loss(loss_vec: Tensor, weights: np.ndarray) -> Tensor:
    """Mean of per-sample losses scaled by detached weights."""
    return dc.mean(dc.mul(loss_vec, tensor(np.asarray(weights, dtype=np.float64))))


def mib_edl_loss(logits: Tensor, labels, features, state: MibState, iteration: int):
    """Importance-weighted EDL loss for the foreground samples of a batch.

    logits: (N, K) Tensor. labels: 1-indexed class labels. features: (N, D)
    array feeding the evidential layer, used only to size the influence
    values. Returns (loss Tensor, matched flag); the flag is False and the
    loss is zero when no foreground sample was given.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] == 0:
        return tensor(0.0), False
    k = logits.shape[1]
    onehot = one_hot(labels, k)
    loss_vec = edl_nll(logits, onehot)

    # weights come from plain values, never from the graph
    z = np.clip(logits.values, -500.0, 500.0)
    alpha = np.exp(z) + 1.0
    gnorm = grad_norms_batch(alpha, labels)
    feat_l1 = np.sum(np.abs(np.asarray(features, dtype=np.float64)), axis=1)
    omegas = gnorm * feat_l1
    weights = mib_update_batch(state, gnorm, omegas, iteration)
    return weighted_edl_loss(loss_vec, weights), True
