"""Temporal interval math, localization losses, and uncertainty calibration.

Coarse proposals are scored with a tIoU loss, refined proposals with an L1
offset loss, and the classifier's uncertainty is calibrated against the
coarse localization quality: well-localized proposals should be certain,
poorly localized ones uncertain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import EPS_LOG, Tensor, tensor


@dataclass(frozen=True)
class Interval:
    start: float
    end: float

    @property
    def valid(self) -> bool:
        return self.end > self.start

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class OffsetPair:
    """Boundary offsets as fractions of the interval half-width."""

    ds: float
    de: float

    def __post_init__(self):
        if not (math.isfinite(self.ds) and math.isfinite(self.de)):
            raise ValueError("offsets must be finite")


@dataclass(frozen=True)
class CalibrationParams:
    """gamma is the floor on localization quality used as calibration target."""

    gamma: float = 0.001

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")


def tiou(a: Interval, b: Interval) -> float:
    """Intersection over union of two time intervals."""
    if not a.valid or not b.valid:
        raise ValueError("tiou requires valid intervals (end > start)")
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0.0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def tiou_matrix(starts_a, ends_a, starts_b, ends_b) -> np.ndarray:
    """Pairwise tIoU between two interval lists, shape (len(a), len(b))."""
    sa = np.asarray(starts_a, dtype=np.float64)[:, None]
    ea = np.asarray(ends_a, dtype=np.float64)[:, None]
    sb = np.asarray(starts_b, dtype=np.float64)[None, :]
    eb = np.asarray(ends_b, dtype=np.float64)[None, :]
    inter = np.maximum(0.0, np.minimum(ea, eb) - np.maximum(sa, sb))
    union = (ea - sa) + (eb - sb) - inter
    out = np.zeros_like(inter)
    pos = inter > 0.0
    out[pos] = inter[pos] / union[pos]
    return out


def tiou_tensor(pred_start: Tensor, pred_end: Tensor, gt_start, gt_end) -> Tensor:
    """Differentiable elementwise tIoU between predicted and fixed intervals."""
    gs = tensor(np.asarray(gt_start, dtype=np.float64))
    ge = tensor(np.asarray(gt_end, dtype=np.float64))
    inter = dc.relu(dc.sub(dc.minimum(pred_end, ge), dc.maximum(pred_start, gs)))
    pred_len = dc.sub(pred_end, pred_start)
    union = dc.sub(dc.add(pred_len, dc.sub(ge, gs)), inter)
    union = dc.clamp(union, EPS_LOG, float("inf"))
    return dc.div(inter, union)


def coarse_loss(pred_start: Tensor, pred_end: Tensor, gt_start, gt_end, match_mask) -> Tensor:
    """Mean (1 - tIoU) over matched proposals; zero when nothing matched."""
    mask = np.asarray(match_mask, dtype=np.float64)
    n_matched = float(np.sum(mask))
    if n_matched == 0.0:
        return tensor(0.0)
    overlap = tiou_tensor(pred_start, pred_end, gt_start, gt_end)
    per = dc.mul(dc.sub(tensor(np.ones_like(mask)), overlap), tensor(mask))
    return dc.div(dc.sum_(per), n_matched)


def refine_loss(pred_offsets: Tensor, gt_offsets, match_mask) -> Tensor:
    """Mean L1 distance between offset pairs over matched proposals."""
    mask = np.asarray(match_mask, dtype=np.float64)
    n_matched = float(np.sum(mask))
    if n_matched == 0.0:
        return tensor(0.0)
    diff = dc.absolute(dc.sub(pred_offsets, tensor(np.asarray(gt_offsets, dtype=np.float64))))
    per = dc.mul(dc.sum_(diff, axis=1), tensor(mask))
    return dc.div(dc.sum_(per), n_matched)


def recover_location(coarse: Interval, offsets: OffsetPair) -> Interval:
    """Apply offsets scaled by the coarse half-width to both boundaries."""
    half = 0.5 * coarse.length
    return Interval(coarse.start + half * offsets.ds, coarse.end + half * offsets.de)


def recover_batch(starts, ends, ds, de):
    """Vectorized recover_location; returns (starts, ends) arrays."""
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    half = 0.5 * (ends - starts)
    return starts + half * np.asarray(ds), ends + half * np.asarray(de)


def iouc_weight(overlap: float, params: CalibrationParams) -> float:
    return max(params.gamma, overlap)


def iouc_loss(coarse_pred: Interval, gt, u: float, params: CalibrationParams) -> float:
    """Cross-entropy between uncertainty and clipped localization quality.

    gt may be None for proposals without any ground truth, in which case the
    quality floor gamma applies. Minimized over u at u = 1 - w.
    """
    overlap = tiou(coarse_pred, gt) if gt is not None else 0.0
    w = iouc_weight(overlap, params)
    u = min(max(u, EPS_LOG), 1.0 - EPS_LOG)
    return -w * math.log(1.0 - u) - (1.0 - w) * math.log(u)


def iouc_loss_tensor(u: Tensor, weights) -> Tensor:
    """Mean calibration loss over a batch; weights are detached qualities."""
    w = tensor(np.asarray(weights, dtype=np.float64))
    one = tensor(np.ones(u.shape))
    uc = dc.clamp(u, EPS_LOG, 1.0 - EPS_LOG)
    term_certain = dc.mul(w, dc.log(dc.sub(one, uc)))
    term_uncertain = dc.mul(dc.sub(one, w), dc.log(uc))
    return dc.neg(dc.mean(dc.add(term_certain, term_uncertain)))
