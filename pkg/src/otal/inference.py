"""Open-set decision procedure over trained detector outputs.

Each surviving proposal is routed to exactly one of three decisions by two
thresholds: actionness below one half means background, and among actional
proposals an evidential uncertainty above tau means the action is unknown.
Everything else is assigned its most probable known class.
"""

import dataclasses
import json

import numpy as np

from .diffcore import EPS_LOG
from .localization import recover_batch
from .model import DetectorConfig, forward

SCORING_FUNCTIONS = (
    "one_minus_max_prob",
    "u_over_one_minus_a",
    "a_over_one_minus_u",
    "u_times_a",
    "two_level",
)

BACKGROUND = "background"
UNKNOWN = "unknown"
KNOWN = "known"


@dataclasses.dataclass(frozen=True)
class Detection:
    sequence_id: str
    start: float
    end: float
    decision: str
    known_class: int  # 1-based, 0 when the decision is not a known class
    uncertainty: float
    actionness: float
    class_probs: np.ndarray  # expected probability over known classes
    score: float  # unknown-ness score; nan when excluded by the scoring rule

    def __post_init__(self):
        if self.decision not in (BACKGROUND, UNKNOWN, KNOWN):
            raise ValueError(f"unknown decision {self.decision!r}")
        if self.decision == KNOWN and self.known_class < 1:
            raise ValueError("known decision requires a positive class id")


def select_tau(uncertainties, quantile: float = 0.95) -> float:
    """Nearest-rank quantile of training-time uncertainties.

    The calibration set is the uncertainty of every training detection that
    cleared the actionness gate; tau is chosen so that roughly the given
    fraction of confidently-actional training proposals fall below it.
    """
    values = np.sort(np.asarray(uncertainties, dtype=np.float64))
    if values.size == 0:
        raise ValueError("cannot select tau from an empty calibration set")
    if not (0.0 <= quantile <= 1.0):
        raise ValueError("quantile must lie in [0, 1]")
    idx = min(values.size - 1, max(0, int(np.ceil(quantile * values.size)) - 1))
    return float(values[idx])


def decide(u: float, actionness: float, class_probs, tau: float):
    """Three-way routing: background, unknown action, or a known class."""
    if not (0.0 < u <= 1.0):
        raise ValueError("uncertainty must lie in (0, 1]")
    if not (0.0 <= actionness <= 1.0):
        raise ValueError("actionness must lie in [0, 1]")
    if actionness < 0.5:
        return BACKGROUND, 0
    if u > tau:
        return UNKNOWN, 0
    return KNOWN, int(np.argmax(class_probs)) + 1


def score(u: float, actionness: float, class_probs, fn: str):
    """Unknown-ness score under the chosen ranking rule.

    Returns None for proposals the rule excludes outright (the two-level
    rule only ranks proposals that cleared the actionness gate).
    """
    if fn == "one_minus_max_prob":
        return 1.0 - float(np.max(class_probs))
    if fn == "u_over_one_minus_a":
        return u / max(1.0 - actionness, EPS_LOG)
    if fn == "a_over_one_minus_u":
        return actionness / max(1.0 - u, EPS_LOG)
    if fn == "u_times_a":
        return u * actionness
    if fn == "two_level":
        return u if actionness > 0.5 else None
    raise ValueError(f"unknown scoring function {fn!r}")


def proposal_outputs(batch, config: DetectorConfig):
    """Per-proposal (u, actionness, known-class probabilities) as arrays.

    The three training modes expose different heads, so each gets its own
    reading: the full model pairs a known-class evidence head with an
    explicit actionness head; the background-class variants derive
    actionness from the background channel instead.
    """
    z = batch.ev_logits.values
    if config.mode == "softmax_ce":
        shifted = z - z.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        a = 1.0 - p[:, 0]
        known = p[:, 1:]
        probs = known / np.maximum(known.sum(axis=1, keepdims=True), EPS_LOG)
        u = 1.0 - probs.max(axis=1)  # confidence surrogate, no evidence head
    elif config.has_background_class:
        alpha = np.exp(z) + 1.0
        strength = alpha.sum(axis=1)
        expected = alpha / strength[:, None]
        u = config.k_eff / strength
        a = 1.0 - expected[:, 0]
        known = expected[:, 1:]
        probs = known / np.maximum(known.sum(axis=1, keepdims=True), EPS_LOG)
    else:
        alpha = np.exp(z) + 1.0
        strength = alpha.sum(axis=1)
        u = config.k_known / strength
        probs = alpha / strength[:, None]
        a = 1.0 / (1.0 + np.exp(-batch.act_logit.values))
    return np.clip(u, EPS_LOG, 1.0), a, probs


def refined_intervals(batch, t: int):
    """Recovered (start, end) per proposal plus a validity mask.

    Boundaries are clipped to the sequence extent; proposals whose refined
    interval collapses are marked invalid.
    """
    starts, ends = recover_batch(
        batch.coarse_start.values,
        batch.coarse_end.values,
        batch.offsets.values[:, 0],
        batch.offsets.values[:, 1],
    )
    starts = np.clip(starts, 0.0, float(t))
    ends = np.clip(ends, 0.0, float(t))
    return starts, ends, ends > starts


def nms_indices(starts, ends, ranks, tiou_threshold: float = 0.5):
    """Greedy duplicate suppression on 1-d intervals.

    Highest rank wins; ties broken by earlier start, then input order.
    Intervals overlapping a kept one by more than the threshold are dropped.
    """
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    ranks = np.asarray(ranks, dtype=np.float64)
    order = np.lexsort((np.arange(starts.size), starts, -ranks))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            inter = min(ends[i], ends[j]) - max(starts[i], starts[j])
            if inter <= 0.0:
                continue
            union = (ends[i] - starts[i]) + (ends[j] - starts[j]) - inter
            if inter / union > tiou_threshold:
                ok = False
                break
        if ok:
            kept.append(int(i))
    return np.array(kept, dtype=np.int64)


def _sequence_proposals(params, seq, config):
    batch = forward(params, [(seq.seq_id, seq.features)], config)
    t = seq.features.shape[0]
    starts, ends, valid = refined_intervals(batch, t)
    u, a, probs = proposal_outputs(batch, config)
    idx = np.flatnonzero(valid)
    keep = idx[nms_indices(starts[idx], ends[idx], (a * (1.0 - u))[idx])]
    return starts, ends, u, a, probs, keep


def training_uncertainties(params, sequences, config) -> np.ndarray:
    """Uncertainty of every actional post-suppression training proposal."""
    out = []
    for seq in sequences:
        starts, ends, u, a, probs, keep = _sequence_proposals(params, seq, config)
        out.append(u[keep][a[keep] > 0.5])
    return np.concatenate(out) if out else np.array([])


def run_inference(params, sequences, config, tau: float,
                  scoring: str = "two_level") -> list:
    if scoring not in SCORING_FUNCTIONS:
        raise ValueError(f"unknown scoring function {scoring!r}")
    detections = []
    for seq in sequences:
        starts, ends, u, a, probs, keep = _sequence_proposals(params, seq, config)
        for i in keep:
            decision, cls = decide(u[i], a[i], probs[i], tau)
            sc = score(u[i], a[i], probs[i], scoring)
            detections.append(Detection(
                sequence_id=seq.seq_id,
                start=float(starts[i]),
                end=float(ends[i]),
                decision=decision,
                known_class=cls,
                uncertainty=float(u[i]),
                actionness=float(a[i]),
                class_probs=probs[i],
                score=float("nan") if sc is None else float(sc),
            ))
    return detections


def write_detections(path, detections):
    """One JSON object per line; nan scores are serialized as null."""
    with open(path, "w") as fh:
        for d in detections:
            row = {
                "sequence_id": d.sequence_id,
                "start": d.start,
                "end": d.end,
                "decision": d.decision,
                "class": d.known_class,
                "u": d.uncertainty,
                "actionness": d.actionness,
                "score": None if np.isnan(d.score) else d.score,
            }
            fh.write(json.dumps(row) + "\n")
