"""Open-set detection metrics over matched detection/ground-truth pairs.

The central object is the pair of positively-localized sets: detections that
land on a known action (F_k) and detections that land on an unknown one
(F_u). Every curve metric sweeps a rejection threshold over the unknown-ness
scores of those instances. CDR gates on closed-set correctness, so its curve
can only sit below the plain ROC curve built from the same scores.
"""

import csv
import dataclasses
import json
import math

import numpy as np

from .localization import Interval, tiou

T0_GRID = (0.3, 0.4, 0.5, 0.6, 0.7)


@dataclasses.dataclass(frozen=True)
class EvalInstance:
    score: float      # unknown-ness of the matched detection
    correct: bool     # closed-set argmax equals the ground-truth class
    is_unknown: bool  # matched ground truth is an unknown-class action
    tiou: float


@dataclasses.dataclass(frozen=True)
class CurvePoint:
    threshold: float
    x: float
    y: float


def detection_confidence(det) -> float:
    """Ranking confidence shared by matching, suppression, and mAP."""
    return det.actionness * (1.0 - det.uncertainty)


def build_eval_sets(detections, gt_by_sequence, k_known: int, t0: float):
    """Greedy one-to-one matching into the two positively-localized sets.

    Detections claim ground-truth segments in confidence order; each segment
    can be claimed once. A detection joins F_k or F_u only when its best
    available overlap exceeds t0; everything else is left out. Detections
    whose score is nan were excluded upstream by the scoring rule and do not
    participate at all.
    """
    if not (0.0 < t0 < 1.0):
        raise ValueError("t0 must lie in (0, 1)")
    ranked = sorted(
        (d for d in detections if not math.isnan(d.score)),
        key=lambda d: (-detection_confidence(d), d.start),
    )
    claimed = {}  # (seq_id, gt index) -> True
    f_known, f_unknown = [], []
    for det in ranked:
        annotations = gt_by_sequence.get(det.sequence_id, [])
        best, best_idx = 0.0, -1
        for idx, (segment, _) in enumerate(annotations):
            if (det.sequence_id, idx) in claimed:
                continue
            overlap = tiou(Interval(det.start, det.end), segment)
            if overlap > best:
                best, best_idx = overlap, idx
        if best_idx < 0 or best <= t0:
            continue
        claimed[(det.sequence_id, best_idx)] = True
        gt_class = annotations[best_idx][1]
        predicted = int(np.argmax(det.class_probs)) + 1
        instance = EvalInstance(
            score=float(det.score),
            correct=predicted == gt_class,
            is_unknown=gt_class > k_known,
            tiou=best,
        )
        (f_unknown if instance.is_unknown else f_known).append(instance)
    return f_known, f_unknown


def _thresholds(scores) -> list:
    out = [-math.inf]
    out.extend(sorted(set(float(s) for s in scores)))
    out.append(math.inf)
    return out


def cdr_fpr_curve(f_known, f_unknown):
    """Correct-detection rate vs false-positive rate, swept over the scores.

    A threshold accepts everything scored strictly below it as known; CDR
    counts the accepted knowns that are also correctly classified, FPR the
    accepted unknowns.
    """
    if not f_known:
        raise ValueError("curve undefined without known instances")
    if not f_unknown:
        raise ValueError("curve undefined without unknown instances")
    points = []
    for t in _thresholds([i.score for i in f_known + f_unknown]):
        cdr = sum(1 for i in f_known if i.correct and i.score < t) / len(f_known)
        fpr = sum(1 for i in f_unknown if i.score < t) / len(f_unknown)
        points.append(CurvePoint(threshold=t, x=fpr, y=cdr))
    return points


def _trapezoid(points) -> float:
    area = 0.0
    for a, b in zip(points, points[1:]):
        area += 0.5 * (a.y + b.y) * (b.x - a.x)
    return area


def osdr(curve) -> float:
    return _trapezoid(curve)


def _split_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need both classes present")
    return pos, neg


def roc_curve(scores, labels):
    """Flag-as-unknown ROC: positive iff score at or above the threshold."""
    pos, neg = _split_binary(scores, labels)
    points = []
    for t in _thresholds(scores):
        tpr = float(np.mean(pos >= t))
        fpr = float(np.mean(neg >= t))
        points.append(CurvePoint(threshold=t, x=fpr, y=tpr))
    points.sort(key=lambda p: (p.x, p.y))
    return points


def auroc(scores, labels) -> float:
    return _trapezoid(roc_curve(scores, labels))


def aupr(scores, labels) -> float:
    """Average precision for the unknown class, rectangle rule over recall."""
    pos, neg = _split_binary(scores, labels)
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(float(s) for s in np.concatenate([pos, neg])), reverse=True):
        flagged_pos = int(np.sum(pos >= t))
        flagged = flagged_pos + int(np.sum(neg >= t))
        recall = flagged_pos / pos.size
        precision = flagged_pos / flagged if flagged else 1.0
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def far_at_95(scores, labels) -> float:
    """Lowest false-alarm rate on knowns while still flagging 95% of unknowns."""
    pos, neg = _split_binary(scores, labels)
    best = None
    for t in _thresholds(scores):
        tpr = float(np.mean(pos >= t))
        if tpr < 0.95:
            continue
        fpr = float(np.mean(neg >= t))
        best = fpr if best is None else min(best, fpr)
    return best


def closed_set_map(detections, gt_by_sequence, k_known: int, thresholds=T0_GRID):
    """Interpolated average precision over known classes, per tIoU gate.

    Classes without any ground-truth segment are left out of the mean.
    """
    from .inference import KNOWN

    ranked = sorted(
        (d for d in detections if d.decision == KNOWN),
        key=lambda d: (-detection_confidence(d), d.start),
    )
    gts = {}  # class -> list of (seq_id, idx, Interval)
    for seq_id, annotations in gt_by_sequence.items():
        for idx, (segment, cls) in enumerate(annotations):
            if cls <= k_known:
                gts.setdefault(cls, []).append((seq_id, idx, segment))
    out = {}
    for t in thresholds:
        aps = []
        for cls in range(1, k_known + 1):
            targets = gts.get(cls, [])
            if not targets:
                continue
            dets = [d for d in ranked if d.known_class == cls]
            claimed = set()
            hits = np.zeros(len(dets), dtype=bool)
            for i, det in enumerate(dets):
                best, best_key = 0.0, None
                for seq_id, idx, segment in targets:
                    if seq_id != det.sequence_id or (seq_id, idx) in claimed:
                        continue
                    overlap = tiou(Interval(det.start, det.end), segment)
                    if overlap > best:
                        best, best_key = overlap, (seq_id, idx)
                if best_key is not None and best > t:
                    claimed.add(best_key)
                    hits[i] = True
            aps.append(_interpolated_ap(hits, len(targets)))
        out[t] = float(np.mean(aps)) if aps else 0.0
    return out


def _interpolated_ap(hits, n_gt: int) -> float:
    if n_gt == 0 or hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    recall = tp / n_gt
    # precision envelope: best precision at this recall or beyond
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    area, prev = 0.0, 0.0
    for r, p in zip(recall, precision):
        area += (r - prev) * p
        prev = r
    return float(area)


def evaluate(detections, sequences, k_known: int, t0_grid=T0_GRID) -> dict:
    """Full metric report keyed by localization gate t0.

    Gates where one of the matched sets comes out empty get null metrics
    rather than failing the whole report; the curve functions themselves
    stay strict.
    """
    gt = {s.seq_id: s.annotations for s in sequences}
    maps = closed_set_map(detections, gt, k_known, t0_grid)
    map_block = {f"{t:.1f}": maps[t] for t in t0_grid}
    report = {}
    for t0 in t0_grid:
        f_known, f_unknown = build_eval_sets(detections, gt, k_known, t0)
        entry = {"far95": None, "auroc": None, "aupr": None, "osdr": None,
                 "map": map_block}
        if f_known and f_unknown:
            instances = f_known + f_unknown
            scores = [i.score for i in instances]
            labels = [int(i.is_unknown) for i in instances]
            entry["far95"] = far_at_95(scores, labels)
            entry["auroc"] = auroc(scores, labels)
            entry["aupr"] = aupr(scores, labels)
            entry["osdr"] = osdr(cdr_fpr_curve(f_known, f_unknown))
        report[f"{t0:.1f}"] = entry
    return report


def write_curve_csv(path, points):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "x", "y"])
        for p in points:
            writer.writerow([p.threshold, p.x, p.y])


def write_report_json(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
