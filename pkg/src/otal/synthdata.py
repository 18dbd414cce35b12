"""Synthetic untrimmed-sequence benchmark with an open-set class split.

Each class owns a fixed unit-vector signature in feature space. An action
instance adds its signature to the background noise over its interval.
Training sequences are annotated with known classes only; a fraction also
contain unannotated "distractor" segments drawn from unknown-class
signatures, so the label-0 pool is a true positive-unlabeled mixture. Test
sequences mix known and unknown actions, all annotated with their real
class ids so evaluation can score them.
"""

from __future__ import annotations

import json
import struct
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import FormatError
from .localization import Interval, tiou_matrix

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEQUENCE_MAGIC = b"OTALSEQ1"

# substream tags hanging off the root seed
_STREAM_SIGNATURES = 0
_STREAM_TRAIN = 1
_STREAM_TEST = 2


@dataclass(frozen=True)
class SplitSpec:
    """Full recipe for one benchmark instance; same spec, same bytes."""

    seed: int = 0
    k_known: int = 6
    k_unknown: int = 3
    n_train: int = 200
    n_test: int = 100
    t: int = 256
    d: int = 16
    # calibrated so the plain softmax baseline lands at roughly 80%
    # closed-set frame accuracy on the default benchmark
    noise_sigma: float = 0.9
    min_len: int = 16
    max_len: int = 64
    max_actions: int = 3
    distractor_frac: float = 0.3
    # geometric frequency ratio between consecutive known classes in the
    # TRAINING split (1.0 = balanced). The test split stays balanced so every
    # class carries equal evaluation weight; the imbalance is what makes
    # gradient re-weighting earn its keep.
    class_skew: float = 0.45

    def __post_init__(self):
        if self.k_known < 2:
            raise ValueError("need at least two known classes")
        if self.k_unknown < 0 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("counts must be positive")
        if not (1 <= self.min_len <= self.max_len):
            raise ValueError("bad action length range")
        if self.max_len > self.t:
            raise ValueError(
                f"actions of length {self.max_len} cannot fit in {self.t} timesteps"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not (0.0 < self.class_skew <= 1.0):
            raise ValueError("class_skew must lie in (0, 1]")

    @property
    def k_total(self) -> int:
        return self.k_known + self.k_unknown


@dataclass
class Sequence:
    seq_id: str
    split: str  # train | test
    features: np.ndarray  # (T, D)
    annotations: list  # of (Interval, class-id); class ids are 1-based

    def known_only(self, k_known: int) -> bool:
        return all(c <= k_known for _, c in self.annotations)


def _rng(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, index]))


def class_signatures(spec: SplitSpec) -> np.ndarray:
    """Unit signature vectors, rejection-sampled to pairwise dot < 0.3."""
    rng = _rng(spec.seed, _STREAM_SIGNATURES)
    sigs = np.zeros((spec.k_total, spec.d))
    for k in range(spec.k_total):
        for attempt in range(10000):
            v = rng.normal(size=spec.d)
            v /= np.linalg.norm(v)
            if k == 0 or np.max(sigs[:k] @ v) < 0.3:
                sigs[k] = v
                break
        else:
            raise ValueError(
                f"could not place {spec.k_total} separated signatures in {spec.d} dims"
            )
    return sigs


def _free_gaps(t: int, taken: list) -> list:
    """Maximal unoccupied integer spans of [0, t] as (start, end) pairs."""
    edges = sorted((int(iv.start), int(iv.end)) for iv in taken)
    gaps, cursor = [], 0
    for s, e in edges:
        if s > cursor:
            gaps.append((cursor, s))
        cursor = max(cursor, e)
    if cursor < t:
        gaps.append((cursor, t))
    return gaps


def _place_intervals(rng, spec: SplitSpec, count: int, occupied: list) -> list:
    """Sample non-overlapping integer intervals inside the free gaps.

    Sampling draws a length bounded by the widest remaining gap, so
    placement succeeds whenever it is feasible at all and errors only when
    no gap can hold even a minimum-length action.
    """
    placed = []
    for _ in range(count):
        gaps = _free_gaps(spec.t, occupied + placed)
        widest = max((e - s for s, e in gaps), default=0)
        if widest < spec.min_len:
            raise ValueError(
                "could not pack actions without overlap; "
                "reduce max_actions or max_len relative to t"
            )
        length = int(rng.integers(spec.min_len, min(spec.max_len, widest) + 1))
        eligible = [(s, e) for s, e in gaps if e - s >= length]
        s, e = eligible[int(rng.integers(len(eligible)))]
        start = int(rng.integers(s, e - length + 1))
        placed.append(Interval(float(start), float(start + length)))
    return placed


def _render(features: np.ndarray, interval: Interval, signature: np.ndarray):
    features[int(interval.start):int(interval.end)] += signature


def _make_sequence(spec, sigs, split, index) -> Sequence:
    tag = _STREAM_TRAIN if split == "train" else _STREAM_TEST
    rng = _rng(spec.seed, tag, index)
    feats = rng.normal(0.0, spec.noise_sigma, size=(spec.t, spec.d))

    n_actions = int(rng.integers(1, spec.max_actions + 1))
    intervals = _place_intervals(rng, spec, n_actions, [])

    annotations = []
    if split == "train":
        weights = spec.class_skew ** np.arange(spec.k_known, dtype=np.float64)
        weights /= weights.sum()
        classes = rng.choice(np.arange(1, spec.k_known + 1), size=n_actions,
                             p=weights)
    else:
        # guarantee open-set content in every test sequence
        classes = rng.integers(1, spec.k_total + 1, size=n_actions)
        if spec.k_unknown >= 1 and not np.any(classes > spec.k_known):
            classes[0] = int(rng.integers(spec.k_known + 1, spec.k_total + 1))
    for iv, c in zip(intervals, classes):
        _render(feats, iv, sigs[c - 1])
        annotations.append((iv, int(c)))

    if split == "train" and spec.k_unknown >= 1 and rng.random() < spec.distractor_frac:
        # unannotated unknown segment: present in the features, absent from labels
        distractor = _place_intervals(rng, spec, 1, intervals)[0]
        c = int(rng.integers(spec.k_known + 1, spec.k_total + 1))
        _render(feats, distractor, sigs[c - 1])

    annotations.sort(key=lambda a: (a[0].start, a[0].end))
    return Sequence(f"{split}-{index:04d}", split, feats, annotations)


def generate(spec: SplitSpec):
    """Build the train and test splits; deterministic in spec alone."""
    sigs = class_signatures(spec)
    train = [_make_sequence(spec, sigs, "train", i) for i in range(spec.n_train)]
    test = [_make_sequence(spec, sigs, "test", i) for i in range(spec.n_test)]
    return train, test


@dataclass
class MatchResult:
    """Per-proposal supervision extracted from one sequence's annotations."""

    labels: np.ndarray  # 0 = unmatched, else gt class id
    gt_starts: np.ndarray  # matched gt boundaries (0 where unmatched)
    gt_ends: np.ndarray
    offsets: np.ndarray  # (N, 2) regression targets, 0 where unmatched
    tious: np.ndarray  # best tIoU per proposal regardless of threshold


def match_proposals(starts, ends, annotations, tiou_threshold: float) -> MatchResult:
    """Assign each proposal its best-overlap annotation.

    A proposal gets the class of its maximal-tIoU annotation when that tIoU
    strictly exceeds the threshold, else label 0. Ties resolve to the
    annotation with the earlier start (then earlier end). Offset targets
    invert the boundary-refinement transform so that applying them to the
    proposal recovers the matched interval exactly.
    """
    if not (0.0 < tiou_threshold < 1.0):
        raise ValueError("tiou_threshold must lie in (0, 1)")
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    n = starts.shape[0]
    out = MatchResult(
        labels=np.zeros(n, dtype=np.int64),
        gt_starts=np.zeros(n),
        gt_ends=np.zeros(n),
        offsets=np.zeros((n, 2)),
        tious=np.zeros(n),
    )
    if not annotations:
        return out
    gt_s = np.array([iv.start for iv, _ in annotations])
    gt_e = np.array([iv.end for iv, _ in annotations])
    gt_c = np.array([c for _, c in annotations], dtype=np.int64)
    overlap = tiou_matrix(starts, ends, gt_s, gt_e)
    for i in range(n):
        row = overlap[i]
        best = np.max(row)
        out.tious[i] = best
        if best <= tiou_threshold:
            continue
        cand = np.flatnonzero(row == best)
        j = cand[np.lexsort((gt_e[cand], gt_s[cand]))[0]]
        half = 0.5 * (ends[i] - starts[i])
        if half <= 0.0:
            continue
        out.labels[i] = gt_c[j]
        out.gt_starts[i] = gt_s[j]
        out.gt_ends[i] = gt_e[j]
        out.offsets[i, 0] = (gt_s[j] - starts[i]) / half
        out.offsets[i, 1] = (gt_e[j] - ends[i]) / half
    return out


def _toml_scalar(v):
    if isinstance(v, bool):
        raise TypeError("no boolean fields expected")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(float(v))
    return json.dumps(str(v))


def write_spec_toml(spec: SplitSpec, path: Path):
    lines = [f"{f.name} = {_toml_scalar(getattr(spec, f.name))}" for f in fields(spec)]
    path.write_text("\n".join(lines) + "\n")


def read_spec_toml(path: Path) -> SplitSpec:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"unparseable spec file {path}: {exc}") from exc
    names = {f.name for f in fields(SplitSpec)}
    unknown = set(raw) - names
    if unknown:
        raise FormatError(f"unknown spec keys: {sorted(unknown)}")
    try:
        return SplitSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid spec values in {path}: {exc}") from exc


def _write_record(fh, features: np.ndarray):
    t, d = features.shape
    fh.write(SEQUENCE_MAGIC)
    fh.write(struct.pack("<II", t, d))
    fh.write(np.ascontiguousarray(features, dtype="<f8").tobytes())


def _read_record(fh):
    head = fh.read(16)
    if not head:
        return None
    if len(head) < 16 or head[:8] != SEQUENCE_MAGIC:
        raise FormatError("bad sequence record header")
    t, d = struct.unpack("<II", head[8:])
    payload = fh.read(8 * t * d)
    if len(payload) != 8 * t * d:
        raise FormatError("truncated sequence payload")
    return np.frombuffer(payload, dtype="<f8").reshape(t, d).astype(np.float64)


def save_dataset(dirpath, spec: SplitSpec, train, test):
    """Write spec.toml, sequences.bin and annotations.jsonl."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    write_spec_toml(spec, dirpath / "spec.toml")
    with open(dirpath / "sequences.bin", "wb") as fh:
        for seq in list(train) + list(test):
            _write_record(fh, seq.features)
    with open(dirpath / "annotations.jsonl", "w") as fh:
        for seq in list(train) + list(test):
            row = {
                "id": seq.seq_id,
                "split": seq.split,
                "actions": [
                    {"start": iv.start, "end": iv.end, "class": c}
                    for iv, c in seq.annotations
                ],
            }
            fh.write(json.dumps(row) + "\n")


def load_dataset(dirpath):
    """Read a dataset directory back; raises FormatError on any mismatch."""
    dirpath = Path(dirpath)
    spec = read_spec_toml(dirpath / "spec.toml")
    rows = []
    with open(dirpath / "annotations.jsonl") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    train, test = [], []
    with open(dirpath / "sequences.bin", "rb") as fh:
        for row in rows:
            feats = _read_record(fh)
            if feats is None:
                raise FormatError("fewer sequence records than annotation rows")
            annotations = [
                (Interval(a["start"], a["end"]), int(a["class"]))
                for a in row["actions"]
            ]
            seq = Sequence(row["id"], row["split"], feats, annotations)
            if row["split"] == "train":
                train.append(seq)
            elif row["split"] == "test":
                test.append(seq)
            else:
                raise FormatError(f"unknown split tag {row['split']!r}")
        if fh.read(1):
            raise FormatError("trailing bytes after last sequence record")
    return spec, train, test
