"""Anchor-free temporal detector with evidence, actionness and boundary heads.

Every timestep anchors one proposal: a shared two-layer perceptron reads the
local feature window and emits a coarse interval (positive widths around the
anchor), refinement offsets, K-way classification evidence, and an
actionness logit. Training composes four terms: importance-weighted
evidential classification, positive-unlabeled actionness, localization
(coarse tIoU plus refined L1, averaged), and IoU-aware uncertainty
calibration.

The coarse regression is supervised by the anchor-inside-action assignment;
everything else is supervised by tIoU matching of the current coarse
proposals, which lights up once the coarse stage localizes.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, tensor
from .actionness import pu_actionness_loss
from .errors import DivergenceError, FormatError
from .evidential import MibState, mib_edl_loss
from .localization import coarse_loss, iouc_loss_tensor, refine_loss
from .synthdata import MatchResult, match_proposals

WEIGHTS_MAGIC = b"OTALW001"

_STREAM_INIT = 10
_STREAM_SHUFFLE = 11

MODES = ("opental", "vanilla_edl", "softmax_ce")


@dataclass(frozen=True)
class DetectorConfig:
    k_known: int = 6
    feat_dim: int = 16
    # wide enough that an anchor inside a typical action sees at least one
    # boundary, which is what makes width regression learnable
    radius: int = 16
    hidden: int = 48
    mu: float = 10.0
    lr: float = 1e-3
    epochs: int = 25
    seed: int = 0
    batch_sequences: int = 4
    tiou_train: float = 0.5
    epsilon: float = 0.99
    num_bins: int = 50
    warmup_epochs: int = 10
    gamma: float = 0.001
    mode: str = "opental"
    use_mib: bool = True
    use_actionness: bool = True
    use_iouc: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.radius < 1:
            raise ValueError("radius must be at least 1")
        if self.hidden < self.k_known:
            raise ValueError("hidden width must be at least the class count")
        if self.mode != "opental":
            # baseline modes have none of the three components
            object.__setattr__(self, "use_mib", False)
            object.__setattr__(self, "use_actionness", False)
            object.__setattr__(self, "use_iouc", False)

    @property
    def has_background_class(self) -> bool:
        """Evidence/softmax head carries an explicit background channel."""
        return self.mode != "opental" or not self.use_actionness

    @property
    def k_eff(self) -> int:
        return self.k_known + 1 if self.has_background_class else self.k_known

    @property
    def window(self) -> int:
        return (2 * self.radius + 1) * self.feat_dim


@dataclass
class ProposalBatch:
    """All per-timestep head outputs for a batch of sequences, plus labels."""

    seq_ids: list
    anchors: np.ndarray  # (N,) anchor centers
    coarse_start: Tensor  # (N,)
    coarse_end: Tensor  # (N,)
    offsets: Tensor  # (N, 2)
    ev_logits: Tensor  # (N, k_eff)
    act_logit: Tensor  # (N,)
    hidden: np.ndarray  # (N, H) detached trunk output
    # anchor-inside-action supervision for the coarse stage
    frame_labels: np.ndarray = None  # type: ignore[assignment]
    frame_gt_starts: np.ndarray = None  # type: ignore[assignment]
    frame_gt_ends: np.ndarray = None  # type: ignore[assignment]
    # tIoU matching of the coarse proposals
    match: MatchResult = None  # type: ignore[assignment]


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def init_params(config: DetectorConfig, t_hint: int = 256) -> dict:
    """Seeded weight dictionary; head weights start near zero so the
    zero-input evidence is 1 per class and actionness is 0.5."""
    rng = _rng(config.seed, _STREAM_INIT)
    w, h, k = config.window, config.hidden, config.k_eff

    def dense(fan_in, fan_out, std):
        return tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)

    params = {
        "trunk.w1": dense(w, h, math.sqrt(2.0 / w)),
        "trunk.b1": tensor(np.zeros(h), requires_grad=True),
        "trunk.w2": dense(h, h, math.sqrt(2.0 / h)),
        "trunk.b2": tensor(np.zeros(h), requires_grad=True),
        "head.width.w": dense(h, 2, 0.01),
        "head.width.b": tensor(
            np.full(2, _inv_softplus(t_hint / 16.0)), requires_grad=True
        ),
        "head.offset.w": dense(h, 2, 0.01),
        "head.offset.b": tensor(np.zeros(2), requires_grad=True),
        "head.evidence.w": dense(h, k, 0.01),
        "head.evidence.b": tensor(np.zeros(k), requires_grad=True),
        "head.actionness.w": dense(h, 1, 0.01),
        "head.actionness.b": tensor(np.zeros(1), requires_grad=True),
    }
    return params


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    n = x.shape[0]
    bias = dc.broadcast_to(dc.reshape(b, (1, b.shape[0])), (n, b.shape[0]))
    return dc.add(dc.matmul(x, w), bias)


def window_features(features: np.ndarray, radius: int) -> np.ndarray:
    """Flattened zero-padded context window per timestep, shape (T, (2r+1)D)."""
    t = features.shape[0]
    padded = np.pad(features, ((radius, radius), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1, axis=0)
    return np.ascontiguousarray(view.transpose(0, 2, 1).reshape(t, -1))


def forward(params: dict, features_list, config: DetectorConfig) -> ProposalBatch:
    """Run the detector over one or more sequences as a single batch."""
    seq_ids = []
    blocks, anchor_blocks = [], []
    for item in features_list:
        seq_id, feats = item if isinstance(item, tuple) else ("", item)
        t = feats.shape[0]
        if t < 1:
            raise ValueError("sequence must have at least one timestep")
        seq_ids.append((seq_id, t))
        blocks.append(window_features(feats, config.radius))
        anchor_blocks.append(np.arange(t, dtype=np.float64) + 0.5)
    x = tensor(np.vstack(blocks))
    anchors = np.concatenate(anchor_blocks)

    h1 = dc.relu(_linear(x, params["trunk.w1"], params["trunk.b1"]))
    h2 = dc.relu(_linear(h1, params["trunk.w2"], params["trunk.b2"]))

    widths = dc.softplus(_linear(h2, params["head.width.w"], params["head.width.b"]))
    anchor_t = tensor(anchors)
    coarse_start = dc.sub(anchor_t, widths[:, 0])
    coarse_end = dc.add(anchor_t, widths[:, 1])

    offsets = _linear(h2, params["head.offset.w"], params["head.offset.b"])
    ev_logits = dc.clamp(
        _linear(h2, params["head.evidence.w"], params["head.evidence.b"]),
        -60.0,
        60.0,
    )
    act_logit = _linear(h2, params["head.actionness.w"], params["head.actionness.b"])[:, 0]

    return ProposalBatch(
        seq_ids=seq_ids,
        anchors=anchors,
        coarse_start=coarse_start,
        coarse_end=coarse_end,
        offsets=offsets,
        ev_logits=ev_logits,
        act_logit=act_logit,
        hidden=h2.values.copy(),
    )


def frame_assignment(annotations, t: int):
    """Class id and gt boundaries for each anchor whose center lies inside
    an annotated action; label 0 elsewhere."""
    labels = np.zeros(t, dtype=np.int64)
    gt_s = np.zeros(t)
    gt_e = np.zeros(t)
    centers = np.arange(t, dtype=np.float64) + 0.5
    for iv, c in annotations:
        inside = (centers >= iv.start) & (centers < iv.end)
        labels[inside] = c
        gt_s[inside] = iv.start
        gt_e[inside] = iv.end
    return labels, gt_s, gt_e


def match_batch(batch: ProposalBatch, sequences, config: DetectorConfig):
    """Fill in both supervision channels from the sequences' annotations."""
    fl, fs, fe = [], [], []
    labels, gs, ge, offs, tious = [], [], [], [], []
    pos = 0
    for seq, (_, t) in zip(sequences, batch.seq_ids):
        a, b, c = frame_assignment(seq.annotations, t)
        fl.append(a)
        fs.append(b)
        fe.append(c)
        res = match_proposals(
            batch.coarse_start.values[pos:pos + t],
            batch.coarse_end.values[pos:pos + t],
            seq.annotations,
            config.tiou_train,
        )
        labels.append(res.labels)
        gs.append(res.gt_starts)
        ge.append(res.gt_ends)
        offs.append(res.offsets)
        tious.append(res.tious)
        pos += t
    batch.frame_labels = np.concatenate(fl)
    batch.frame_gt_starts = np.concatenate(fs)
    batch.frame_gt_ends = np.concatenate(fe)
    batch.match = MatchResult(
        labels=np.concatenate(labels),
        gt_starts=np.concatenate(gs),
        gt_ends=np.concatenate(ge),
        offsets=np.vstack(offs),
        tious=np.concatenate(tious),
    )


def _softmax_ce(logits: Tensor, class_idx: np.ndarray) -> Tensor:
    """Mean cross-entropy; class_idx is 0-based over the logit columns."""
    n, k = logits.shape
    shift = tensor(np.max(logits.values, axis=1, keepdims=True) * np.ones((1, k)))
    stable = dc.sub(logits, shift)
    lse = dc.log(dc.sum_(dc.exp(stable), axis=1))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), class_idx] = 1.0
    picked = dc.sum_(dc.mul(stable, tensor(onehot)), axis=1)
    return dc.mean(dc.sub(lse, picked))


def total_loss(batch: ProposalBatch, mib_state: MibState, config: DetectorConfig,
               iteration: int):
    """Weighted sum of the four training terms; returns (Tensor, term dict)."""
    if batch.match is None:
        raise ValueError("batch must be matched before loss computation")
    y = batch.match.labels
    terms = {}

    if config.mode == "softmax_ce":
        cls = _softmax_ce(batch.ev_logits, y)  # label 0 is the background column
    elif config.has_background_class:
        # (K+1)-way evidential classification over every proposal
        cls, _ = mib_edl_loss(
            batch.ev_logits, y + 1, batch.hidden, mib_state, iteration
        )
    else:
        fg = np.flatnonzero(y >= 1)
        logits_fg = dc.gather(batch.ev_logits, fg)
        cls, _ = mib_edl_loss(
            logits_fg, y[fg], batch.hidden[fg], mib_state, iteration
        )
    terms["cls"] = cls.item()

    total = dc.mul(cls, config.mu)

    if config.use_actionness:
        act = pu_actionness_loss(dc.sigmoid(batch.act_logit), y)
        terms["act"] = act.item()
        total = dc.add(total, act)
    else:
        terms["act"] = 0.0

    frame_mask = (batch.frame_labels >= 1).astype(np.float64)
    loc_coarse = coarse_loss(
        batch.coarse_start, batch.coarse_end,
        batch.frame_gt_starts, batch.frame_gt_ends, frame_mask,
    )
    loc_refine = refine_loss(batch.offsets, batch.match.offsets,
                             (y >= 1).astype(np.float64))
    loc = dc.mul(dc.add(loc_coarse, loc_refine), 0.5)
    terms["loc"] = loc.item()
    total = dc.add(total, loc)

    if config.use_iouc:
        alpha = dc.add(dc.exp(batch.ev_logits), 1.0)
        u = dc.div(float(config.k_eff), dc.sum_(alpha, axis=1))
        w = np.maximum(config.gamma, batch.match.tious)
        iouc = iouc_loss_tensor(u, w)
        terms["iouc"] = iouc.item()
        total = dc.add(total, iouc)
    else:
        terms["iouc"] = 0.0

    terms["total"] = total.item()
    return total, terms


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        for name in self.params:
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            p.values = p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(config: DetectorConfig, train_seqs):
    """Full training run; returns (params, per-epoch log rows).

    The shuffle order, weight init and batch composition all derive from
    config.seed, so a run is reproducible bit for bit.
    """
    if not train_seqs:
        raise ValueError("empty training set")
    t_hint = train_seqs[0].features.shape[0]
    params = init_params(config, t_hint=t_hint)
    opt = Adam(params, lr=config.lr)
    iters_per_epoch = max(1, math.ceil(len(train_seqs) / config.batch_sequences))
    state = MibState(
        epsilon=config.epsilon if config.use_mib else 1.0,
        num_bins=config.num_bins,
        warmup_start=config.warmup_epochs * iters_per_epoch,
    )
    shuffle = _rng(config.seed, _STREAM_SHUFFLE)
    log_rows = []
    iteration = 0
    for epoch in range(config.epochs):
        order = shuffle.permutation(len(train_seqs))
        sums = {"cls": 0.0, "act": 0.0, "loc": 0.0, "iouc": 0.0, "total": 0.0}
        n_batches = 0
        for lo in range(0, len(order), config.batch_sequences):
            chunk = [train_seqs[i] for i in order[lo:lo + config.batch_sequences]]
            batch = forward(params, [(s.seq_id, s.features) for s in chunk], config)
            match_batch(batch, chunk, config)
            loss, terms = total_loss(batch, state, config, iteration)
            if not math.isfinite(terms["total"]):
                raise DivergenceError(
                    f"non-finite loss {terms['total']} at epoch {epoch}, "
                    f"iteration {iteration}"
                )
            opt.zero_grad()
            dc.backward(loss)
            opt.step()
            for k in sums:
                sums[k] += terms[k]
            n_batches += 1
            iteration += 1
        row = {"epoch": epoch}
        row.update({k: sums[k] / n_batches for k in sums})
        log_rows.append(row)
    return params, log_rows


def write_training_log(path, log_rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "cls", "act", "loc", "iouc", "total"])
        writer.writeheader()
        for row in log_rows:
            writer.writerow(row)


def save_weights(path, params: dict):
    """Single binary file: magic, then name/shape/payload records."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        for name in sorted(params):
            values = np.ascontiguousarray(params[name].values, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", values.ndim))
            fh.write(struct.pack(f"<{values.ndim}I", *values.shape))
            fh.write(values.tobytes())


def load_weights(path) -> dict:
    """Read a weights file back into a name -> Tensor dict."""
    blob = Path(path).read_bytes()
    if blob[:8] != WEIGHTS_MAGIC:
        raise FormatError(f"bad weights magic in {path}")
    pos = 8
    params = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated weights file")
        out = blob[pos:pos + n]
        pos += n
        return out

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        params[name] = tensor(values.astype(np.float64), requires_grad=True)
    return params


def frame_accuracy(params: dict, sequences, config: DetectorConfig) -> float:
    """Known-class accuracy on frames inside known-action intervals."""
    correct = 0
    total = 0
    for seq in sequences:
        batch = forward(params, [(seq.seq_id, seq.features)], config)
        z = batch.ev_logits.values
        known = z[:, 1:] if config.has_background_class else z
        pred = np.argmax(known, axis=1) + 1
        labels, _, _ = frame_assignment(seq.annotations, seq.features.shape[0])
        mask = (labels >= 1) & (labels <= config.k_known)
        correct += int(np.sum(pred[mask] == labels[mask]))
        total += int(np.sum(mask))
    return correct / total if total else 0.0
