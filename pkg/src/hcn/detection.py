"""Temporal action detection on top of the recognition trunk.

Two subnetworks consume the conv5 feature map of an untrimmed sequence: the
proposal subnetwork scores fixed-scale anchor windows at every temporal
position and regresses them, and the classification subnetwork labels
crop-and-resized proposal features and refines the windows a second time.
Both stages train jointly against the shared objective
``L = L_cls / N_cls + lambda * L_reg / N_reg``.

Windows are 1-D intervals parameterized by (center x, length w); regression
targets are ``t_x = (x - x_a) / w_a`` and ``t_w = log(w / w_a)`` with the
anchor (or proposal) playing the role of the reference window.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import ops
from .data import SkeletonSequence, compute_motion
from .errors import ShapeError
from .losses import DetectionLossBatch, detection_loss, softmax
from .model import HcnModel
from .optim import TrainState, adam_step
from .tensor import GradTape, ParameterStore, Tensor

# decoded log-length offsets are clamped so an untrained head cannot overflow
MAX_LOG_LENGTH_RATIO = 6.0


@dataclass
class TemporalWindow:
    """1-D interval over frames: center, length, optional score and class."""

    center: float
    length: float
    score: float | None = None
    class_id: int | None = None

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"window length must be positive, got {self.length}")

    @property
    def start(self) -> float:
        return self.center - self.length / 2.0

    @property
    def end(self) -> float:
        return self.center + self.length / 2.0

    @classmethod
    def from_range(cls, start: float, end: float, **kwargs) -> "TemporalWindow":
        return cls(center=(start + end) / 2.0, length=end - start, **kwargs)


class RegressionTarget(NamedTuple):
    """Dimensionless window offsets: center shift in anchor lengths, log length ratio."""

    tx: float
    tw: float


def encode_window(window: TemporalWindow, anchor: TemporalWindow) -> RegressionTarget:
    """Regression target that warps ``anchor`` onto ``window``."""
    t = encode_targets(
        np.array([[window.center, window.length]]), np.array([[anchor.center, anchor.length]])
    )[0]
    return RegressionTarget(float(t[0]), float(t[1]))


def decode_window(target, anchor: TemporalWindow) -> TemporalWindow:
    """Exact inverse of :func:`encode_window`."""
    out = decode_targets(
        np.array([list(target)]), np.array([[anchor.center, anchor.length]])
    )[0]
    return TemporalWindow(center=float(out[0]), length=float(out[1]))


def encode_targets(windows: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized encoding of [n, 2] (center, length) pairs."""
    windows = np.asarray(windows, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.any(anchors[:, 1] <= 0) or np.any(windows[:, 1] <= 0):
        raise ValueError("window and anchor lengths must be positive")
    tx = (windows[:, 0] - anchors[:, 0]) / anchors[:, 1]
    tw = np.log(windows[:, 1] / anchors[:, 1])
    return np.stack([tx, tw], axis=1)


def decode_targets(targets: np.ndarray, anchors: np.ndarray, clamp: bool = False) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    tw = targets[:, 1]
    if clamp:
        tw = np.clip(tw, -MAX_LOG_LENGTH_RATIO, MAX_LOG_LENGTH_RATIO)
    x = targets[:, 0] * anchors[:, 1] + anchors[:, 0]
    w = anchors[:, 1] * np.exp(tw)
    return np.stack([x, w], axis=1)


def temporal_iou(a: TemporalWindow, b: TemporalWindow) -> float:
    return float(
        iou_matrix(np.array([[a.start, a.end]]), np.array([[b.start, b.end]]))[0, 0]
    )


def iou_matrix(spans_a: np.ndarray, spans_b: np.ndarray) -> np.ndarray:
    """Pairwise interval IoU for [n, 2] and [m, 2] (start, end) arrays."""
    spans_a = np.asarray(spans_a, dtype=np.float64).reshape(-1, 2)
    spans_b = np.asarray(spans_b, dtype=np.float64).reshape(-1, 2)
    lo = np.maximum(spans_a[:, None, 0], spans_b[None, :, 0])
    hi = np.minimum(spans_a[:, None, 1], spans_b[None, :, 1])
    inter = np.maximum(hi - lo, 0.0)
    len_a = (spans_a[:, 1] - spans_a[:, 0])[:, None]
    len_b = (spans_b[:, 1] - spans_b[:, 0])[None, :]
    union = len_a + len_b - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def centers_to_spans(windows: np.ndarray) -> np.ndarray:
    """[n, 2] (center, length) -> [n, 2] (start, end)."""
    windows = np.asarray(windows, dtype=np.float64)
    half = windows[:, 1] / 2.0
    return np.stack([windows[:, 0] - half, windows[:, 0] + half], axis=1)


@dataclass
class AnchorSet:
    """Fixed-scale windows tiling the sequence: one anchor per (position, scale)."""

    scales: tuple
    stride: int
    positions: int
    windows: np.ndarray = field(repr=False)  # [positions * len(scales), 2] (center, length)

    def __len__(self) -> int:
        return self.windows.shape[0]


def generate_anchors(sequence_length: int, feature_stride: int, scales) -> AnchorSet:
    """Anchor centers sit at (position + 0.5) * stride; one anchor per scale.

    Anchors may extend past [0, sequence_length]; they are clipped only when
    decoded windows are emitted.
    """
    if sequence_length < 1:
        raise ValueError(f"sequence_length must be >= 1, got {sequence_length}")
    positions = max(1, sequence_length // feature_stride)
    centers = (np.arange(positions) + 0.5) * feature_stride
    scales = tuple(scales)
    windows = np.zeros((positions * len(scales), 2))
    for i, center in enumerate(centers):
        for j, scale in enumerate(scales):
            windows[i * len(scales) + j] = (center, scale)
    return AnchorSet(scales=scales, stride=feature_stride, positions=positions, windows=windows)


def assign_anchor_labels(
    anchors: AnchorSet | np.ndarray,
    segments,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
):
    """Label anchors against groundtruth segments.

    Returns (labels, targets, classes): labels are +1 positive, 0 negative,
    -1 ignored; positives are anchors over ``pos_iou`` with some segment, or
    each segment's best-overlap anchor; targets hold the encoded regression
    toward each positive's best segment.
    """
    windows = anchors.windows if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    n = windows.shape[0]
    if n == 0:
        raise ShapeError("anchor set is empty")
    labels = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 2))
    classes = np.full(n, -1, dtype=np.int64)
    if not segments:
        return labels, targets, classes
    gt_spans = np.array([[s, e] for s, e, _ in segments], dtype=np.float64)
    gt_classes = np.array([c for _, _, c in segments], dtype=np.int64)
    ious = iou_matrix(centers_to_spans(windows), gt_spans)  # [n, m]
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]

    labels[:] = -1
    labels[best_iou <= neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # every segment keeps its single best anchor, ties to the lowest index
    for m in range(gt_spans.shape[0]):
        j = int(ious[:, m].argmax())
        if ious[j, m] > 0:
            labels[j] = 1
            best_gt[j] = m
    pos = labels == 1
    if pos.any():
        gt_cl = gt_spans[best_gt[pos]]
        gt_centers = (gt_cl[:, 0] + gt_cl[:, 1]) / 2.0
        gt_lengths = gt_cl[:, 1] - gt_cl[:, 0]
        targets[pos] = encode_targets(
            np.stack([gt_centers, gt_lengths], axis=1), windows[pos]
        )
        classes[pos] = gt_classes[best_gt[pos]]
    return labels, targets, classes


def crop_and_resize_temporal(
    features: Tensor, proposal: TemporalWindow, out_len: int, tape: GradTape | None = None
) -> Tensor:
    """Resample one proposal's span of a [C, T', ...] feature map to ``out_len``
    bins.  The proposal must already be in feature-map coordinates."""
    spans = np.array([[proposal.start, proposal.end]], dtype=np.float64)
    out = ops.crop_resize_temporal(features, spans, out_len, tape)
    return ops.reshape(out, out.shape[1:], tape)


def nms_temporal(spans: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy suppression; returns kept indices in descending score order.

    Ties break by (score desc, start asc, index asc); a window is suppressed
    only when its IoU with a kept window strictly exceeds the threshold.
    """
    spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    if spans.shape[0] != scores.shape[0]:
        raise ShapeError(f"{spans.shape[0]} spans vs {scores.shape[0]} scores")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], spans[i, 0], i))
    kept: list[int] = []
    for i in order:
        ok = True
        for j in kept:
            if iou_matrix(spans[i : i + 1], spans[j : j + 1])[0, 0] > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# Detection head
# ---------------------------------------------------------------------------

@dataclass
class DetectionConfig:
    """Hyperparameters of the detection head and its training sampler."""

    scales: tuple = (50, 100, 200, 400)
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    anchor_batch: int = 64
    anchor_pos_fraction: float = 0.5
    pre_nms_top: int = 100
    proposal_nms_iou: float = 0.7
    post_nms_top: int = 20
    roi_pos_iou: float = 0.5
    crop_len: int = 8
    final_nms_iou: float = 0.5
    score_threshold: float = 0.05
    hidden_channels: int = 64
    reg_lambda: float = 1.0

    def validate(self) -> None:
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"anchor scales must be positive, got {self.scales}")
        if not (0 <= self.neg_iou < self.pos_iou <= 1):
            raise ValueError("need 0 <= neg_iou < pos_iou <= 1")
        if self.crop_len < 1 or self.hidden_channels < 1:
            raise ValueError("crop_len and hidden_channels must be >= 1")


class DetectionHead:
    """Proposal and classification subnetworks appended after conv5."""

    def __init__(self, model_config, det_config: DetectionConfig, num_classes: int, rng):
        det_config.validate()
        self.det_config = det_config
        self.num_classes = num_classes
        self.feature_channels = model_config.channels["conv5"]
        self.feature_width = model_config.conv5_width()
        self.stride = model_config.conv5_temporal_stride()
        self.params = ParameterStore()
        s = len(det_config.scales)
        h = det_config.hidden_channels
        cin = self.feature_channels * self.feature_width
        self._register_conv(rng, "prop.trunk", ops.ConvSpec(3, 1, cin, h))
        self._register_conv(rng, "prop.cls", ops.ConvSpec(1, 1, h, 2 * s))
        self._register_conv(rng, "prop.reg", ops.ConvSpec(1, 1, h, 2 * s))
        crop_flat = self.feature_channels * det_config.crop_len * self.feature_width
        self._register_dense(rng, "roi.trunk", crop_flat, h)
        self._register_dense(rng, "roi.cls", h, num_classes + 1)
        self._register_dense(rng, "roi.reg", h, 2)

    def _register_conv(self, rng, name, spec: ops.ConvSpec):
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        limit = np.sqrt(6.0 / fan_in)
        self.params.register(f"{name}.weight", rng.uniform(-limit, limit, size=spec.weight_shape))
        self.params.register(f"{name}.bias", np.zeros(spec.bias_shape))

    def _register_dense(self, rng, name, fan_in, fan_out):
        limit = np.sqrt(6.0 / fan_in)
        self.params.register(f"{name}.weight", rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        self.params.register(f"{name}.bias", np.zeros(fan_out))

    def _conv(self, name, x, tape):
        return ops.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], tape)

    def _dense(self, name, x, tape):
        return ops.dense(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], tape)

    def proposal_forward(self, conv5: Tensor, tape: GradTape | None = None):
        """Per-anchor scores and regressions from a [1, C, T', W'] feature map.

        Returns (cls_logits [A, 2], reg [A, 2]) with anchors ordered
        position-major then scale, matching :func:`generate_anchors`.
        """
        if conv5.ndim != 4 or conv5.shape[0] != 1:
            raise ShapeError(f"expected [1, C, T', W'] conv5 features, got {conv5.shape}")
        _, c, t, w = conv5.shape
        if c != self.feature_channels or w != self.feature_width:
            raise ShapeError(
                f"conv5 features {conv5.shape} do not match head (C={self.feature_channels}, W={self.feature_width})"
            )
        s = len(self.det_config.scales)
        x = ops.permute(conv5, (0, 1, 3, 2), tape)  # [1, C, W', T']
        x = ops.reshape(x, (1, c * w, t, 1), tape)
        x = ops.relu(self._conv("prop.trunk", x, tape), tape)
        cls = self._conv("prop.cls", x, tape)  # [1, 2S, T', 1]
        reg = self._conv("prop.reg", x, tape)

        def per_anchor(y):
            y = ops.reshape(y, (s, 2, t), tape)
            y = ops.permute(y, (2, 0, 1), tape)  # [T', S, 2]
            return ops.reshape(y, (t * s, 2), tape)

        return per_anchor(cls), per_anchor(reg)

    def classify_forward(self, crops: Tensor, tape: GradTape | None = None):
        """Class logits (background last) and window refinement per proposal."""
        if crops.ndim != 4:
            raise ShapeError(f"expected [n, C, L, W'] crops, got {crops.shape}")
        x = ops.flatten(crops, tape)
        x = ops.relu(self._dense("roi.trunk", x, tape), tape)
        return self._dense("roi.cls", x, tape), self._dense("roi.reg", x, tape)


# ---------------------------------------------------------------------------
# Training and inference pipeline
# ---------------------------------------------------------------------------

def merged_parameters(model: HcnModel, head: DetectionHead) -> dict:
    params = {name: t for name, t in model.params.items()}
    params.update({f"det.{name}": t for name, t in head.params.items()})
    return params


def _sequence_arrays(seq: SkeletonSequence):
    motion = compute_motion(seq)
    raw = np.stack(seq.persons)[None]  # [1, P, T, N, D]
    mot = np.stack(motion.persons)[None]
    return raw, mot


def _conv5_single(model, seq, tape=None):
    raw, mot = _sequence_arrays(seq)
    conv5 = model.backbone_conv5(raw, mot, tape=tape)
    _, c, t5, w5 = conv5.shape
    return ops.reshape(conv5, (c, t5, w5), tape), t5


def _spans_to_feature_coords(spans: np.ndarray, stride: int, t5: int) -> np.ndarray:
    feat = np.asarray(spans, dtype=np.float64) / stride
    feat[:, 0] = np.clip(feat[:, 0], 0.0, t5 - 1e-3)
    feat[:, 1] = np.clip(feat[:, 1], 0.0, float(t5))
    feat[:, 1] = np.maximum(feat[:, 1], feat[:, 0] + 1e-3)
    return feat


def _propose(head: DetectionHead, cls_logits: np.ndarray, reg: np.ndarray, anchors: AnchorSet, t: int):
    """Decode, clip, and NMS-filter raw proposal outputs into spans."""
    cfg = head.det_config
    scores = softmax(cls_logits)[:, 1]
    decoded = decode_targets(reg, anchors.windows, clamp=True)
    spans = centers_to_spans(decoded)
    spans = np.clip(spans, 0.0, float(t))
    valid = spans[:, 1] - spans[:, 0] >= 1.0
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return np.zeros((0, 2)), np.zeros(0)
    order = sorted(idx, key=lambda i: (-scores[i], spans[i, 0], i))[: cfg.pre_nms_top]
    spans_o = spans[order]
    scores_o = scores[order]
    kept = nms_temporal(spans_o, scores_o, cfg.proposal_nms_iou)[: cfg.post_nms_top]
    return spans_o[kept], scores_o[kept]


def detection_train_step(
    model: HcnModel,
    head: DetectionHead,
    seq: SkeletonSequence,
    state: TrainState,
    rng: np.random.Generator,
) -> float:
    """One jointly optimized step on a single untrimmed sequence."""
    cfg = head.det_config
    segments = seq.segments or []
    t = seq.frame_count
    tape = GradTape()
    conv5, t5 = _conv5_single(model, seq, tape)
    anchors = generate_anchors(t, head.stride, cfg.scales)
    # anchor positions beyond the pooled map cannot be scored; keep the grid
    # and the feature map aligned
    anchors = AnchorSet(
        scales=anchors.scales,
        stride=anchors.stride,
        positions=min(anchors.positions, t5),
        windows=anchors.windows[: min(anchors.positions, t5) * len(cfg.scales)],
    )
    labels, targets, _ = assign_anchor_labels(anchors, segments, cfg.pos_iou, cfg.neg_iou)

    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    n_pos = min(len(pos_idx), int(cfg.anchor_batch * cfg.anchor_pos_fraction))
    if len(pos_idx) > n_pos:
        pos_idx = rng.choice(pos_idx, size=n_pos, replace=False)
    n_neg = min(len(neg_idx), cfg.anchor_batch - len(pos_idx))
    if len(neg_idx) > n_neg:
        neg_idx = rng.choice(neg_idx, size=n_neg, replace=False)
    sampled = np.concatenate([pos_idx, neg_idx]).astype(np.int64)

    prop_cls, prop_reg = head.proposal_forward(ops.reshape(conv5, (1,) + conv5.shape, tape), tape)
    prop_batch = DetectionLossBatch(
        cls_logits=prop_cls.data[sampled],
        cls_labels=(labels[sampled] == 1).astype(np.int64),
        reg_pred=prop_reg.data[pos_idx],
        reg_target=targets[pos_idx],
        lam=cfg.reg_lambda,
    )
    prop_loss, grad_cls_s, grad_reg_s = detection_loss(prop_batch)
    grad_cls = np.zeros_like(prop_cls.data)
    grad_cls[sampled] = grad_cls_s
    grad_reg = np.zeros_like(prop_reg.data)
    if len(pos_idx):
        grad_reg[pos_idx] = grad_reg_s

    # stage 2: proposals from the current head plus the groundtruth windows
    spans, _ = _propose(head, prop_cls.data, prop_reg.data, anchors, t)
    if segments:
        gt_spans = np.array([[s, e] for s, e, _ in segments], dtype=np.float64)
        spans = np.concatenate([spans, gt_spans], axis=0) if spans.size else gt_spans
    roi_labels = np.full(spans.shape[0], head.num_classes, dtype=np.int64)  # background
    roi_targets = np.zeros((spans.shape[0], 2))
    if segments and spans.shape[0]:
        gt_spans = np.array([[s, e] for s, e, _ in segments], dtype=np.float64)
        ious = iou_matrix(spans, gt_spans)
        best = ious.argmax(axis=1)
        best_iou = ious[np.arange(spans.shape[0]), best]
        fg = best_iou >= cfg.roi_pos_iou
        roi_labels[fg] = np.array([segments[m][2] for m in best[fg]], dtype=np.int64)
        anchors_cl = np.stack(
            [(spans[:, 0] + spans[:, 1]) / 2.0, spans[:, 1] - spans[:, 0]], axis=1
        )
        gt_cl = np.stack(
            [
                (gt_spans[best, 0] + gt_spans[best, 1]) / 2.0,
                gt_spans[best, 1] - gt_spans[best, 0],
            ],
            axis=1,
        )
        if fg.any():
            roi_targets[fg] = encode_targets(gt_cl[fg], anchors_cl[fg])

    feat_spans = _spans_to_feature_coords(spans, head.stride, t5)
    crops = ops.crop_resize_temporal(conv5, feat_spans, cfg.crop_len, tape)
    roi_cls, roi_reg = head.classify_forward(crops, tape)
    fg_idx = np.flatnonzero(roi_labels != head.num_classes)
    roi_batch = DetectionLossBatch(
        cls_logits=roi_cls.data,
        cls_labels=roi_labels,
        reg_pred=roi_reg.data[fg_idx],
        reg_target=roi_targets[fg_idx],
        lam=cfg.reg_lambda,
    )
    roi_loss, grad_roi_cls, grad_roi_reg_s = detection_loss(roi_batch)
    grad_roi_reg = np.zeros_like(roi_reg.data)
    if len(fg_idx):
        grad_roi_reg[fg_idx] = grad_roi_reg_s

    params = merged_parameters(model, head)
    for tensor in params.values():
        tensor.zero_grad()
    tape.backward(
        [
            (prop_cls, grad_cls),
            (prop_reg, grad_reg),
            (roi_cls, grad_roi_cls),
            (roi_reg, grad_roi_reg),
        ]
    )
    adam_step(state, params)
    return prop_loss + roi_loss


def detect(model: HcnModel, head: DetectionHead, seq: SkeletonSequence) -> list[TemporalWindow]:
    """Full inference pipeline; windows are clipped to the sequence extent."""
    cfg = head.det_config
    t = seq.frame_count
    if t < min(cfg.scales):
        return []
    conv5, t5 = _conv5_single(model, seq)
    anchors = generate_anchors(t, head.stride, cfg.scales)
    n_pos = min(anchors.positions, t5)
    anchors = AnchorSet(anchors.scales, anchors.stride, n_pos, anchors.windows[: n_pos * len(cfg.scales)])
    prop_cls, prop_reg = head.proposal_forward(ops.reshape(conv5, (1,) + conv5.shape))
    spans, scores = _propose(head, prop_cls.data, prop_reg.data, anchors, t)
    if spans.shape[0] == 0:
        return []
    feat_spans = _spans_to_feature_coords(spans, head.stride, t5)
    crops = ops.crop_resize_temporal(conv5, feat_spans, cfg.crop_len)
    roi_cls, roi_reg = head.classify_forward(crops)
    probs = softmax(roi_cls.data)  # [n, K+1], background last
    proposals_cl = np.stack(
        [(spans[:, 0] + spans[:, 1]) / 2.0, spans[:, 1] - spans[:, 0]], axis=1
    )
    refined = decode_targets(roi_reg.data, proposals_cl, clamp=True)
    refined_spans = np.clip(centers_to_spans(refined), 0.0, float(t))

    results: list[TemporalWindow] = []
    for c in range(head.num_classes):
        cls_scores = probs[:, c]
        valid = (cls_scores >= cfg.score_threshold) & (
            refined_spans[:, 1] - refined_spans[:, 0] >= 1.0
        )
        idx = np.flatnonzero(valid)
        if idx.size == 0:
            continue
        kept = nms_temporal(refined_spans[idx], cls_scores[idx], cfg.final_nms_iou)
        for k in kept:
            i = idx[k]
            results.append(
                TemporalWindow.from_range(
                    refined_spans[i, 0],
                    refined_spans[i, 1],
                    score=float(cls_scores[i]),
                    class_id=c,
                )
            )
    results.sort(key=lambda w: (-(w.score or 0.0), w.start, w.class_id))
    return results


@dataclass
class DetectionTrainResult:
    history: list = field(default_factory=list)
    best_map: float = 0.0
    best_step: int = 0
    best_params: dict = field(default_factory=dict)
    final_params: dict = field(default_factory=dict)


def train_detector(
    model: HcnModel,
    head: DetectionHead,
    sequences: list[SkeletonSequence],
    state: TrainState,
    total_steps: int,
    eval_every: int = 0,
) -> DetectionTrainResult:
    """Cycle through the sequences for ``total_steps`` joint updates.

    Every ``eval_every`` steps (and at the end) the metric history receives a
    train row with the last step loss and a val row with mAP at IoU 0.5 over
    the training sequences; the best-mAP parameter snapshot is kept.
    """
    if not sequences:
        raise ValueError("no sequences to train on")
    for seq in sequences:
        if not seq.segments:
            raise ValueError(f"sequence {seq.sample_id!r} has no groundtruth segments")
    seed_seq = np.random.SeedSequence(state.seed)
    order_rng, sample_rng = (np.random.default_rng(s) for s in seed_seq.spawn(2))
    params = merged_parameters(model, head)
    result = DetectionTrainResult()
    result.best_params = {name: t.data.copy() for name, t in params.items()}

    def run_eval(step, loss):
        detections = {s.sample_id: detect(model, head, s) for s in sequences}
        truth = {s.sample_id: s.segments for s in sequences}
        _, mean_ap = evaluate_map(detections, truth)
        lr = state.learning_rate(step)
        result.history.append(
            {"step": step, "split": "train", "loss": loss, "accuracy": None,
             "map": None, "learning_rate": lr}
        )
        result.history.append(
            {"step": step, "split": "val", "loss": None, "accuracy": None,
             "map": mean_ap, "learning_rate": lr}
        )
        if mean_ap > result.best_map or not result.best_params:
            result.best_map = mean_ap
            result.best_step = step
            result.best_params = {name: t.data.copy() for name, t in params.items()}

    step = 0
    loss = float("nan")
    while step < total_steps:
        for i in order_rng.permutation(len(sequences)):
            if step >= total_steps:
                break
            loss = detection_train_step(model, head, sequences[i], state, sample_rng)
            step += 1
            if eval_every and step % eval_every == 0 and step < total_steps:
                run_eval(step, loss)
    run_eval(step, loss)
    result.final_params = {name: t.data.copy() for name, t in params.items()}
    return result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_map(
    detections: dict,
    groundtruth: dict,
    iou_threshold: float = 0.5,
) -> tuple[dict, float]:
    """Average precision per class and their unweighted mean.

    ``detections`` maps sequence id -> list of scored, classified
    TemporalWindows; ``groundtruth`` maps sequence id -> (start, end, class)
    triples.  Detections match greedily in score order, one per groundtruth,
    at IoU >= threshold; AP integrates the exact precision-recall step curve.
    """
    classes = sorted({c for segs in groundtruth.values() for _, _, c in segs})
    if not classes:
        raise ValueError("groundtruth contains no segments; mAP is undefined")
    ap: dict = {}
    for c in classes:
        records = []  # (score, seq_id, start, end)
        for seq_id, windows in detections.items():
            for w in windows:
                if w.class_id == c:
                    records.append((float(w.score or 0.0), str(seq_id), w.start, w.end))
        records.sort(key=lambda r: (-r[0], r[1], r[2]))
        gt_spans = {
            seq_id: np.array([[s, e] for s, e, cls in segs if cls == c], dtype=np.float64)
            for seq_id, segs in groundtruth.items()
        }
        n_gt = int(sum(len(v) for v in gt_spans.values()))
        if n_gt == 0:
            continue
        matched = {seq_id: np.zeros(len(v), dtype=bool) for seq_id, v in gt_spans.items()}
        tp = np.zeros(len(records))
        fp = np.zeros(len(records))
        for i, (score, seq_id, start, end) in enumerate(records):
            spans = gt_spans.get(seq_id)
            if spans is None or spans.shape[0] == 0:
                fp[i] = 1
                continue
            ious = iou_matrix(np.array([[start, end]]), spans)[0]
            j = int(ious.argmax())
            if ious[j] >= iou_threshold and not matched[seq_id][j]:
                matched[seq_id][j] = True
                tp[i] = 1
            else:
                fp[i] = 1
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(fp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        ap[c] = _all_point_ap(recall, precision)
    mean_ap = float(np.mean([ap.get(c, 0.0) for c in classes]))
    return ap, mean_ap


def _all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the exact PR step curve with right-to-left precision envelope."""
    if recall.size == 0:
        return 0.0
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[0.0], precision])
    for i in range(p.size - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    return float(np.sum((r[1:] - r[:-1]) * p[1:]))
