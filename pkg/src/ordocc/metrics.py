"""Scene-completion scores (IoU, mIoU, SC IoU) and the offline loss terms.

Voxels whose ground truth is ``unknown`` are outside the evaluation mask and
never counted. Label id 0 (void / empty) is the "not occupied" class: it takes
part in the confusion matrix but not in the mean IoU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .grid import VoxelGrid

SCAL_EPS = 1e-8
PROB_TOL = 1e-6


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns prediction."""

    counts: np.ndarray
    names: dict[int, str]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_labels(cls, pred: np.ndarray, gt: np.ndarray, num_classes: int,
                    names: dict[int, str] | None = None) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if ((pred < 0) | (pred >= num_classes) | (gt < 0) | (gt >= num_classes)).any():
            raise MetricsError("labels outside the class range")
        counts = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2)
        return cls(counts.reshape(num_classes, num_classes),
                   names or {i: str(i) for i in range(num_classes)})

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise MetricsError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.counts + other.counts, self.names)


def _check_pair(pred: VoxelGrid, gt: VoxelGrid) -> None:
    if pred.config != gt.config:
        raise MetricsError("prediction and ground truth grids have different geometry")
    if pred.space != gt.space:
        raise MetricsError(
            f"label-space mismatch: prediction is {pred.space.name.lower()}, "
            f"ground truth is {gt.space.name.lower()}")


def _masked_pairs(pred: VoxelGrid, gt: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    unknown = gt.space.unknown
    keep = gt.labels != unknown
    p = pred.labels[keep].astype(np.int64)
    # an unknown prediction inside the mask counts as "not occupied"
    p[p == unknown] = 0
    return p, gt.labels[keep].astype(np.int64)


def confusion(pred: VoxelGrid, gt: VoxelGrid) -> ConfusionMatrix:
    _check_pair(pred, gt)
    p, g = _masked_pairs(pred, gt)
    names = {i: n for i, n in gt.space.names().items() if i != gt.space.unknown}
    return ConfusionMatrix.from_labels(p, g, gt.space.num_classes, names)


def iou(cm: ConfusionMatrix, c: int) -> float | None:
    """TP / (TP + FP + FN) for class ``c``; None when the class never appears."""
    tp = int(cm.counts[c, c])
    fp = int(cm.counts[:, c].sum()) - tp
    fn = int(cm.counts[c, :].sum()) - tp
    den = tp + fp + fn
    return None if den == 0 else tp / den


def per_class_iou(cm: ConfusionMatrix) -> dict[int, float | None]:
    return {c: iou(cm, c) for c in range(cm.num_classes)}


def miou(cm: ConfusionMatrix) -> float | None:
    """Mean IoU over the occupied classes (id >= 1) whose IoU is defined."""
    vals = [v for c, v in per_class_iou(cm).items() if c != 0 and v is not None]
    return None if not vals else float(np.mean(vals))


def sc_iou(pred: VoxelGrid, gt: VoxelGrid) -> float | None:
    """IoU of occupied voxels, classes ignored."""
    _check_pair(pred, gt)
    p, g = _masked_pairs(pred, gt)
    po, go = p != 0, g != 0
    tp = int(np.sum(po & go))
    den = tp + int(np.sum(po & ~go)) + int(np.sum(~po & go))
    return None if den == 0 else tp / den


@dataclass
class ProbGrid:
    """Class scores for the voxels listed in ``voxels`` (flat grid indices).

    ``scores`` are probabilities unless ``logits`` is set.
    """

    voxels: np.ndarray
    scores: np.ndarray
    logits: bool = False

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != self.voxels.size:
            raise MetricsError("scores must be (num_voxels, num_classes) aligned with voxels")
        if not self.logits:
            if (self.scores < 0).any() or not np.allclose(self.scores.sum(axis=1), 1.0, rtol=0, atol=PROB_TOL):
                raise MetricsError("probability vectors must be non-negative and sum to 1")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def log_probs(self) -> np.ndarray:
        y = self.scores if self.logits else np.log(np.maximum(self.scores, np.finfo(float).tiny))
        return y - logsumexp(y, axis=1, keepdims=True)

    def probs(self) -> np.ndarray:
        return softmax(self.scores, axis=1) if self.logits else self.scores

    @classmethod
    def over_mask(cls, gt: VoxelGrid, scores: np.ndarray, logits: bool = False) -> "ProbGrid":
        """Attach scores given for every voxel of ``gt`` (or only its valid ones)."""
        omega = np.flatnonzero(gt.labels != gt.space.unknown)
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape[0] == gt.config.num_voxels:
            scores = scores[omega]
        return cls(omega, scores, logits)


def _targets(p: ProbGrid, gt: VoxelGrid) -> np.ndarray:
    omega = np.flatnonzero(gt.labels != gt.space.unknown)
    if p.voxels.size != omega.size or not np.array_equal(np.sort(p.voxels), omega):
        raise MetricsError("scores do not cover exactly the valid voxels of the ground truth")
    tar = gt.labels[p.voxels].astype(np.int64)
    if tar.size and tar.max() >= p.num_classes:
        raise MetricsError("ground truth holds classes beyond the score columns")
    return tar


def weighted_ce_scores(log_probs: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> float:
    """-(1/|valid|) * sum_i w[t_i] * log p_i[t_i]."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        return 0.0
    w = np.asarray(weights, dtype=np.float64)
    picked = log_probs[np.arange(targets.size), targets]
    return float(-np.sum(w[targets] * picked) / targets.size)


def weighted_ce(p: ProbGrid, gt: VoxelGrid, weights=None, *, printed_sign: bool = False) -> float:
    """Class-weighted cross-entropy averaged over the valid voxels.

    ``printed_sign=True`` returns the value without the leading minus, which is
    negative for good predictions.
    """
    tar = _targets(p, gt)
    w = np.ones(p.num_classes) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (p.num_classes,) or not (w > 0).all():
        raise MetricsError("class weights must be positive, one per score column")
    val = weighted_ce_scores(p.log_probs(), tar, w)
    return -val if printed_sign else val


def scale_loss_scores(probs: np.ndarray, targets: np.ndarray, eps: float = SCAL_EPS) -> float:
    """Negated mean over classes of log precision + log recall + log specificity.

    Ratios are floored at ``eps`` inside the logs; a ratio whose denominator is
    zero (class never predicted / never present / always present) adds nothing.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    M = probs.shape[1]
    total = 0.0
    for c in range(M):
        pc = probs[:, c]
        is_c = targets == c
        hit = float(np.sum(pc[is_c]))
        pred_mass = float(np.sum(pc))
        n_pos = int(is_c.sum())
        n_neg = int((~is_c).sum())
        if pred_mass > 0:
            total += np.log(max(hit / pred_mass, eps))
        if n_pos > 0:
            total += np.log(max(hit / n_pos, eps))
        if n_neg > 0:
            total += np.log(max(float(np.sum(1.0 - pc[~is_c])) / n_neg, eps))
    return float(-total / M)


def scale_loss(p: ProbGrid, gt: VoxelGrid) -> tuple[float, float]:
    """Semantic and geometric scale losses.

    The geometric variant scores the binary empty/occupied problem, with the
    occupied probability taken as one minus the class-0 probability.
    """
    tar = _targets(p, gt)
    probs = p.probs()
    sem = scale_loss_scores(probs, tar)
    p_empty = probs[:, 0]
    geo = scale_loss_scores(np.column_stack([p_empty, 1.0 - p_empty]), (tar != 0).astype(np.int64))
    return sem, geo


@dataclass(frozen=True)
class LossReport:
    ce: float
    scal_sem: float
    scal_geo: float
    total: float

    def to_json(self) -> dict:
        return {"ce": self.ce, "scal_sem": self.scal_sem, "scal_geo": self.scal_geo, "total": self.total}


def total_loss(ce: float, scal_sem: float, scal_geo: float) -> LossReport:
    return LossReport(ce, scal_sem, scal_geo, ce + scal_sem + scal_geo)


def loss_report(p: ProbGrid, gt: VoxelGrid, weights=None) -> LossReport:
    ce = weighted_ce(p, gt, weights)
    sem, geo = scale_loss(p, gt)
    return total_loss(ce, sem, geo)


def evaluate(pred: VoxelGrid, gt: VoxelGrid, p: ProbGrid | None = None, weights=None) -> dict:
    """JSON-ready metric report."""
    cm = confusion(pred, gt)
    ious = per_class_iou(cm)
    report = {
        "label_space": gt.space.name.lower(),
        "per_class_iou": {cm.names.get(c, str(c)): v for c, v in ious.items()},
        "miou": miou(cm),
        "sc_iou": sc_iou(pred, gt),
        "voxels": {
            "evaluated": cm.total,
            "excluded_unknown": int(np.sum(gt.labels == gt.space.unknown)),
            "gt_per_class": {cm.names.get(c, str(c)): int(n) for c, n in enumerate(cm.counts.sum(axis=1))},
            "pred_per_class": {cm.names.get(c, str(c)): int(n) for c, n in enumerate(cm.counts.sum(axis=0))},
        },
        "confusion": cm.counts.tolist(),
    }
    if p is not None:
        report["loss"] = loss_report(p, gt, weights).to_json()
    return report
