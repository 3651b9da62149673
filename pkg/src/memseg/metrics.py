"""Segmentation metrics (DSC, HD95) and the Dice + cross-entropy loss."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor as T
from .tensor import Tensor
from .errors import ContractError, DimensionError

DICE_WEIGHT = 0.7
CE_WEIGHT = 0.3


# ---------------------------------------------------------------------------
# mask metrics


def _as_mask(mask, name):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionError("%s must be a 2-D label map, got %r"
                             % (name, arr.shape))
    return arr


def _check_pair(pred, true):
    p = _as_mask(pred, "pred mask")
    t = _as_mask(true, "true mask")
    if p.shape != t.shape:
        raise DimensionError("mask extents differ: %r vs %r"
                             % (p.shape, t.shape))
    return p, t


def overlap_counts(pred, true, class_id):
    """(TP, FP, FN) pixel counts for one class."""
    p, t = _check_pair(pred, true)
    a = p == class_id
    b = t == class_id
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(~a & b))
    return tp, fp, fn


def dsc(pred, true, class_id):
    """2TP / (2TP + FP + FN); a class absent from both masks scores 1.0."""
    tp, fp, fn = overlap_counts(pred, true, class_id)
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def boundary_points(mask):
    """Coordinates of foreground pixels with at least one background
    4-neighbor; pixels beyond the image count as background."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise DimensionError("boundary wants a 2-D mask, got %r" % (m.shape,))
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def _nearest_rank_95(values):
    ordered = np.sort(values)
    return float(ordered[int(np.ceil(0.95 * ordered.size)) - 1])


def hd95(pred, true, class_id):
    """95th-percentile symmetric boundary distance in pixels, nearest-rank;
    None when either mask has no boundary for the class."""
    p, t = _check_pair(pred, true)
    a = boundary_points(p == class_id)
    b = boundary_points(t == class_id)
    if a.size == 0 or b.size == 0:
        return None
    d = cdist(a.astype(np.float64), b.astype(np.float64))
    return max(_nearest_rank_95(d.min(axis=1)), _nearest_rank_95(d.min(axis=0)))


@dataclass
class SegMetrics:
    """Per-class overlap counts and scores for one (pred, true) pair."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    dsc: list
    hd95: list   # float, or None for classes without both boundaries

    @property
    def mean_dsc(self):
        return float(np.mean(self.dsc))

    @property
    def mean_hd95(self):
        defined = [v for v in self.hd95 if v is not None]
        if not defined:
            return None
        return float(np.mean(defined))


def evaluate_pair(pred, true, classes):
    p, t = _check_pair(pred, true)
    tp = np.zeros(classes, dtype=np.int64)
    fp = np.zeros(classes, dtype=np.int64)
    fn = np.zeros(classes, dtype=np.int64)
    scores, distances = [], []
    for c in range(classes):
        tp[c], fp[c], fn[c] = overlap_counts(p, t, c)
        scores.append(dsc(p, t, c))
        distances.append(hd95(p, t, c))
    return SegMetrics(tp=tp, fp=fp, fn=fn, dsc=scores, hd95=distances)


# ---------------------------------------------------------------------------
# training loss


def _check_logits_labels(logits, labels):
    if not isinstance(logits, Tensor) or logits.ndim != 3:
        raise DimensionError("logits must be a (h,w,k) tensor")
    lab = np.asarray(labels)
    if lab.ndim != 2 or lab.shape != logits.shape[:2]:
        raise DimensionError("labels %r do not match logits %r"
                             % (lab.shape, logits.shape))
    if not np.issubdtype(lab.dtype, np.integer):
        raise ContractError("labels must be integers")
    k = logits.shape[2]
    if lab.min() < 0 or lab.max() >= k:
        raise ContractError("labels must lie in [0, %d)" % k)
    return lab, k


def _onehot(labels, k):
    flat = labels.reshape(-1)
    out = np.zeros((flat.size, k))
    out[np.arange(flat.size), flat] = 1.0
    return out


def dice_loss(logits, labels, eps=1e-6):
    """1 - mean-over-classes soft Dice of the softmaxed logits."""
    lab, k = _check_logits_labels(logits, labels)
    n = lab.size
    probs = T.softmax_lastdim(T.reshape(logits, (n, k)))
    onehot = Tensor(_onehot(lab, k))
    inter = T.mul(probs, onehot).sum(axis=0)
    total = T.add(probs.sum(axis=0), Tensor(onehot.data.sum(axis=0)))
    per_class = T.div(T.add(T.mul(inter, 2.0), eps), T.add(total, eps))
    return T.add(T.neg(per_class.mean()), 1.0)


def ce_loss(logits, labels):
    """Mean pixelwise negative log-probability of the true class."""
    lab, k = _check_logits_labels(logits, labels)
    n = lab.size
    logp = T.log_softmax_lastdim(T.reshape(logits, (n, k)))
    onehot = Tensor(_onehot(lab, k))
    return T.neg(T.mul(T.mul(logp, onehot).sum(), 1.0 / n))


def combined_loss(logits, labels, eps=1e-6):
    return T.add(T.mul(dice_loss(logits, labels, eps=eps), DICE_WEIGHT),
                 T.mul(ce_loss(logits, labels), CE_WEIGHT))
