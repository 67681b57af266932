"""Segmentation losses and evaluation metrics.

Losses operate on the readout length map (values in (0, 1) by the squash
bound) against a binary target mask and are differentiable through the tape.
Class weights default to per-sample inverse frequency, clamped to [0.1, 10].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-7
WEIGHT_CLAMP = (0.1, 10.0)


@dataclass
class LossWeights:
    positive: float = 1.0
    negative: float = 1.0
    rec_scale: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.positive) and self.positive > 0):
            raise ValueError(f"positive class weight must be > 0, got {self.positive}")
        if not (np.isfinite(self.negative) and self.negative > 0):
            raise ValueError(f"negative class weight must be > 0, got {self.negative}")
        if not (np.isfinite(self.rec_scale) and self.rec_scale >= 0):
            raise ValueError(f"reconstruction scale must be >= 0, got {self.rec_scale}")


def inverse_frequency_weights(target, rec_scale=0.0, clamp=WEIGHT_CLAMP):
    """Per-sample class weights w = N / (2 * N_class), clamped."""
    t = np.asarray(target)
    n = t.size
    n_pos = float(t.sum())
    n_neg = float(n - n_pos)
    lo, hi = clamp
    w_pos = np.clip(n / (2.0 * n_pos) if n_pos > 0 else hi, lo, hi)
    w_neg = np.clip(n / (2.0 * n_neg) if n_neg > 0 else hi, lo, hi)
    return LossWeights(float(w_pos), float(w_neg), rec_scale)


def _check_same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise T.ShapeError(f"{what}: shapes {tuple(a.shape)} vs {tuple(b.shape)} differ")


def weighted_bce(lengths, target, weights):
    """-mean[w+ * t * log(p) + w- * (1-t) * log(1-p)], p clamped to
    [1e-7, 1 - 1e-7]."""
    lengths = T.as_tensor(lengths)
    tgt = np.asarray(target, dtype=lengths.dtype)
    _check_same_shape(lengths, tgt, "weighted_bce")
    t = Tensor(tgt, dtype=lengths.dtype)
    p = T.clip(lengths, PROB_EPS, 1.0 - PROB_EPS)
    pos = T.mul(T.mul(t, T.log(p)), weights.positive)
    neg = T.mul(T.mul(T.sub(1.0, t), T.log(T.sub(1.0, p))), weights.negative)
    return T.neg(T.mean(T.add(pos, neg)))


def weighted_margin(lengths, target, weights, m_pos=0.9, m_neg=0.1, lambda_neg=0.5):
    """Hinge-squared margin loss on capsule lengths, class-weighted.

    Per pixel: w+ * t * max(0, m+ - p)^2 + lambda * w- * (1-t) * max(0, p - m-)^2,
    averaged over the map.
    """
    if m_pos <= m_neg:
        raise ValueError(f"margins require m_pos > m_neg, got {m_pos} <= {m_neg}")
    lengths = T.as_tensor(lengths)
    tgt = np.asarray(target, dtype=lengths.dtype)
    _check_same_shape(lengths, tgt, "weighted_margin")
    t = Tensor(tgt, dtype=lengths.dtype)
    pos = T.mul(T.mul(t, T.square(T.relu(T.sub(m_pos, lengths)))), weights.positive)
    neg = T.mul(
        T.mul(T.sub(1.0, t), T.square(T.relu(T.sub(lengths, m_neg)))),
        lambda_neg * weights.negative,
    )
    return T.mean(T.add(pos, neg))


def masked_mse(reconstruction, input_image, positive_mask):
    """Mean squared error over positive-mask pixels only; empty mask gives 0."""
    rec = T.as_tensor(reconstruction)
    img = np.asarray(input_image, dtype=rec.dtype)
    mask = np.asarray(positive_mask, dtype=rec.dtype)
    _check_same_shape(rec, img, "masked_mse")
    _check_same_shape(rec, mask, "masked_mse")
    m = Tensor(mask, dtype=rec.dtype)
    diff = T.sub(rec, Tensor(img, dtype=rec.dtype))
    total = T.sum_(T.mul(m, T.square(diff)))
    denom = max(1.0, float(mask.sum()))
    return T.mul(total, 1.0 / denom)


def dice(pred_mask, target_mask):
    """Dice overlap 2|A∩B| / (|A| + |B|); two empty masks count as 1."""
    a = np.asarray(pred_mask)
    b = np.asarray(target_mask)
    if a.shape != b.shape:
        raise T.ShapeError(f"dice: shapes {a.shape} vs {b.shape} differ")
    a = a > 0
    b = b > 0
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * float(np.logical_and(a, b).sum()) / denom


def median_aggregate(scores):
    """Median of a nonempty list (mean of the middle pair for even counts)."""
    scores = list(scores)
    if not scores:
        raise ValueError("median of an empty list")
    return float(np.median(np.asarray(scores, dtype=np.float64)))
