"""Training objectives: labeled CE, entropy minimization, feature matching,
prediction-level baseline losses, and their weighted composite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective: unlabeled entropy, general-feature
    matching, and customized-feature matching."""

    lambda_u: float = 0.1
    lambda_ft: float = 10.0
    lambda_ftilde: float = 10.0

    def __post_init__(self):
        for name in ("lambda_u", "lambda_ft", "lambda_ftilde"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be a 1-D class-index array, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    n, classes = logits.shape
    labels = _check_labels(labels, classes)
    if labels.shape[0] != n:
        raise ValueError(f"got {labels.shape[0]} labels for a batch of {n}")
    logp = T.log_softmax(logits)
    onehot = Tensor(np.eye(classes)[labels])
    return T.mul(T.sum_all(T.mul(logp, onehot)), -1.0 / n)


def feature_mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the batch of the squared Euclidean distance between rows."""
    if a.shape != b.shape:
        raise ValueError(f"feature_mse: shapes {a.shape} and {b.shape} differ")
    rows = a.shape[0] if a.data.ndim > 0 else 1
    return T.mul(T.sum_all(T.square(T.sub(a, b))), 1.0 / rows)


def entropy_min(logits: Tensor) -> Tensor:
    """Mean Shannon entropy of the row-wise softmax; low entropy means
    confident predictions."""
    n = logits.shape[0]
    p = T.softmax(logits)
    logp = T.log_softmax(logits)
    return T.mul(T.sum_all(T.mul(p, logp)), -1.0 / n)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def soft_target_loss(student_logits: Tensor, teacher_logits: Tensor,
                     temperature: float = 4.0) -> Tensor:
    """Temperature-scaled KL from the teacher's softened distribution to the
    student's; the teacher side is treated as a constant."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"soft_target_loss: shapes {student_logits.shape} and "
                         f"{teacher_logits.shape} differ")
    n = student_logits.shape[0]
    # same scaling expression as the student path so identical logits give 0
    log_pt = _log_softmax_np(teacher_logits.data * (1.0 / temperature))
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(T.mul(student_logits, 1.0 / temperature))
    cross = T.mul(T.sum_all(T.mul(log_ps, Tensor(pt))), -1.0 / n)
    teacher_entropy_term = float((pt * log_pt).sum() / n)
    return T.mul(T.add(cross, teacher_entropy_term), temperature ** 2)


def logit_mse_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Mean squared difference between logit matrices (over batch and classes);
    the teacher side is treated as a constant."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit_mse_loss: shapes {student_logits.shape} and "
                         f"{teacher_logits.shape} differ")
    diff = T.sub(student_logits, teacher_logits.detach())
    return T.mean_all(T.square(diff))


def composite_loss(l_labeled: Tensor, l_unlabeled: Tensor, l_feat_general: Tensor,
                   l_feat_custom: Tensor, w: LossWeights) -> Tensor:
    """Weighted sum of the four objective terms, in fixed left-to-right order."""
    parts = (l_labeled, l_unlabeled, l_feat_general, l_feat_custom)
    for part in parts:
        if part.shape != ():
            raise ValueError(f"composite_loss parts must be scalar, got {part.shape}")
        if not np.isfinite(part.data):
            raise ValueError("composite_loss got a non-finite part")
    out = T.add(l_labeled, T.mul(l_unlabeled, w.lambda_u))
    out = T.add(out, T.mul(l_feat_general, w.lambda_ft))
    return T.add(out, T.mul(l_feat_custom, w.lambda_ftilde))
