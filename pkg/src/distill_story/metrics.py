"""Pure array metrics: task quality vs ground truth and student-teacher agreement.

All functions take numpy arrays (or things np.asarray accepts) and return
python floats. Conventions: multi-hot labels are thresholded at 0.5 on
probabilities, caption positions where the target is PAD are ignored.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .synthetic import PAD_ID


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def macro_f1(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean per-class F1 over (N, C) binary arrays; empty classes score 1."""
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    _check_same_shape(pred, target, "macro_f1")
    scores = []
    for c in range(pred.shape[1]):
        tp = int(np.sum(pred[:, c] & target[:, c]))
        fp = int(np.sum(pred[:, c] & ~target[:, c]))
        fn = int(np.sum(~pred[:, c] & target[:, c]))
        denom = 2 * tp + fp + fn
        scores.append(1.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def dice_score(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean per-sample DICE over (N, H, W) binary arrays; empty pairs score 1."""
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    _check_same_shape(pred, target, "dice_score")
    scores = []
    for p, g in zip(pred, target):
        denom = int(p.sum()) + int(g.sum())
        scores.append(1.0 if denom == 0 else 2 * int((p & g).sum()) / denom)
    return float(np.mean(scores))


def token_accuracy(pred_tokens: np.ndarray, target_tokens: np.ndarray) -> float:
    """Fraction of non-PAD target positions where the prediction matches."""
    pred = np.asarray(pred_tokens)
    target = np.asarray(target_tokens)
    _check_same_shape(pred, target, "token_accuracy")
    keep = target != PAD_ID
    if not keep.any():
        return 1.0
    return float(np.mean(pred[keep] == target[keep]))


def binary_agreement(a_probs: np.ndarray, b_probs: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of positions where two probability arrays threshold identically."""
    a = np.asarray(a_probs)
    b = np.asarray(b_probs)
    _check_same_shape(a, b, "binary_agreement")
    return float(np.mean((a >= threshold) == (b >= threshold)))


def token_agreement(a_tokens: np.ndarray, b_tokens: np.ndarray, target_tokens: np.ndarray) -> float:
    """Fraction of non-PAD target positions where two decoders pick the same token."""
    a = np.asarray(a_tokens)
    b = np.asarray(b_tokens)
    target = np.asarray(target_tokens)
    _check_same_shape(a, b, "token_agreement")
    _check_same_shape(a, target, "token_agreement")
    keep = target != PAD_ID
    if not keep.any():
        return 1.0
    return float(np.mean(a[keep] == b[keep]))
