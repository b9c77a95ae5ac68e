"""Training objective: weighted cross-entropy on swapped targets plus cosine distillation.

Every loss returns its value together with the gradient with respect to
its logit/feature inputs, so the trainer can backpropagate by hand.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyMask, ViewMismatch, ZeroFrequency


def class_weights(base_freqs, n_novel: int, rule: str = "inverse-log") -> np.ndarray:
    """Loss weights ordered as the concatenated logits: base classes, then novel.

    ``inverse-log`` gives base class ``c`` the weight ``1 / log(1.02 + f_c)``
    rescaled to mean 1; novel classes all get 1.
    """
    f = np.asarray(base_freqs, dtype=np.float64)
    if f.size and (f <= 0).any():
        raise ZeroFrequency("every base class needs a positive frequency")
    if f.size and abs(f.sum() - 1.0) > 1e-6:
        raise ValueError(f"base frequencies must sum to 1, got {f.sum()}")
    if rule == "inverse-log":
        w = 1.0 / np.log(1.02 + f)
        if w.size:
            w = w / w.mean()
    elif rule == "uniform":
        w = np.ones_like(f)
    else:
        raise ValueError(f"unknown base weight rule {rule!r}")
    return np.concatenate([w, np.ones(n_novel)])


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def weighted_ce(logits, targets, weights, mask=None, return_grad: bool = False):
    """Mean over masked points of ``-sum_c w_c t_c log softmax(logits)_c``.

    ``targets`` holds either integer ids ``(n,)`` or soft rows ``(n, K)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    targets = np.asarray(targets)
    if targets.ndim == 1:
        soft = np.zeros((n, k))
        ids = targets.astype(np.int64)
        valid = (ids >= 0) & (ids < k)
        soft[np.flatnonzero(valid), ids[valid]] = 1.0
    else:
        soft = targets.astype(np.float64)
        if soft.shape != (n, k):
            raise DimensionMismatch(f"soft targets {soft.shape} vs logits {logits.shape}")
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("no points contribute to the loss")
    w = np.asarray(weights, dtype=np.float64)
    logp = _log_softmax(logits[mask])
    wt = soft[mask] * w
    value = float(-(wt * logp).sum() / count)
    if not return_grad:
        return value
    grad = np.zeros_like(logits)
    grad[mask] = (wt.sum(axis=1, keepdims=True) * np.exp(logp) - wt) / count
    return value, grad


@dataclass
class HeadTargets:
    """Soft targets over one head's concatenated classes plus a contribution mask."""

    soft: np.ndarray
    mask: np.ndarray

    @classmethod
    def build(cls, base_ids, n_base: int, pseudo=None, selected=None, n_novel: int = 0):
        """Ground truth for base points, pseudo-label rows for selected novel points.

        ``base_ids`` holds the base-logit index per point or -1 for novel
        points; ``pseudo`` is ``(len(selected), n_novel)``.
        """
        base_ids = np.asarray(base_ids)
        n = base_ids.shape[0]
        soft = np.zeros((n, n_base + n_novel))
        is_base = base_ids >= 0
        soft[np.flatnonzero(is_base), base_ids[is_base]] = 1.0
        mask = is_base.copy()
        if selected is not None and len(selected):
            soft[selected, n_base:] = pseudo
            mask[selected] = True
        return cls(soft, mask)


@dataclass
class SwappedLoss:
    value: float
    grads_view1: list
    grads_view2: list
    per_head: list = field(default_factory=list)


def swapped_segmentation_loss(view1_logits: Sequence[np.ndarray], view2_logits: Sequence[np.ndarray],
                              view1_targets: Sequence[HeadTargets], view2_targets: Sequence[HeadTargets],
                              weights) -> SwappedLoss:
    """``wCE(view1, targets2) + wCE(view2, targets1)`` averaged over the given heads.

    ``weights`` is one array shared by all heads or a per-head list.
    Terms whose target mask is empty contribute nothing.
    """
    heads = len(view1_logits)
    if not (heads == len(view2_logits) == len(view1_targets) == len(view2_targets)):
        raise ViewMismatch("views disagree on the number of heads")
    if heads == 0:
        return SwappedLoss(0.0, [], [], [])
    if not isinstance(weights, (list, tuple)):
        weights = [weights] * heads
    total, g1s, g2s, per_head = 0.0, [], [], []
    for l1, l2, t1, t2, w in zip(view1_logits, view2_logits, view1_targets, view2_targets, weights):
        if l1.shape != l2.shape:
            raise ViewMismatch(f"view logits differ in shape: {l1.shape} vs {l2.shape}")
        head_val = 0.0
        g1 = np.zeros_like(l1, dtype=np.float64)
        g2 = np.zeros_like(l2, dtype=np.float64)
        if t2.mask.any():
            v, g1 = weighted_ce(l1, t2.soft, w, t2.mask, return_grad=True)
            head_val += v
        if t1.mask.any():
            v, g2 = weighted_ce(l2, t1.soft, w, t1.mask, return_grad=True)
            head_val += v
        per_head.append(head_val)
        total += head_val
        g1s.append(g1 / heads)
        g2s.append(g2 / heads)
    return SwappedLoss(total / heads, g1s, g2s, per_head)


def cosine_loss(pred, target, mask=None, return_grad: bool = False):
    """Mean over masked rows of ``1 - cos(pred, target)``; target is treated as constant."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionMismatch(f"projected {pred.shape} vs auxiliary {target.shape}")
    mask = np.ones(pred.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    grad = np.zeros_like(pred)
    if count == 0:
        return (0.0, grad) if return_grad else 0.0
    u, a = pred[mask], target[mask]
    nu = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
    na = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    uh, ah = u / nu, a / na
    cos = np.sum(uh * ah, axis=1, keepdims=True)
    value = float(np.mean(1.0 - cos))
    if not return_grad:
        return value
    grad[mask] = -(ah - cos * uh) / nu / count
    return value, grad


def alignment_loss(proj1, proj2, aux1, aux2, mask=None):
    """Un-swapped cosine distillation on both views: returns ``(value, grad1, grad2)``."""
    v1, g1 = cosine_loss(proj1, aux1, mask, return_grad=True)
    v2, g2 = cosine_loss(proj2, aux2, mask, return_grad=True)
    return v1 + v2, g1, g2


def total_loss(seg: float, align: float, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return seg + gamma * align


@dataclass
class LossReport:
    seg: float
    align: float
    gamma: float
    per_head: dict = field(default_factory=dict)
    n_base_points: int = 0
    n_novel_points: int = 0
    n_selected: int = 0
    prototype_mass: Optional[np.ndarray] = None

    @property
    def total(self) -> float:
        return total_loss(self.seg, self.align, self.gamma)
