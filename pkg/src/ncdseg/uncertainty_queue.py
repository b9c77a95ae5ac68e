"""Per-class adaptive confidence thresholds and the feature queue used for balancing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data_model import is_normalized
from .errors import DimensionMismatch
from .sinkhorn import pseudo_labels, solve_assignment


def nearest_rank(values: np.ndarray, p: float) -> float:
    """The ``ceil(p * n)``-th smallest value (the minimum for ``p = 0``)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    # Guard against p * n landing a hair above an integer (0.3 * 10).
    rank = max(1, math.ceil(p * v.size - 1e-9))
    return float(v[rank - 1])


def adaptive_thresholds(pred_classes, confidences, p: float, n_classes: int) -> np.ndarray:
    """Threshold per class: nearest-rank ``p``-th percentile of its confidences.

    Classes that no point is predicted as get a threshold of 0.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"percentile {p} outside [0, 1]")
    pred_classes = np.asarray(pred_classes)
    confidences = np.asarray(confidences, dtype=np.float64)
    tau = np.zeros(n_classes)
    for c in np.unique(pred_classes):
        tau[c] = nearest_rank(confidences[pred_classes == c], p)
    return tau


def select_confident(features, pred_classes, confidences, tau):
    """Keep points whose confidence reaches their predicted class's threshold.

    Returns ``(selected_features, indices)``; ``indices`` map selected rows
    back into the input.
    """
    pred_classes = np.asarray(pred_classes)
    confidences = np.asarray(confidences, dtype=np.float64)
    if features is not None and len(features) != len(pred_classes):
        raise DimensionMismatch("features and predictions are not aligned")
    keep = np.flatnonzero(confidences >= np.asarray(tau)[pred_classes])
    return (None if features is None else features[keep]), keep


def head_confidences(logits: np.ndarray):
    """Predicted class and its softmax probability for each row of ``logits``."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(shifted)
    prob /= prob.sum(axis=1, keepdims=True)
    pred = prob.argmax(axis=1)
    return pred, prob[np.arange(len(pred)), pred]


@dataclass
class FeatureQueue:
    """FIFO store of unit-norm novel features with their predicted classes."""

    capacity: int = 4096
    dim: int = 0
    features: np.ndarray = field(default=None)
    classes: np.ndarray = field(default=None)
    steps: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")
        if self.features is None:
            self.features = np.zeros((0, self.dim))
            self.classes = np.zeros(0, dtype=np.int64)
            self.steps = np.zeros(0, dtype=np.int64)
        self.dim = self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def class_counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.classes, minlength=n_classes)


def enqueue(queue: FeatureQueue, features, classes, sample_fraction: float, step: int,
            rng: np.random.Generator) -> FeatureQueue:
    """Append a random ``sample_fraction`` of the rows, evicting the oldest beyond capacity."""
    if not 0.0 < sample_fraction <= 1.0:
        raise ValueError("sample_fraction must lie in (0, 1]")
    features = np.asarray(features, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    n = features.shape[0]
    if n == 0 or queue.capacity == 0:
        return queue
    if queue.dim and features.shape[1] != queue.dim:
        raise DimensionMismatch(f"queue holds {queue.dim}-dim features, got {features.shape[1]}")
    if not is_normalized(features):
        raise ValueError("queued features must be unit-normalised")
    take = min(n, math.ceil(sample_fraction * n - 1e-9))
    idx = np.sort(rng.choice(n, size=take, replace=False)) if take < n else np.arange(n)
    feats = np.concatenate([queue.features, features[idx]])[-queue.capacity:]
    cls = np.concatenate([queue.classes, classes[idx]])[-queue.capacity:]
    steps = np.concatenate([queue.steps, np.full(take, step, dtype=np.int64)])[-queue.capacity:]
    return FeatureQueue(queue.capacity, feats.shape[1], feats, cls, steps)


def augment_and_truncate(batch_features, queue: FeatureQueue, prototypes, eps: float,
                         n_iters: int = 3, tol=None, with_plan_mass: bool = False):
    """Pseudo-labels for the batch rows, solved jointly with the queued features.

    ``batch_features`` is ``(m, D)``, ``prototypes`` is ``(D, rho)``; the
    result is ``(m, rho)``. With ``with_plan_mass`` the per-prototype row
    mass of the whole plan (batch and queue columns) is returned as well.
    """
    z = np.asarray(batch_features, dtype=np.float64)
    m = z.shape[0]
    if len(queue):
        if queue.dim != z.shape[1]:
            raise DimensionMismatch(f"batch features are {z.shape[1]}-dim, queue {queue.dim}-dim")
        z = np.concatenate([z, queue.features])
    sims = np.asarray(prototypes, dtype=np.float64).T @ z.T
    q = solve_assignment(sims, eps, n_iters, tol=tol)
    pl = pseudo_labels(q[:, :m])
    if with_plan_mass:
        return pl, q.sum(axis=1)
    return pl
