"""Shared domain types: labelled point clouds and the base/novel task split.

Feature blocks are plain ``numpy`` arrays laid out one row per point,
shape ``(n_points, dim)``.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    DisjointnessViolation,
    LabelOutOfSplit,
    LengthMismatch,
    NormalizationDegenerate,
    TaintError,
)

UNLABELED = -1

_guarded = contextvars.ContextVar("ncdseg_label_guard", default=False)
_eval_reads = contextvars.ContextVar("ncdseg_eval_reads", default=0)


@contextlib.contextmanager
def label_guard():
    """Forbid reads of novel ground truth for the duration of the block.

    Training code runs inside this guard; any call to
    :meth:`LabeledCloud.evaluation_labels` raises :class:`TaintError`.
    """
    token = _guarded.set(True)
    try:
        yield
    finally:
        _guarded.reset(token)


def evaluation_reads() -> int:
    """Number of evaluation-label reads performed in the current context."""
    return _eval_reads.get()


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class LabeledCloud:
    """A point cloud with per-point class ids and a base/novel partition.

    ``labels`` is the training view: novel-masked points read as
    :data:`UNLABELED`. The true ids of novel points are only reachable
    through :meth:`evaluation_labels`.
    """

    __slots__ = ("coords", "colors", "novel_mask", "_labels", "_train_labels", "name")

    def __init__(self, coords, labels, novel_mask, colors=None, name: str = ""):
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise LengthMismatch(f"coords must be (n, 3), got {coords.shape}")
        n = coords.shape[0]
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        novel_mask = np.asarray(novel_mask, dtype=bool).reshape(-1)
        if n == 0:
            raise LengthMismatch("cloud must contain at least one point")
        if labels.shape[0] != n or novel_mask.shape[0] != n:
            raise LengthMismatch(
                f"coords ({n}), labels ({labels.shape[0]}) and novel_mask "
                f"({novel_mask.shape[0]}) differ in length"
            )
        if colors is not None:
            colors = np.asarray(colors, dtype=np.float64)
            if colors.shape != (n, 3):
                raise LengthMismatch(f"colors must be ({n}, 3), got {colors.shape}")
            colors = _frozen(colors)
        self.coords = _frozen(coords)
        self.colors = colors
        self.novel_mask = _frozen(novel_mask)
        self._labels = _frozen(labels)
        self._train_labels = _frozen(np.where(novel_mask, UNLABELED, labels))
        self.name = name

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __repr__(self) -> str:
        return (
            f"LabeledCloud(name={self.name!r}, n={len(self)}, "
            f"novel={int(self.novel_mask.sum())}, color={self.has_color})"
        )

    @property
    def has_color(self) -> bool:
        return self.colors is not None

    @property
    def labels(self) -> np.ndarray:
        return self._train_labels

    def evaluation_labels(self) -> np.ndarray:
        """True class ids of every point, novel points included."""
        if _guarded.get():
            raise TaintError("novel ground truth read inside a training scope")
        _eval_reads.set(_eval_reads.get() + 1)
        return self._labels

    def with_coords(self, coords) -> "LabeledCloud":
        """Same labels, mask and colors with new coordinates."""
        out = object.__new__(LabeledCloud)
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != self.coords.shape:
            raise LengthMismatch(f"expected {self.coords.shape}, got {coords.shape}")
        out.coords = _frozen(coords)
        out.colors = self.colors
        out.novel_mask = self.novel_mask
        out._labels = self._labels
        out._train_labels = self._train_labels
        out.name = self.name
        return out

    def subset(self, index) -> "LabeledCloud":
        index = np.asarray(index)
        return LabeledCloud(
            self.coords[index],
            self._labels[index],
            self.novel_mask[index],
            None if self.colors is None else self.colors[index],
            name=self.name,
        )

    def same_as(self, other: "LabeledCloud") -> bool:
        """Exact equality of geometry, colors, labels and masks."""
        if self.has_color != other.has_color:
            return False
        same = (
            np.array_equal(self.coords, other.coords)
            and np.array_equal(self._labels, other._labels)
            and np.array_equal(self.novel_mask, other.novel_mask)
        )
        if same and self.has_color:
            same = np.array_equal(self.colors, other.colors)
        return same


@dataclass(frozen=True)
class NcdTaskSpec:
    base_classes: tuple
    novel_classes: tuple
    class_names: Mapping[int, str] = field(default_factory=dict)
    split_name: str = ""
    dataset: str = ""

    def __post_init__(self):
        object.__setattr__(self, "base_classes", tuple(int(c) for c in self.base_classes))
        object.__setattr__(self, "novel_classes", tuple(int(c) for c in self.novel_classes))
        object.__setattr__(self, "class_names", dict(self.class_names))
        both = set(self.base_classes) & set(self.novel_classes)
        if both:
            raise DisjointnessViolation(f"classes in both base and novel sets: {sorted(both)}")
        if len(set(self.base_classes)) != len(self.base_classes):
            raise DisjointnessViolation("duplicate base class id")
        if len(set(self.novel_classes)) != len(self.novel_classes):
            raise DisjointnessViolation("duplicate novel class id")

    @property
    def n_base(self) -> int:
        return len(self.base_classes)

    @property
    def n_novel(self) -> int:
        return len(self.novel_classes)

    @property
    def all_classes(self) -> tuple:
        return tuple(sorted(self.base_classes + self.novel_classes))

    @property
    def num_classes(self) -> int:
        """Size of the dense id range used for confusion matrices."""
        return max(self.all_classes) + 1 if self.all_classes else 0

    def name_of(self, class_id: int) -> str:
        return self.class_names.get(class_id, str(class_id))

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "split_name": self.split_name,
            "base_classes": list(self.base_classes),
            "novel_classes": list(self.novel_classes),
            "class_names": {str(k): v for k, v in sorted(self.class_names.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NcdTaskSpec":
        return cls(
            base_classes=tuple(d["base_classes"]),
            novel_classes=tuple(d["novel_classes"]),
            class_names={int(k): v for k, v in d.get("class_names", {}).items()},
            split_name=d.get("split_name", ""),
            dataset=d.get("dataset", ""),
        )


def validate_task(cloud: LabeledCloud, task: NcdTaskSpec):
    """Check that ``cloud`` is consistent with the split; returns the pair unchanged."""
    # NcdTaskSpec enforces disjointness on construction; re-check for
    # instances built by bypassing __init__.
    both = set(task.base_classes) & set(task.novel_classes)
    if both:
        raise DisjointnessViolation(f"classes in both base and novel sets: {sorted(both)}")
    n = len(cloud)
    if cloud.labels.shape[0] != n or cloud.novel_mask.shape[0] != n:
        raise LengthMismatch("label/mask length differs from point count")
    base_labels = cloud.labels[~cloud.novel_mask]
    bad = ~np.isin(base_labels, np.asarray(task.base_classes, dtype=np.int64))
    if bad.any():
        offenders = sorted(set(base_labels[bad].tolist()))
        raise LabelOutOfSplit(f"base-masked points carry non-base ids {offenders}")
    return cloud, task


def normalize_rows(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Unit-normalise each row; rows with norm below ``eps`` are an error."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if x.shape[0] and norms.min() < eps:
        raise NormalizationDegenerate(
            f"{int((norms < eps).sum())} feature vectors have norm below {eps}"
        )
    return x / norms


def is_normalized(x: np.ndarray, tol: float = 1e-6) -> bool:
    return bool(np.all(np.abs(np.linalg.norm(x, axis=1) - 1.0) <= tol))
