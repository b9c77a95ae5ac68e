"""Split-based mIoU evaluation with a Hungarian mapping of novel prototypes to classes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import backbone as bb
from .data_model import NcdTaskSpec
from .errors import IdOutOfRange, ShapeMismatch
from .geometry import knn_indices, voxelize
from .sinkhorn import pseudo_labels, solve_assignment


def new_confusion(k: int) -> np.ndarray:
    return np.zeros((k, k), dtype=np.int64)


def accumulate(conf: np.ndarray, gt, pred) -> np.ndarray:
    """Return ``conf`` plus one count at ``[gt, pred]`` per point."""
    gt = np.asarray(gt, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if gt.shape != pred.shape:
        raise ShapeMismatch("gt and prediction lengths differ")
    k = conf.shape[0]
    if gt.size and (gt.min() < 0 or gt.max() >= k or pred.min() < 0 or pred.max() >= k):
        raise IdOutOfRange(f"class ids must lie in [0, {k})")
    return conf + np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)


def iou_per_class(conf: np.ndarray) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the denominator is zero."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    out = np.full(tp.shape, np.nan)
    np.divide(tp, denom, out=out, where=denom > 0)
    return out


def hungarian_map(iou: np.ndarray, tie_tol: float = 1e-12) -> np.ndarray:
    """Bijection prototype -> class column maximising total IoU.

    ``iou[j, c]`` scores prototype ``j`` against class ``c``. Among optimal
    assignments, lower prototype indices take the lowest class index they
    can while the optimum stays attainable.
    """
    iou = np.asarray(iou, dtype=np.float64)
    if iou.ndim != 2 or iou.shape[0] != iou.shape[1]:
        raise ShapeMismatch(f"need a square matrix, got {iou.shape}")
    n = iou.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    def best(rows, cols):
        if not rows:
            return 0.0
        sub = iou[np.ix_(rows, cols)]
        r, c = linear_sum_assignment(sub, maximize=True)
        return float(sub[r, c].sum())

    target = best(list(range(n)), list(range(n)))
    mapping = np.empty(n, dtype=np.int64)
    free = list(range(n))
    fixed = 0.0
    for j in range(n):
        rest = list(range(j + 1, n))
        for c in free:
            remaining = [x for x in free if x != c]
            if fixed + iou[j, c] + best(rest, remaining) >= target - tie_tol:
                mapping[j] = c
                fixed += iou[j, c]
                free = remaining
                break
    return mapping


@dataclass
class MiouReport:
    per_class: dict             # class id -> IoU (NaN when undefined)
    miou_novel: float
    miou_base: float
    miou_all: float
    mapping: dict               # prototype index -> novel class id
    head: int = 0
    class_names: dict = field(default_factory=dict)
    novel_classes: tuple = ()
    confusion: Optional[np.ndarray] = None

    def format(self) -> str:
        lines = [f"head\t{self.head}", "class_id\tname\tsplit\tiou"]
        for cid, v in sorted(self.per_class.items()):
            split = "novel" if cid in self.novel_classes else "base"
            val = "nan" if math.isnan(v) else f"{v:.4f}"
            lines.append(f"{cid}\t{self.class_names.get(cid, cid)}\t{split}\t{val}")
        lines.append(f"mIoU_novel\t{self.miou_novel:.4f}")
        lines.append(f"mIoU_base\t{self.miou_base:.4f}")
        lines.append(f"mIoU_all\t{self.miou_all:.4f}")
        mp = ", ".join(f"{j}->{self.class_names.get(c, c)}" for j, c in sorted(self.mapping.items()))
        lines.append(f"mapping\t{mp}")
        return "\n".join(lines)

    def plot_data(self) -> str:
        rows = ["class\tiou"]
        for cid, v in sorted(self.per_class.items()):
            rows.append(f"{self.class_names.get(cid, cid)}\t{'nan' if math.isnan(v) else f'{v:.6f}'}")
        return "\n".join(rows) + "\n"


def _nanmean(values) -> float:
    v = np.asarray(list(values), dtype=np.float64)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


def report_from_confusion(conf: np.ndarray, task: NcdTaskSpec, mapping: dict, head: int = 0) -> MiouReport:
    iou = iou_per_class(conf)
    per_class = {c: float(iou[c]) for c in task.all_classes}
    return MiouReport(
        per_class=per_class,
        miou_novel=_nanmean(per_class[c] for c in task.novel_classes),
        miou_base=_nanmean(per_class[c] for c in task.base_classes),
        miou_all=_nanmean(per_class.values()),
        mapping=dict(mapping),
        head=head,
        class_names=dict(task.class_names),
        novel_classes=tuple(task.novel_classes),
        confusion=conf,
    )


def raw_confusion(gt_list, pred_list, task: NcdTaskSpec) -> np.ndarray:
    """Counts of (ground-truth class id, concatenated-logit index)."""
    k = task.num_classes
    width = task.n_base + task.n_novel
    conf = np.zeros((k, width), dtype=np.int64)
    for gt, pred in zip(gt_list, pred_list):
        keep = (gt >= 0) & (gt < k)
        np.add.at(conf, (gt[keep], pred[keep]), 1)
    return conf


def prototype_iou(raw: np.ndarray, task: NcdTaskSpec) -> np.ndarray:
    """IoU of every novel prototype against every novel class, ``(C_n, C_n)``."""
    nb = task.n_base
    out = np.zeros((task.n_novel, task.n_novel))
    col_tot = raw.sum(axis=0)
    row_tot = raw.sum(axis=1)
    for j in range(task.n_novel):
        for ci, c in enumerate(task.novel_classes):
            tp = raw[c, nb + j]
            denom = col_tot[nb + j] + row_tot[c] - tp
            out[j, ci] = tp / denom if denom > 0 else 0.0
    return out


def mapped_confusion(raw: np.ndarray, task: NcdTaskSpec, mapping: dict) -> np.ndarray:
    k = task.num_classes
    col_to_class = list(task.base_classes) + [mapping[j] for j in range(task.n_novel)]
    conf = new_confusion(k)
    for col, cid in enumerate(col_to_class):
        conf[:, cid] += raw[:, col]
    return conf


def score_predictions(gt_list, pred_list, task: NcdTaskSpec, head: int = 0,
                      mapping: Optional[dict] = None) -> MiouReport:
    """Map prototypes (unless ``mapping`` is given) and build the report.

    ``pred_list`` holds concatenated-logit indices: base columns first,
    then novel prototypes.
    """
    raw = raw_confusion(gt_list, pred_list, task)
    if mapping is None:
        cols = hungarian_map(prototype_iou(raw, task))
        mapping = {j: task.novel_classes[c] for j, c in enumerate(cols)}
    return report_from_confusion(mapped_confusion(raw, task, mapping), task, mapping, head)


# -- model evaluation --------------------------------------------------------


def infer_cloud(params: dict, net_cfg: bb.NetworkConfig, cloud, voxel_size: float):
    """Inference-path trace for one cloud and its voxel grid (no augmentation)."""
    grid = voxelize(cloud.coords, voxel_size)
    reps = grid.representatives
    xyz = cloud.coords[reps]
    nbr = knn_indices(xyz, net_cfg.neighborhood_k)
    x = bb.point_inputs(xyz, None if cloud.colors is None else cloud.colors[reps], nbr)
    return bb.forward(params, net_cfg, x, nbr, heads="inference"), grid


def head_entropies(traces, net_cfg: bb.NetworkConfig, eps: float = 0.05, n_iters: int = 3) -> np.ndarray:
    """Mean pseudo-label entropy per discovery head over points it predicts as novel."""
    nb = net_cfg.n_base
    out = np.full(net_cfg.n_novel_heads, np.inf)
    for h in range(net_cfg.n_novel_heads):
        zs = []
        for tr in traces:
            logits = bb.concat_logits(tr.base_logits, tr.novel_logits[h])
            zs.append(tr.z[logits.argmax(axis=1) >= nb])
        z = np.concatenate(zs)
        if not len(z):
            continue
        protos = tr.params64[f"novel.{h}.w"]
        pl = pseudo_labels(solve_assignment(protos.T @ z.T, eps, n_iters))
        out[h] = float(-(pl * np.log(np.clip(pl, 1e-300, None))).sum(axis=1).mean())
    return out


def evaluate(params: dict, net_cfg: bb.NetworkConfig, clouds, task: NcdTaskSpec,
             head: Optional[int] = None, voxel_size: float = 0.05,
             mapping: Optional[dict] = None) -> MiouReport:
    """Evaluate one discovery head on ``clouds``.

    With ``head=None`` the head with the lowest mean pseudo-label entropy
    is chosen. Over-clustering heads and the projection head are never run.
    """
    if net_cfg.n_base != task.n_base or net_cfg.n_novel != task.n_novel:
        raise ShapeMismatch("checkpoint was trained for a different split")
    runs = [infer_cloud(params, net_cfg, c, voxel_size) for c in clouds]
    if head is None:
        head = int(np.argmin(head_entropies([t for t, _ in runs], net_cfg)))
    preds = []
    for tr, grid in runs:
        logits = bb.concat_logits(tr.base_logits, tr.novel_logits[head])
        preds.append(grid.broadcast(logits.argmax(axis=1)))
    gts = [c.evaluation_labels() for c in clouds]
    return score_predictions(gts, preds, task, head, mapping)
