"""Offline-clustering baseline: base-only pre-training, K-Means on novel features,
nearest-neighbour label propagation and fine-tuning on hard pseudo-labels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .data_model import NcdTaskSpec, label_guard
from .errors import NoNovelPoints, TooFewPoints
from .evaluation import MiouReport, evaluate, infer_cloud
from .trainer import TrainConfig, TrainResult, train


@dataclass(frozen=True)
class EumsConfig:
    subsample_ratio: float = 0.3
    cap: int = 1000
    overcluster: int = 3
    keep_fraction: float = 0.7
    pretrain_epochs: int = 10
    finetune_epochs: int = 10
    kmeans_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.subsample_ratio <= 1:
            raise ValueError("subsample_ratio must lie in (0, 1]")
        if self.cap < 1:
            raise ValueError("cap must be >= 1")
        if self.overcluster < 1:
            raise ValueError("overcluster must be >= 1")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")


def subsample_novel(cloud, ratio: float, cap: int, rng: np.random.Generator) -> np.ndarray:
    """``min(cap, ceil(ratio * n_novel))`` distinct novel indices, sorted."""
    novel = np.flatnonzero(cloud.novel_mask)
    if novel.size == 0:
        raise NoNovelPoints(f"cloud {cloud.name!r} has no novel points")
    n = min(cap, math.ceil(ratio * novel.size - 1e-9))
    return np.sort(rng.choice(novel, size=n, replace=False))


# -- k-means -----------------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray      # (k, D)
    assignments: np.ndarray    # (n,)
    inertia: float
    history: list = field(default_factory=list)   # inertia after each Lloyd iteration
    n_iter: int = 0


def _sq_dists(x, c):
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(x, k, rng):
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        nxt = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return x[idx].copy()


def kmeans(features, k: int, max_iters: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; empty clusters take the farthest point."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise TooFewPoints(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    cent = _plusplus(x, k, rng)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(x, cent)
        new = d2.argmin(axis=1)
        cost = d2[np.arange(n), new]
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # Take the worst-served point from a cluster that can spare it.
            movable = counts[new] > 1
            far = int(np.argmax(np.where(movable, cost, -1.0)))
            counts[new[far]] -= 1
            new[far] = j
            counts[j] = 1
            cost[far] = 0.0
            cent[j] = x[far]
        for j in range(k):
            cent[j] = x[new == j].mean(axis=0)
        history.append(float(_sq_dists(x, cent)[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            assign = new
            break
        assign = new
    return KMeansResult(cent, assign, history[-1], history, it)


def soft_entropy(distances: np.ndarray) -> np.ndarray:
    """Entropy of ``softmax(-distances)`` per row."""
    a = -np.asarray(distances, dtype=np.float64)
    a = a - a.max(axis=1, keepdims=True)
    p = np.exp(a)
    p /= p.sum(axis=1, keepdims=True)
    return -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1)


def entropy_filter(distances, assignments, keep_fraction: float) -> np.ndarray:
    """Boolean mask keeping the lowest-entropy ``keep_fraction`` of every cluster."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    assignments = np.asarray(assignments)
    ent = soft_entropy(distances)
    keep = np.zeros(assignments.shape[0], dtype=bool)
    for c in np.unique(assignments):
        members = np.flatnonzero(assignments == c)
        n_keep = math.ceil(keep_fraction * members.size - 1e-9)
        order = members[np.argsort(ent[members], kind="stable")]
        keep[order[:n_keep]] = True
    return keep


def merge_overclusters(centroids, assignments, k: int) -> np.ndarray:
    """Map each of the ``K >= k`` clusters to one of the ``k`` largest.

    The ``k`` largest clusters (ties to the lower index) keep their place,
    in index order; every other cluster joins the kept cluster whose
    centroid has the highest cosine similarity with its own.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    big = centroids.shape[0]
    sizes = np.bincount(assignments, minlength=big)
    kept = np.sort(np.lexsort((np.arange(big), -sizes))[:k])
    unit = centroids / np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)
    lut = np.empty(big, dtype=np.int64)
    for c in range(big):
        hit = np.flatnonzero(kept == c)
        lut[c] = hit[0] if hit.size else int(np.argmax(unit[kept] @ unit[c]))
    return lut[assignments]


def propagate_nn(sources, labels, coords, candidates) -> np.ndarray:
    """Copy each source point's label to its nearest candidate point.

    ``sources`` and ``labels`` are aligned; ``candidates`` lists the points
    that may receive a label. Distance ties go to the lowest candidate
    index and a candidate claimed twice keeps the lower-index source's
    label. Returns per-point labels (-1 where none), sources included.
    """
    sources = np.asarray(sources, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.float64)
    out = np.full(coords.shape[0], -1, dtype=np.int64)
    out[sources] = labels
    cand = np.setdiff1d(np.asarray(candidates, dtype=np.int64), sources)
    if cand.size == 0 or sources.size == 0:
        return out
    tree = cKDTree(coords[cand])
    k = min(8, cand.size)
    dist, idx = tree.query(coords[sources], k=k)
    dist, idx = dist.reshape(len(sources), k), idx.reshape(len(sources), k)
    for s in np.argsort(sources, kind="stable"):
        best = cand[idx[s][dist[s] == dist[s, 0]]].min()
        if out[best] < 0:
            out[best] = labels[s]
    return out


# -- full baseline -----------------------------------------------------------


@dataclass
class EumsResult:
    pretrained: TrainResult
    finetuned: TrainResult
    pseudo_labels: list          # per scene, -1 where unlabeled
    report: Optional[MiouReport] = None


def baseline_train_config(cfg: TrainConfig) -> TrainConfig:
    """One discovery head, no over-clustering and no distillation."""
    return replace(cfg, n_heads=1, n_overcluster_heads=0, gamma=0.0, use_queue=False)


def cluster_novel_points(params, net_cfg, scenes, task: NcdTaskSpec, ecfg: EumsConfig,
                         voxel_size: float) -> list:
    """Hard pseudo-labels for every training scene's novel points (-1 = none)."""
    rng = np.random.default_rng([ecfg.seed, 3])
    feats, owners, picks = [], [], []
    for s, (cloud, _) in enumerate(scenes):
        if not cloud.novel_mask.any():
            picks.append(np.zeros(0, dtype=np.int64))
            continue
        tr, grid = infer_cloud(params, net_cfg, cloud, voxel_size)
        sub = subsample_novel(cloud, ecfg.subsample_ratio, ecfg.cap, rng)
        feats.append(grid.broadcast(tr.z)[sub])
        owners.append(np.full(sub.size, s))
        picks.append(sub)
    if not feats:
        raise NoNovelPoints("no training scene contains novel points")
    x = np.concatenate(feats)
    owners = np.concatenate(owners)
    k = task.n_novel
    km = kmeans(x, k * ecfg.overcluster, ecfg.kmeans_iters, ecfg.seed)
    dists = np.sqrt(_sq_dists(x, km.centroids))
    keep = entropy_filter(dists, km.assignments, ecfg.keep_fraction)
    merged = merge_overclusters(km.centroids, km.assignments, k)
    out = []
    for s, (cloud, _) in enumerate(scenes):
        rows = np.flatnonzero((owners == s) & keep)
        src = picks[s][keep[owners == s]] if rows.size else np.zeros(0, dtype=np.int64)
        if src.size == 0:
            out.append(np.full(len(cloud), -1, dtype=np.int64))
            continue
        out.append(propagate_nn(src, merged[rows], cloud.coords, np.flatnonzero(cloud.novel_mask)))
    return out


def run_eums(scenes, task: NcdTaskSpec, train_cfg: TrainConfig, ecfg: EumsConfig,
             val_clouds=None) -> EumsResult:
    """Pre-train on base points, cluster novel features offline, fine-tune, evaluate."""
    cfg = baseline_train_config(train_cfg)
    with label_guard():
        pre_cfg = replace(cfg, epochs=ecfg.pretrain_epochs)
        none = [np.full(len(c), -1, dtype=np.int64) for c, _ in scenes]
        pre = train(pre_cfg, scenes, task, fixed_labels=none)
        labels = cluster_novel_points(pre.params, pre.net_cfg, scenes, task, ecfg, cfg.voxel_size)
        ft_cfg = replace(cfg, epochs=ecfg.finetune_epochs)
        ft = train(ft_cfg, scenes, task, fixed_labels=labels, init_params=pre.params)
    report = None
    if val_clouds:
        report = evaluate(ft.params, ft.net_cfg, val_clouds, task, head=0, voxel_size=cfg.voxel_size)
    return EumsResult(pre, ft, labels, report)
