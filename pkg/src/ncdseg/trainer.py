"""Optimisation loop: two-view forward passes, online pseudo-labels, SGD with momentum."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import backbone as bb
from .data_model import NcdTaskSpec, label_guard, validate_task
from .geometry import AugmentationPolicy, augment_pair, knn_indices, voxelize
from .losses import (
    HeadTargets,
    LossReport,
    alignment_loss,
    class_weights,
    swapped_segmentation_loss,
)
from .sinkhorn import SinkhornConfig, epsilon_at
from .uncertainty_queue import (
    FeatureQueue,
    adaptive_thresholds,
    augment_and_truncate,
    enqueue,
    head_confidences,
    select_confident,
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr_max: float = 1e-2
    lr_min: float = 1e-5
    warmup_fraction: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    voxel_size: float = 0.05
    sk_iters: int = 3
    eps_start: float = 0.3
    eps_end: float = 0.05
    select_p: float = 0.3
    use_selection: bool = True
    queue_capacity: int = 4096
    queue_fraction: float = 0.1
    use_queue: bool = True
    gamma: float = 7.0
    align_base_points: bool = False
    base_weight_rule: str = "inverse-log"
    pseudo_labels: str = "sinkhorn"
    # augmentation
    rot_z: tuple = (0.0, 2.0 * math.pi)
    scale: tuple = (0.95, 1.05)
    flip_prob: float = 0.5
    jitter: float = 0.01
    # network
    hidden_dims: tuple = (64, 64)
    feature_dim: int = 32
    n_heads: int = 5
    overcluster: int = 3
    n_overcluster_heads: Optional[int] = None
    neighborhood_k: int = 16
    projection_hidden: int = 32

    def __post_init__(self):
        for name in ("rot_z", "scale", "hidden_dims"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.lr_max > self.lr_min > 0:
            raise ValueError("need lr_max > lr_min > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need batch_size >= 1 and epochs >= 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.pseudo_labels not in ("sinkhorn", "argmax"):
            raise ValueError("pseudo_labels must be 'sinkhorn' or 'argmax'")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @property
    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(self.rot_z, self.scale, self.flip_prob, self.flip_prob, self.jitter)

    @property
    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(self.sk_iters, self.eps_start, self.eps_end)

    def network(self, task: NcdTaskSpec, input_dim: int, aux_dim: int) -> bb.NetworkConfig:
        return bb.NetworkConfig(
            n_base=task.n_base,
            n_novel=task.n_novel,
            input_dim=input_dim,
            hidden_dims=self.hidden_dims,
            feature_dim=self.feature_dim,
            n_novel_heads=self.n_heads,
            overcluster_factor=self.overcluster,
            n_overcluster_heads=self.n_overcluster_heads,
            projection_dim=max(1, aux_dim),
            projection_hidden=self.projection_hidden,
            neighborhood_k=self.neighborhood_k,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warm-up to ``lr_max`` then cosine annealing to ``lr_min``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.lr_max * step / warm
    if total_steps == warm:
        return cfg.lr_max
    progress = (step - warm) / (total_steps - warm)
    w = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.lr_max * w + cfg.lr_min * (1.0 - w)


# -- batches -----------------------------------------------------------------


@dataclass
class ViewBatch:
    """One augmented view of a batch of clouds, voxelised and concatenated."""

    inputs: np.ndarray          # (n_voxels, input_dim)
    neighbors: np.ndarray       # (n_voxels, k) indices into the concatenation
    point_to_voxel: np.ndarray  # (n_points,)

    def __post_init__(self):
        n_pts, n_vox = self.point_to_voxel.shape[0], self.inputs.shape[0]
        self._gather = sp.csr_matrix(
            (np.ones(n_pts), (self.point_to_voxel, np.arange(n_pts))), shape=(n_vox, n_pts))

    def to_points(self, per_voxel: np.ndarray) -> np.ndarray:
        return per_voxel[self.point_to_voxel]

    def to_voxels(self, per_point: np.ndarray) -> np.ndarray:
        """Sum per-point values (e.g. gradients) into their voxels."""
        return self._gather @ per_point


def build_view(clouds, voxel_size: float, k: int) -> ViewBatch:
    inputs, nbrs, p2v = [], [], []
    offset = 0
    for cloud in clouds:
        grid = voxelize(cloud.coords, voxel_size)
        reps = grid.representatives
        xyz = cloud.coords[reps]
        nbr = knn_indices(xyz, k)
        inputs.append(bb.point_inputs(xyz, None if cloud.colors is None else cloud.colors[reps], nbr))
        if nbr.shape[1] < k:
            # Tiny clouds: pad by repeating the point itself so widths agree.
            nbr = np.concatenate([nbr, np.repeat(nbr[:, :1], k - nbr.shape[1], axis=1)], axis=1)
        nbrs.append(nbr + offset)
        p2v.append(grid.point_to_voxel + offset)
        offset += grid.n_voxels
    return ViewBatch(np.concatenate(inputs), np.concatenate(nbrs), np.concatenate(p2v))


def base_index(labels: np.ndarray, novel_mask: np.ndarray, task: NcdTaskSpec) -> np.ndarray:
    """Base-logit column per point, -1 for novel points."""
    lut = {c: i for i, c in enumerate(task.base_classes)}
    out = np.full(labels.shape[0], -1, dtype=np.int64)
    for i in np.flatnonzero(~novel_mask):
        out[i] = lut[int(labels[i])]
    return out


def base_frequencies(clouds, task: NcdTaskSpec) -> np.ndarray:
    counts = np.zeros(task.n_base)
    for cloud in clouds:
        idx = base_index(cloud.labels, cloud.novel_mask, task)
        counts += np.bincount(idx[idx >= 0], minlength=task.n_base)
    # A base class absent from the training clouds still needs a finite weight.
    counts = np.maximum(counts, 1.0)
    return counts / counts.sum()


def input_dim_of(clouds) -> int:
    return 3 + bb.SHAPE_DIM + (3 if clouds[0].has_color else 0)


# -- state -------------------------------------------------------------------


@dataclass
class TrainState:
    params: dict
    momentum: dict
    queue: FeatureQueue
    step: int
    rng: np.random.Generator
    log: list = field(default_factory=list)


def init_state(net_cfg: bb.NetworkConfig, cfg: TrainConfig) -> TrainState:
    params = bb.init_params(net_cfg, seed=cfg.seed)
    return TrainState(
        params=params,
        momentum={k: np.zeros_like(v) for k, v in params.items()},
        queue=FeatureQueue(cfg.queue_capacity, net_cfg.feature_dim),
        step=0,
        rng=np.random.default_rng([cfg.seed, 1]),
    )


def sgd_update(state: TrainState, grads: dict, lr: float, cfg: TrainConfig):
    """Momentum SGD with decoupled weight decay; parameters are stored as float32."""
    for k, g in grads.items():
        p = state.params[k].astype(np.float64)
        v = cfg.momentum * state.momentum[k].astype(np.float64) + g
        p = p - lr * v - lr * cfg.weight_decay * p
        state.params[k] = p.astype(np.float32)
        state.momentum[k] = v.astype(np.float32)


def _add_grads(total: dict, part: dict):
    for k, v in part.items():
        total[k] = total[k] + v


@dataclass
class StepContext:
    task: NcdTaskSpec
    cfg: TrainConfig
    net_cfg: bb.NetworkConfig
    weights_disc: np.ndarray
    weights_over: np.ndarray
    total_steps: int


def _pseudo_targets(ctx: StepContext, state: TrainState, eps: float, z_novel, logits_novel,
                    prototypes, base_ids, novel_idx, n_base: int):
    """Targets for one head in one view plus the selection used."""
    cfg = ctx.cfg
    rho = prototypes.shape[1]
    pred, conf = head_confidences(logits_novel)
    if cfg.use_selection:
        tau = adaptive_thresholds(pred, conf, cfg.select_p, rho)
        _, sel = select_confident(None, pred, conf, tau)
    else:
        sel = np.arange(len(pred))
    if cfg.pseudo_labels == "argmax":
        pl = np.eye(rho)[pred[sel]]
        plan = pl.sum(axis=0) / max(len(sel), 1)
    else:
        queue = state.queue if cfg.use_queue else FeatureQueue(0, z_novel.shape[1])
        pl, plan = augment_and_truncate(z_novel[sel], queue, prototypes, eps, cfg.sk_iters,
                                        with_plan_mass=True)
    targets = HeadTargets.build(base_ids, n_base, pl, novel_idx[sel], rho)
    return targets, sel, pred, pl, plan


def _fixed_targets(fixed, base_ids, novel_idx, n_base: int, rho: int):
    """Targets from given hard novel labels (-1 marks a point without one)."""
    lab = fixed[novel_idx]
    has = lab >= 0
    pl = np.eye(rho)[lab[has]]
    return HeadTargets.build(base_ids, n_base, pl, novel_idx[has], rho), pl


def train_step(state: TrainState, batch, ctx: StepContext, fixed: Optional[np.ndarray] = None) -> LossReport:
    """One optimisation step on a batch of ``(cloud, aux_or_None)`` pairs; updates ``state``.

    ``fixed`` holds hard novel labels per concatenated point; when given it
    replaces the online pseudo-labels (and the queue is left untouched).
    """
    cfg, net_cfg, task = ctx.cfg, ctx.net_cfg, ctx.task
    clouds = [c for c, _ in batch]
    for cloud in clouds:
        validate_task(cloud, task)
    views = [augment_pair(c, cfg.policy, state.rng) for c in clouds]
    vb = [build_view([v[i] for v in views], cfg.voxel_size, net_cfg.neighborhood_k) for i in (0, 1)]

    labels = np.concatenate([c.labels for c in clouds])
    novel_mask = np.concatenate([c.novel_mask for c in clouds])
    base_ids = base_index(labels, novel_mask, task)
    novel_idx = np.flatnonzero(novel_mask)
    aux = None
    if all(a is not None for _, a in batch):
        aux = np.concatenate([a for _, a in batch])

    traces = [bb.forward(state.params, net_cfg, v.inputs, v.neighbors) for v in vb]
    p64 = traces[0].params64
    eps = epsilon_at(ctx_schedule(ctx), min(state.step, ctx.total_steps - 1))
    nb = net_cfg.n_base

    def head_outputs(tr, view, group):
        logits = tr.novel_logits if group == "novel" else tr.over_logits
        base = view.to_points(tr.base_logits)
        return [np.concatenate([base, view.to_points(l)], axis=1) for l in logits]

    groups = {"novel": net_cfg.n_novel_heads, "over": net_cfg.n_overcluster_heads}
    z_pts = [vb[i].to_points(traces[i].z) for i in (0, 1)]
    seg_total = 0.0
    per_head = {}
    grad_pts = [{"base": 0.0, "novel": [], "over": []} for _ in (0, 1)]
    mass = np.zeros((net_cfg.n_novel_heads, net_cfg.n_novel))
    plan_mass = np.zeros_like(mass)
    enqueue_sel = enqueue_pred = None
    n_selected = 0

    for group, n_heads in groups.items():
        if n_heads == 0:
            continue
        logits = [head_outputs(traces[i], vb[i], group) for i in (0, 1)]
        targets = [[], []]
        for h in range(n_heads):
            protos = p64[f"{group}.{h}.w"]
            for i in (0, 1):
                if fixed is not None:
                    t, pl = _fixed_targets(fixed, base_ids, novel_idx, nb, protos.shape[1])
                    if group == "novel":
                        mass[h] += pl.sum(axis=0)
                        n_selected += len(pl)
                elif novel_idx.size:
                    t, sel, pred, pl, plan = _pseudo_targets(
                        ctx, state, eps, z_pts[i][novel_idx], logits[i][h][novel_idx, nb:],
                        protos, base_ids, novel_idx, nb)
                    if group == "novel":
                        mass[h] += pl.sum(axis=0)
                        plan_mass[h] += plan
                        n_selected += sel.size
                        if h == 0 and i == 0:
                            enqueue_sel, enqueue_pred = sel, pred
                else:
                    t = HeadTargets.build(base_ids, nb, n_novel=protos.shape[1])
                targets[i].append(t)
        weights = ctx.weights_disc if group == "novel" else ctx.weights_over
        res = swapped_segmentation_loss(logits[0], logits[1], targets[0], targets[1], weights)
        seg_total += res.value
        for h, v in enumerate(res.per_head):
            per_head[f"{group}.{h}"] = v
        for i, grads in enumerate((res.grads_view1, res.grads_view2)):
            for g in grads:
                grad_pts[i]["base"] = grad_pts[i]["base"] + g[:, :nb]
                grad_pts[i][group].append(g[:, nb:])

    align = 0.0
    grad_proj = [None, None]
    if aux is not None and cfg.gamma > 0:
        mask = np.ones_like(novel_mask) if cfg.align_base_points else novel_mask
        proj = [vb[i].to_points(traces[i].proj_out) for i in (0, 1)]
        align, g1, g2 = alignment_loss(proj[0], proj[1], aux, aux, mask)
        grad_proj = [cfg.gamma * g1, cfg.gamma * g2]
    elif aux is not None:
        mask = np.ones_like(novel_mask) if cfg.align_base_points else novel_mask
        proj = [vb[i].to_points(traces[i].proj_out) for i in (0, 1)]
        align = alignment_loss(proj[0], proj[1], aux, aux, mask)[0]

    grads = bb.zeros_like_params(state.params)
    for i in (0, 1):
        gp = grad_pts[i]
        gb = None if np.isscalar(gp["base"]) else vb[i].to_voxels(gp["base"])
        part = bb.backward(
            traces[i], state.params,
            grad_base=gb,
            grad_novel=[vb[i].to_voxels(g) for g in gp["novel"]],
            grad_over=[vb[i].to_voxels(g) for g in gp["over"]],
            grad_proj=None if grad_proj[i] is None else vb[i].to_voxels(grad_proj[i]),
        )
        _add_grads(grads, part)

    lr = lr_at(cfg, state.step + 1, ctx.total_steps)
    sgd_update(state, grads, lr, cfg)

    if cfg.use_queue and enqueue_sel is not None and enqueue_sel.size:
        z_novel = z_pts[0][novel_idx]
        state.queue = enqueue(state.queue, z_novel[enqueue_sel], enqueue_pred[enqueue_sel],
                              cfg.queue_fraction, state.step, state.rng)

    report = LossReport(
        seg=seg_total,
        align=align,
        gamma=cfg.gamma,
        per_head=per_head,
        n_base_points=int((~novel_mask).sum()),
        n_novel_points=int(novel_idx.size),
        n_selected=n_selected,
        prototype_mass=mass,
    )
    state.log.append({
        "step": state.step,
        "lr": lr,
        "eps": eps,
        "seg": report.seg,
        "align": report.align,
        "total": report.total,
        "n_novel": report.n_novel_points,
        "n_selected": n_selected,
        "queue": len(state.queue),
        "prototype_mass": mass.tolist(),
        "plan_mass": plan_mass.tolist(),
    })
    state.step += 1
    return report


def ctx_schedule(ctx: StepContext):
    return ctx.cfg.sinkhorn.schedule(max(ctx.total_steps - 1, 0))


# -- full runs ---------------------------------------------------------------


@dataclass
class TrainResult:
    net_cfg: bb.NetworkConfig
    state: TrainState
    cfg: TrainConfig
    task: NcdTaskSpec

    @property
    def params(self) -> dict:
        return self.state.params

    def epoch_prototype_share(self, steps_per_epoch: int, key: str = "prototype_mass") -> np.ndarray:
        """Per epoch and discovery head, each prototype's share of pseudo-label mass.

        ``key="prototype_mass"`` counts the batch points' pseudo-labels only;
        ``key="plan_mass"`` counts the solver's full plan, queue columns included.
        """
        masses = np.array([r[key] for r in self.state.log])
        n_epochs = len(masses) // steps_per_epoch
        out = []
        for e in range(n_epochs):
            m = masses[e * steps_per_epoch:(e + 1) * steps_per_epoch].sum(axis=0)
            tot = m.sum(axis=1, keepdims=True)
            out.append(np.divide(m, tot, out=np.zeros_like(m), where=tot > 0))
        return np.array(out)


def steps_per_epoch(n_scenes: int, batch_size: int) -> int:
    return math.ceil(n_scenes / batch_size)


def epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, 2, epoch]).permutation(n)


def make_context(cfg: TrainConfig, scenes, task: NcdTaskSpec, net_cfg: bb.NetworkConfig) -> StepContext:
    freqs = base_frequencies([c for c, _ in scenes], task)
    total = cfg.epochs * steps_per_epoch(len(scenes), cfg.batch_size)
    return StepContext(
        task=task,
        cfg=cfg,
        net_cfg=net_cfg,
        weights_disc=class_weights(freqs, net_cfg.n_novel, cfg.base_weight_rule),
        weights_over=class_weights(freqs, net_cfg.n_overcluster, cfg.base_weight_rule),
        total_steps=max(total, 1),
    )


def train(cfg: TrainConfig, scenes, task: NcdTaskSpec, state: Optional[TrainState] = None,
          stop_at: Optional[int] = None, on_epoch: Optional[Callable] = None,
          fixed_labels: Optional[list] = None, init_params: Optional[dict] = None) -> TrainResult:
    """Train on ``scenes`` (a list of ``(cloud, aux_or_None)``).

    ``state`` resumes an earlier run; ``stop_at`` halts after that many
    total steps (used for mid-run checkpoints). ``fixed_labels`` gives one
    hard novel-label array per scene in place of online pseudo-labels;
    ``init_params`` starts a fresh run from existing weights.
    """
    if not scenes:
        raise ValueError("training set is empty")
    aux_dims = {a.shape[1] for _, a in scenes if a is not None}
    if len(aux_dims) > 1:
        raise ValueError(f"inconsistent auxiliary feature dims {sorted(aux_dims)}")
    aux_dim = aux_dims.pop() if aux_dims else 1
    net_cfg = cfg.network(task, input_dim_of([c for c, _ in scenes]), aux_dim)
    if fixed_labels is not None and len(fixed_labels) != len(scenes):
        raise ValueError("need one fixed label array per scene")
    if state is None:
        state = init_state(net_cfg, cfg)
        if init_params is not None:
            state.params = {k: np.array(v, dtype=np.float32) for k, v in init_params.items()}
    ctx = make_context(cfg, scenes, task, net_cfg)
    spe = steps_per_epoch(len(scenes), cfg.batch_size)
    total = cfg.epochs * spe
    end = total if stop_at is None else min(stop_at, total)
    with label_guard():
        while state.step < end:
            epoch, within = divmod(state.step, spe)
            order = epoch_order(cfg, epoch, len(scenes))
            idx = order[within * cfg.batch_size:(within + 1) * cfg.batch_size]
            fixed = None if fixed_labels is None else np.concatenate([fixed_labels[i] for i in idx])
            train_step(state, [scenes[i] for i in idx], ctx, fixed)
            if on_epoch is not None and state.step % spe == 0:
                on_epoch(epoch, state)
    return TrainResult(net_cfg, state, cfg, task)


# -- trainer checkpoints -----------------------------------------------------


def save_state(path, result: TrainResult):
    """Network checkpoint at ``path`` plus optimiser/queue/RNG buffers beside it."""
    path = Path(path)
    meta = {"task": result.task.to_dict(), "train_config": result.cfg.to_dict(), "step": result.state.step}
    bb.save_checkpoint(path, result.net_cfg, result.state.params, meta)
    st = result.state
    arrays = {f"momentum/{k}": v for k, v in st.momentum.items()}
    arrays["queue/features"] = st.queue.features.astype(np.float64)
    arrays["queue/classes"] = st.queue.classes
    arrays["queue/steps"] = st.queue.steps
    arrays["step"] = np.array(st.step)
    arrays["rng"] = np.array(json.dumps(st.rng.bit_generator.state))
    arrays["queue/capacity"] = np.array(st.queue.capacity)
    with open(str(path) + ".state.npz", "wb") as fh:
        np.savez(fh, **arrays)
    with open(str(path) + ".log.jsonl", "w", encoding="utf-8") as fh:
        for rec in st.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_state(path):
    """Inverse of :func:`save_state`: returns ``(net_cfg, state, meta)``."""
    net_cfg, params, meta = bb.load_checkpoint(path)
    with np.load(str(path) + ".state.npz") as data:
        momentum = {k.split("/", 1)[1]: data[k].astype(np.float32) for k in data.files if k.startswith("momentum/")}
        queue = FeatureQueue(int(data["queue/capacity"]), net_cfg.feature_dim,
                             data["queue/features"], data["queue/classes"].astype(np.int64),
                             data["queue/steps"].astype(np.int64))
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(str(data["rng"]))
        step = int(data["step"])
    log = []
    log_path = Path(str(path) + ".log.jsonl")
    if log_path.exists():
        log = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    return net_cfg, TrainState(params, momentum, queue, step, rng, log), meta
