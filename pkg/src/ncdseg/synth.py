"""Seeded synthetic scenes and the named scenarios used for desk-scale experiments.

Auxiliary features stand in for a frozen semantic feature provider: every
point gets its class's anchor vector plus Gaussian noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data_model import LabeledCloud, NcdTaskSpec
from .dataset_io import quantize

KINDS = ("plane", "box", "cylinder", "sphere", "scatter")


@dataclass(frozen=True)
class SynthClass:
    """One object class in a scene.

    ``size`` is per kind: plane (sx, sy); box and scatter (sx, sy, sz);
    cylinder (radius, height); sphere (radius,). ``center_range`` bounds the
    object's base centre as ((x0, x1), (y0, y1), (z0, z1)). A ``color`` of
    None draws one random colour per object instance.
    """

    class_id: int
    kind: str
    n_points: int
    size: tuple = (1.0, 1.0, 1.0)
    center_range: tuple = ((-1.0, 1.0), (-1.0, 1.0), (0.0, 0.0))
    color: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.n_points <= 0:
            raise ValueError("per-class point budget must be positive")


@dataclass(frozen=True)
class SynthSceneSpec:
    classes: tuple
    novel_classes: tuple = ()
    noise_sigma: float = 0.005
    color_sigma: float = 0.05
    aux_embedding_sigma: float = 0.2
    aux_dim: int = 16
    seed: int = 0
    anchor_seed: int = 1234
    with_color: bool = True

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "novel_classes", tuple(self.novel_classes))
        if not self.classes:
            raise ValueError("scene needs at least one class")
        if self.noise_sigma < 0 or self.aux_embedding_sigma < 0 or self.color_sigma < 0:
            raise ValueError("noise scales must be non-negative")
        if self.aux_dim <= 0:
            raise ValueError("aux_dim must be positive")


def class_anchors(n_ids: int, dim: int, anchor_seed: int) -> np.ndarray:
    """Unit anchor vector per class id, shared by every scene with the same seed."""
    a = np.random.default_rng(anchor_seed).standard_normal((n_ids, dim))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _sample_shape(kind: str, size: tuple, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "plane":
        sx, sy = size[:2]
        return np.column_stack([rng.uniform(-sx / 2, sx / 2, n), rng.uniform(-sy / 2, sy / 2, n), np.zeros(n)])
    if kind == "scatter":
        sx, sy, sz = size
        return np.column_stack([rng.uniform(-sx / 2, sx / 2, n), rng.uniform(-sy / 2, sy / 2, n), rng.uniform(0, sz, n)])
    if kind == "cylinder":
        r, h = size[:2]
        t = rng.uniform(0, 2 * math.pi, n)
        return np.column_stack([r * np.cos(t), r * np.sin(t), rng.uniform(0, h, n)])
    if kind == "sphere":
        r = size[0]
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return r * v + np.array([0.0, 0.0, r])
    # box surface, faces chosen in proportion to their area
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, (n, 3)) * np.array([sx, sy, sz])
    u[:, 2] += sz / 2
    axis = face // 2
    side = np.where(face % 2 == 0, -0.5, 0.5)
    half = np.array([sx, sy, sz])[axis] * side
    u[np.arange(n), axis] = half + np.where(axis == 2, sz / 2, 0.0)
    return u


def generate_synthetic_scene(spec: SynthSceneSpec):
    """Returns ``(cloud, aux_features)``; identical specs give identical outputs."""
    rng = np.random.default_rng(spec.seed)
    coords, colors, labels = [], [], []
    for cls in spec.classes:
        pts = _sample_shape(cls.kind, cls.size, cls.n_points, rng)
        yaw = rng.uniform(0, 2 * math.pi)
        c, s = math.cos(yaw), math.sin(yaw)
        pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
        center = np.array([rng.uniform(lo, hi) for lo, hi in cls.center_range])
        pts = pts + center + rng.normal(0.0, spec.noise_sigma, pts.shape)
        base = np.asarray(cls.color) if cls.color is not None else rng.uniform(0.1, 0.9, 3)
        col = np.clip(base + rng.normal(0.0, spec.color_sigma, (cls.n_points, 3)), 0.0, 1.0)
        coords.append(pts)
        colors.append(col)
        labels.append(np.full(cls.n_points, cls.class_id))
    labels = np.concatenate(labels)
    novel_mask = np.isin(labels, np.asarray(spec.novel_classes, dtype=np.int64))
    cloud = LabeledCloud(
        quantize(np.concatenate(coords)),
        labels,
        novel_mask,
        quantize(np.concatenate(colors)) if spec.with_color else None,
        name=f"synth-{spec.seed}",
    )
    anchors = class_anchors(int(labels.max()) + 1, spec.aux_dim, spec.anchor_seed)
    aux = anchors[labels] + rng.normal(0.0, 1.0, (labels.size, spec.aux_dim)) * spec.aux_embedding_sigma
    return cloud, quantize(aux)


# -- named scenarios ----------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    task: NcdTaskSpec
    train: list
    val: list
    # Training overrides that suit the scenario's scale.
    train_overrides: dict = field(default_factory=dict)


# A few hundred points per scene and tens of scenes give far fewer SGD steps
# than a full dataset, so desk-scale runs take larger, more frequent steps.
# The queue is sized to one or two batches of selected novel features; a
# default-sized queue would hold several epochs of stale features.
DESK_OVERRIDES = {"lr_max": 0.1, "batch_size": 2, "queue_capacity": 512}

_AREA = ((-1.6, 1.6), (-1.6, 1.6), (0.0, 0.0))

# class id -> (name, kind, size, centre range, colour)
_CATALOG = {
    0: ("ground", "plane", (4.0, 4.0), ((-0.2, 0.2), (-0.2, 0.2), (0.0, 0.0)), (0.55, 0.45, 0.30)),
    1: ("building", "box", (1.0, 1.0, 1.6), _AREA, (0.80, 0.80, 0.80)),
    2: ("pole", "cylinder", (0.08, 1.6), _AREA, (0.20, 0.20, 0.85)),
    3: ("car", "box", (0.9, 0.45, 0.35), _AREA, (0.85, 0.15, 0.15)),
    4: ("bush", "scatter", (0.7, 0.7, 0.6), _AREA, (0.15, 0.70, 0.20)),
    5: ("ball", "sphere", (0.3,), _AREA, (0.95, 0.85, 0.10)),
    6: ("bin", "cylinder", (0.25, 0.55), _AREA, (0.55, 0.15, 0.65)),
    7: ("hedge", "box", (1.2, 0.25, 0.5), _AREA, (0.10, 0.55, 0.55)),
}


def _task(name: str, base, novel) -> NcdTaskSpec:
    return NcdTaskSpec(
        base_classes=tuple(base),
        novel_classes=tuple(novel),
        class_names={c: _CATALOG[c][0] for c in tuple(base) + tuple(novel)},
        split_name=name,
        dataset="synthetic",
    )


def _class(cid: int, n: int, random_color: bool = False) -> SynthClass:
    _, kind, size, center, color = _CATALOG[cid]
    return SynthClass(cid, kind, n, size, center, None if random_color else color)


def _scenes(specs) -> list:
    return [generate_synthetic_scene(s) for s in specs]


def separable_scenario(n_train: int = 64, n_val: int = 16, seed: int = 0,
                       aux_sigma: float = 0.2, n_novel: int = 3) -> Scenario:
    """Base ground/building/pole/car; novel classes with distinct colour and shape."""
    base = (0, 1, 2, 3)
    novel = (4, 5, 6, 7)[:n_novel]
    budget = {0: 160, 1: 120, 2: 50, 3: 80}

    def spec(i):
        classes = [_class(c, budget[c]) for c in base] + [_class(c, 90) for c in novel]
        return SynthSceneSpec(classes, novel, aux_embedding_sigma=aux_sigma, seed=seed * 100003 + i)

    task = _task(f"synth-separable-{len(novel)}", base, novel)
    return Scenario(task.split_name, task, _scenes(spec(i) for i in range(n_train)),
                    _scenes(spec(10_000 + i) for i in range(n_val)), DESK_OVERRIDES)


def four_novel_scenario(n_train: int = 32, n_val: int = 8, seed: int = 0) -> Scenario:
    """Three base classes and four novel classes."""
    base = (0, 1, 3)
    novel = (2, 4, 5, 6)
    budget = {0: 160, 1: 120, 3: 80}

    def spec(i):
        classes = [_class(c, budget[c]) for c in base] + [_class(c, 70) for c in novel]
        return SynthSceneSpec(classes, novel, seed=seed * 100003 + i)

    task = _task("synth-four-novel", base, novel)
    return Scenario(task.split_name, task, _scenes(spec(i) for i in range(n_train)),
                    _scenes(spec(10_000 + i) for i in range(n_val)), DESK_OVERRIDES)


LONGTAIL_PRESENCE = (0.9, 0.5, 0.3)
LONGTAIL_BUDGET = (140, 70, 40)


def longtail_scenario(n_train: int = 48, n_val: int = 16, seed: int = 0,
                      aux_sigma: float = 0.1, random_colors: bool = True) -> Scenario:
    """Long-tailed novel classes that appear in only some scenes.

    Novel objects get a random colour per instance, so only geometry (and
    the auxiliary features) tell them apart.
    """
    base = (0, 1, 2, 3)
    novel = (4, 5, 6)
    budget = {0: 160, 1: 120, 2: 50, 3: 80}
    scene_rng = np.random.default_rng(seed + 7919)

    def spec(i, present):
        classes = [_class(c, budget[c]) for c in base]
        classes += [_class(c, LONGTAIL_BUDGET[j], random_color=random_colors)
                    for j, c in enumerate(novel) if present[j]]
        return SynthSceneSpec(classes, novel, aux_embedding_sigma=aux_sigma, seed=seed * 100003 + i)

    def presence():
        p = scene_rng.random(3) < np.asarray(LONGTAIL_PRESENCE)
        if not p.any():
            p[0] = True
        return p

    train = _scenes(spec(i, presence()) for i in range(n_train))
    # Validation scenes contain every novel class so each IoU is defined.
    val = _scenes(spec(10_000 + i, (True, True, True)) for i in range(n_val))
    task = _task("synth-longtail", base, novel)
    return Scenario(task.split_name, task, train, val, dict(DESK_OVERRIDES, epochs=25))


SCENARIOS = {
    "separable": separable_scenario,
    "four-novel": four_novel_scenario,
    "longtail": longtail_scenario,
}


def make_scenario(name: str, **kwargs) -> Scenario:
    try:
        builder = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return builder(**kwargs)
