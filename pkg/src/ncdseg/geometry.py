"""Voxel quantisation and the paired random augmentations used for swapped prediction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .data_model import LabeledCloud


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation_z_range: tuple = (0.0, 2.0 * math.pi)
    scale_range: tuple = (0.95, 1.05)
    flip_prob_x: float = 0.5
    flip_prob_y: float = 0.5
    jitter_sigma: float = 0.01

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"scale range must lie in (0, inf), got {self.scale_range}")
        if self.rotation_z_range[0] > self.rotation_z_range[1]:
            raise ValueError("rotation range is reversed")
        for p in (self.flip_prob_x, self.flip_prob_y):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability {p} outside [0, 1]")
        if self.jitter_sigma < 0:
            raise ValueError("jitter sigma must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls((0.0, 0.0), (1.0, 1.0), 0.0, 0.0, 0.0)


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(coords: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """One random flip/rotate/scale/jitter transform of an ``(n, 3)`` array."""
    theta = rng.uniform(*policy.rotation_z_range)
    scale = rng.uniform(*policy.scale_range)
    flip_x = rng.random() < policy.flip_prob_x
    flip_y = rng.random() < policy.flip_prob_y
    out = coords.copy()
    if flip_x:
        out[:, 0] = -out[:, 0]
    if flip_y:
        out[:, 1] = -out[:, 1]
    if theta != 0.0:
        out = out @ rotation_z(theta).T
    if scale != 1.0:
        out = out * scale
    if policy.jitter_sigma > 0:
        out = out + rng.normal(0.0, policy.jitter_sigma, size=out.shape)
    return out


def augment_pair(cloud: LabeledCloud, policy: AugmentationPolicy, rng: np.random.Generator):
    """Two independently augmented views with identity point correspondence."""
    v1 = cloud.with_coords(augment(cloud.coords, policy, rng))
    v2 = cloud.with_coords(augment(cloud.coords, policy, rng))
    return v1, v2


@dataclass(frozen=True)
class VoxelGrid:
    voxel_size: float
    keys: np.ndarray             # (n_voxels, 3) integer grid coordinates
    representatives: np.ndarray  # (n_voxels,) lowest point index in each voxel
    point_to_voxel: np.ndarray   # (n_points,)

    @property
    def n_voxels(self) -> int:
        return self.representatives.shape[0]

    def broadcast(self, per_voxel: np.ndarray) -> np.ndarray:
        """Copy per-voxel values back to every member point."""
        return per_voxel[self.point_to_voxel]

    def reduce(self, per_point: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`broadcast`: sum member-point values per voxel."""
        out = np.zeros((self.n_voxels,) + per_point.shape[1:], dtype=per_point.dtype)
        np.add.at(out, self.point_to_voxel, per_point)
        return out


def voxelize(coords, voxel_size: float) -> VoxelGrid:
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if isinstance(coords, LabeledCloud):
        coords = coords.coords
    keys = np.floor(np.asarray(coords) / voxel_size).astype(np.int64)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    # Order voxels by their representative so outputs follow point order.
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return VoxelGrid(
        voxel_size=float(voxel_size),
        keys=uniq[order],
        representatives=first[order],
        point_to_voxel=rank[inverse.reshape(-1)],
    )


def knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    """``(n, k)`` indices of each point's ``k`` nearest neighbours, itself included."""
    n = coords.shape[0]
    k = max(1, min(k, n))
    if k == 1:
        return np.arange(n)[:, None]
    _, idx = cKDTree(coords).query(coords, k=k)
    idx = idx.reshape(n, k)
    # Duplicate coordinates can push a point out of its own neighbour list.
    self_col = np.arange(n)
    has_self = (idx == self_col[:, None]).any(axis=1)
    idx[~has_self, -1] = self_col[~has_self]
    return idx
