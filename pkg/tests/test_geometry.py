import math

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from ncdseg.data_model import LabeledCloud
from ncdseg.geometry import (
    AugmentationPolicy,
    augment,
    augment_pair,
    knn_indices,
    rotation_z,
    voxelize,
)


def random_cloud(n=50, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledCloud(rng.uniform(-1, 1, (n, 3)), rng.integers(0, 3, n), rng.random(n) < 0.3)


def test_identity_policy():
    c = random_cloud()
    v1, v2 = augment_pair(c, AugmentationPolicy.identity(), np.random.default_rng(0))
    assert v1.same_as(c) and v2.same_as(c)


def test_quarter_turn():
    np.testing.assert_allclose(rotation_z(math.pi / 2) @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-9)
    pol = AugmentationPolicy((math.pi / 2, math.pi / 2), (1.0, 1.0), 0.0, 0.0, 0.0)
    out = augment(np.array([[1.0, 0.0, 0.0]]), pol, np.random.default_rng(0))
    np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-9)


def test_replayed_seed_gives_same_pair():
    c = random_cloud()
    a = augment_pair(c, AugmentationPolicy(), np.random.default_rng(3))
    b = augment_pair(c, AugmentationPolicy(), np.random.default_rng(3))
    assert a[0].same_as(b[0]) and a[1].same_as(b[1])
    assert not a[0].same_as(a[1])


def test_labels_and_count_preserved():
    c = random_cloud()
    for v in augment_pair(c, AugmentationPolicy(), np.random.default_rng(1)):
        assert len(v) == len(c)
        assert np.array_equal(v.labels, c.labels)
        assert np.array_equal(v.novel_mask, c.novel_mask)


def test_distances_scale_uniformly():
    pol = AugmentationPolicy(jitter_sigma=0.0)
    rng = np.random.default_rng(2)
    for seed in range(10):
        x = random_cloud(30, seed).coords
        d0 = pdist(x)
        ratio = pdist(augment(x, pol, rng)) / d0
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-6)
        assert 0.95 <= ratio[0] <= 1.05


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(scale_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentationPolicy(flip_prob_x=1.5)
    with pytest.raises(ValueError):
        AugmentationPolicy(jitter_sigma=-1.0)


def test_voxel_examples():
    g = voxelize(np.array([[0.01, 0, 0], [0.02, 0, 0]]), 0.05)
    assert g.n_voxels == 1 and list(g.representatives) == [0]
    g = voxelize(np.array([[0.01, 0, 0], [0.06, 0, 0]]), 0.05)
    assert g.n_voxels == 2
    # floor(coord / size) anchors cells at the origin, so keep the cloud in one octant
    g = voxelize(random_cloud().coords + 1.0, 100.0)
    assert g.n_voxels == 1 and (g.point_to_voxel == 0).all()


def test_voxel_representative_is_lowest_index():
    x = random_cloud(200, 4).coords
    g = voxelize(x, 0.3)
    for v in range(g.n_voxels):
        assert g.representatives[v] == np.flatnonzero(g.point_to_voxel == v).min()
    # broadcast covers every point; reduce is its adjoint
    vals = np.random.default_rng(0).random(g.n_voxels)
    pts = np.random.default_rng(1).random(200)
    assert g.broadcast(vals).shape == (200,)
    assert np.isclose(g.broadcast(vals) @ pts, vals @ g.reduce(pts))
    with pytest.raises(ValueError):
        voxelize(x, 0.0)


def test_knn_includes_self():
    x = np.vstack([random_cloud(20).coords, random_cloud(20).coords[:3]])  # duplicates
    nbr = knn_indices(x, 4)
    assert nbr.shape == (23, 4)
    assert all(i in nbr[i] for i in range(23))
    assert knn_indices(x[:1], 16).shape == (1, 1)
