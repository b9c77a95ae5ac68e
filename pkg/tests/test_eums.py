import math

import numpy as np
import pytest

from ncdseg import data_model
from ncdseg.data_model import LabeledCloud
from ncdseg.errors import NoNovelPoints, TooFewPoints
from ncdseg.eums import (
    EumsConfig,
    baseline_train_config,
    entropy_filter,
    kmeans,
    merge_overclusters,
    propagate_nn,
    run_eums,
    soft_entropy,
    subsample_novel,
)
from ncdseg.synth import make_scenario
from ncdseg.trainer import TrainConfig


def novel_cloud(n_novel, n_base=5):
    n = n_novel + n_base
    return LabeledCloud(np.zeros((n, 3)), [0] * n_base + [1] * n_novel, [False] * n_base + [True] * n_novel)


def test_subsample_examples():
    rng = np.random.default_rng(0)
    assert len(subsample_novel(novel_cloud(100), 0.3, 1000, rng)) == 30
    assert len(subsample_novel(novel_cloud(10000), 0.3, 1000, rng)) == 1000
    c = novel_cloud(40)
    idx = subsample_novel(c, 1.0, 1000, rng)
    assert list(idx) == list(np.flatnonzero(c.novel_mask))


def test_subsample_distinct_novel_and_errors():
    c = novel_cloud(57)
    idx = subsample_novel(c, 0.5, 1000, np.random.default_rng(1))
    assert len(set(idx)) == len(idx) == 29
    assert c.novel_mask[idx].all()
    with pytest.raises(NoNovelPoints):
        subsample_novel(novel_cloud(0), 0.3, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        EumsConfig(subsample_ratio=0.0)
    with pytest.raises(ValueError):
        EumsConfig(cap=0)


def test_kmeans_separable_blobs():
    rng = np.random.default_rng(2)
    a = rng.normal(0, 0.01, (40, 3))
    b = rng.normal(0, 0.01, (40, 3)) + [1.0, 0, 0]
    x = np.vstack([a, b])
    truth = np.repeat([0, 1], 40)
    res = kmeans(x, 2, seed=0)
    errors = min(int((res.assignments != truth).sum()), int((res.assignments != 1 - truth).sum()))
    assert errors == 0


def test_kmeans_k_equals_n():
    x = np.random.default_rng(3).standard_normal((6, 2))
    res = kmeans(x, 6)
    assert res.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(res.assignments) == list(range(6))


def test_kmeans_identical_points():
    res = kmeans(np.ones((5, 3)), 2)
    assert res.inertia == 0.0
    assert np.isfinite(res.centroids).all()
    assert set(res.assignments) <= {0, 1}


def test_kmeans_inertia_non_increasing_and_errors():
    x = np.random.default_rng(4).standard_normal((200, 4))
    res = kmeans(x, 5, seed=1)
    assert all(b <= a + 1e-9 for a, b in zip(res.history, res.history[1:]))
    assert res.n_iter <= 100
    with pytest.raises(TooFewPoints):
        kmeans(x[:3], 4)


def test_kmeans_no_empty_clusters():
    x = np.vstack([np.zeros((10, 2)), [[5.0, 5.0]]])
    res = kmeans(x, 3, seed=0)
    assert (np.bincount(res.assignments, minlength=3) > 0).all()


def test_entropy_examples():
    assert soft_entropy(np.array([[1.0, 1.0, 1.0]]))[0] == pytest.approx(math.log(3))
    d = np.random.default_rng(5).random((10, 3))
    assign = d.argmin(axis=1)
    assert entropy_filter(d, assign, 1.0).all()
    # two points in one cluster: the confident one survives a 0.5 cut
    d = np.array([[0.0, 5.0], [1.0, 1.05]])
    assert list(entropy_filter(d, [0, 0], 0.5)) == [True, False]
    with pytest.raises(ValueError):
        entropy_filter(d, [0, 0], 0.0)


def test_equidistant_point_filtered_first():
    d = np.array([[0.0, 3.0], [0.2, 2.0], [1.0, 1.0]])
    keep = entropy_filter(d, [0, 0, 0], 0.6)
    assert list(keep) == [True, True, False]


def test_merge_overclusters():
    cent = np.array([[1.0, 0], [0, 1.0], [0.9, 0.1], [0.1, 0.9]])
    assign = np.array([0, 0, 0, 1, 1, 1, 2, 3])
    merged = merge_overclusters(cent, assign, 2)
    assert list(merged) == [0, 0, 0, 1, 1, 1, 0, 1]


def test_propagate_examples():
    coords = np.array([[0, 0, 0], [0.1, 0, 0], [0.5, 0, 0]])
    out = propagate_nn([0], [7], coords, [0, 1, 2])
    assert list(out) == [7, 7, -1]
    # point 2 is equidistant from sources 0 and 1; the lower source wins
    coords = np.array([[-1.0, 0, 0], [1.0, 0, 0], [0, 0, 0]])
    out = propagate_nn([0, 1], [4, 5], coords, [2])
    assert list(out) == [4, 5, 4]
    # every candidate already a source: coverage unchanged
    out = propagate_nn([0, 1, 2], [1, 2, 3], coords, [0, 1, 2])
    assert list(out) == [1, 2, 3]


def test_propagate_distance_tie_lowest_candidate():
    coords = np.array([[0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
    out = propagate_nn([0], [9], coords, [2, 1])
    assert list(out) == [9, 9, -1]


def test_baseline_config():
    c = baseline_train_config(TrainConfig())
    assert c.n_heads == 1 and c.n_overcluster_heads == 0 and c.gamma == 0 and not c.use_queue


def test_run_on_small_scene_beats_chance():
    sc = make_scenario("separable", n_train=16, n_val=3, seed=2)
    cfg = TrainConfig(**dict(sc.train_overrides, hidden_dims=(32, 32), feature_dim=16,
                             neighborhood_k=8))
    before = data_model.evaluation_reads()
    out = run_eums(sc.train, sc.task, cfg, EumsConfig(pretrain_epochs=8, finetune_epochs=8),
                   [c for c, _ in sc.val])
    # only the final evaluation touches ground truth (one read per validation cloud)
    assert data_model.evaluation_reads() - before == 3
    assert len(out.pseudo_labels) == 16
    labelled = np.concatenate(out.pseudo_labels)
    assert set(labelled[labelled >= 0]) <= {0, 1, 2}
    for (cloud, _), pl in zip(sc.train, out.pseudo_labels):
        assert (pl[~cloud.novel_mask] == -1).all()
    assert out.report.miou_novel > 0.1
