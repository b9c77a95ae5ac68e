import math
from fractions import Fraction

import numpy as np
import pytest

from ncdseg import backbone as bb
from ncdseg.data_model import LabeledCloud, NcdTaskSpec
from ncdseg.errors import IdOutOfRange, ShapeMismatch
from ncdseg.evaluation import (
    accumulate,
    evaluate,
    hungarian_map,
    iou_per_class,
    new_confusion,
    score_predictions,
)
from oracles import brute_force_mapping, hand_iou

TASK = NcdTaskSpec((0, 1), (2, 3, 4), {0: "floor", 1: "wall", 2: "a", 3: "b", 4: "c"})


def test_accumulate_examples():
    c = accumulate(new_confusion(2), [0, 0, 0], [0, 0, 0])
    assert c[0, 0] == 3
    assert np.array_equal(accumulate(c, [], []), c)
    d = accumulate(new_confusion(2), [0, 1], [1, 0])
    assert d.tolist() == [[0, 1], [1, 0]]
    with pytest.raises(IdOutOfRange):
        accumulate(new_confusion(2), [0], [2])
    with pytest.raises(ShapeMismatch):
        accumulate(new_confusion(2), [0, 1], [0])


def test_iou_examples():
    np.testing.assert_array_equal(iou_per_class(np.diag([4, 2, 7])), [1, 1, 1])
    assert list(iou_per_class(np.array([[3, 1], [1, 3]]))) == [0.6, 0.6]
    out = iou_per_class(np.array([[2, 0, 0], [0, 0, 0], [1, 0, 5]]))
    assert math.isnan(out[1])


def test_iou_matches_hand_computation():
    rng = np.random.default_rng(0)
    for _ in range(50):
        conf = rng.integers(0, 6, (4, 4))
        conf[rng.integers(4)] = 0
        got = iou_per_class(conf)
        for g, h in zip(got, hand_iou(conf.tolist())):
            if h is None:
                assert math.isnan(g)
            else:
                assert g == float(h)


def test_mapping_examples():
    assert list(hungarian_map(np.array([[0.7, 0.1], [0.2, 0.6]]))) == [0, 1]
    assert list(hungarian_map(np.array([[0.1, 0.9], [0.8, 0.1]]))) == [1, 0]
    # all ties: the lowest prototype takes the lowest class
    assert list(hungarian_map(np.zeros((3, 3)))) == [0, 1, 2]
    with pytest.raises(ShapeMismatch):
        hungarian_map(np.zeros((2, 3)))


def test_mapping_matches_brute_force_seed3():
    iou = np.random.default_rng(3).random((4, 4))
    assert list(hungarian_map(iou)) == list(brute_force_mapping(iou)[0])


def test_mapping_matches_brute_force_up_to_six():
    rng = np.random.default_rng(1)
    for n in range(1, 7):
        for _ in range(15):
            iou = rng.random((n, n))
            if rng.random() < 0.3:
                iou = rng.integers(0, 3, (n, n)) / 4  # many ties
            perm, total = brute_force_mapping(iou)
            got = hungarian_map(iou)
            assert iou[np.arange(n), got].sum() == pytest.approx(total, abs=1e-12)
            assert list(got) == list(perm)


def random_preds(seed, n=300):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 5, n)
    # prototypes 0,1,2 (columns 2,3,4) mostly track classes 4,2,3
    col = {0: 0, 1: 1, 2: 3, 3: 4, 4: 2}
    pred = np.array([col[g] if rng.random() < 0.8 else rng.integers(0, 5) for g in gt])
    return gt, pred


def test_mapping_recovers_permuted_prototypes():
    gt, pred = random_preds(0)
    rep = score_predictions([gt], [pred], TASK)
    assert rep.mapping == {0: 4, 1: 2, 2: 3}
    assert rep.miou_novel > 0.5


def test_oracle_and_constant_predictors():
    gt = np.array([0, 0, 0, 1, 2, 3, 4, 4])
    oracle = np.array([0, 0, 0, 1, 2, 3, 4, 4])
    rep = score_predictions([gt], [oracle], TASK)
    assert rep.miou_all == rep.miou_base == rep.miou_novel == 1.0
    two = NcdTaskSpec((0, 1), (2,))
    gt = np.array([0, 0, 0, 1])
    rep = score_predictions([gt], [np.zeros(4, int)], two)
    assert rep.per_class[0] == 0.75 and rep.per_class[1] == 0.0


def test_partition_and_order_invariance():
    gt, pred = random_preds(1)
    whole = score_predictions([gt], [pred], TASK)
    parts = score_predictions([gt[:100], gt[100:]], [pred[:100], pred[100:]], TASK)
    perm = np.random.default_rng(2).permutation(len(gt))
    shuffled = score_predictions([gt[perm]], [pred[perm]], TASK)
    for r in (parts, shuffled):
        assert r.per_class == whole.per_class and r.mapping == whole.mapping


def test_prototype_relabelling_is_absorbed():
    gt, pred = random_preds(2)
    base = score_predictions([gt], [pred], TASK)
    relabel = np.array([0, 1, 4, 2, 3])  # permute novel columns
    other = score_predictions([gt], [relabel[pred]], TASK)
    assert other.per_class == base.per_class


def test_means_and_report_text():
    conf_gt = np.array([0, 0, 1, 2, 3])
    rep = score_predictions([conf_gt], [np.array([0, 1, 1, 2, 3])], NcdTaskSpec((0, 1), (2, 3)))
    assert rep.per_class[0] == 0.5 and rep.per_class[1] == 0.5
    assert rep.miou_base == 0.5 and rep.miou_novel == 1.0 and rep.miou_all == 0.75
    text = rep.format()
    assert "mIoU_novel\t1.0000" in text and "mapping" in text
    assert rep.plot_data().splitlines()[0] == "class\tiou"


def test_hand_iou_fraction_example():
    assert hand_iou([[3, 1], [1, 3]]) == [Fraction(3, 5), Fraction(3, 5)]


def test_evaluate_runs_discovery_heads_only():
    rng = np.random.default_rng(0)
    task = NcdTaskSpec((0, 1), (2, 3))
    cfg = bb.NetworkConfig(n_base=2, n_novel=2, input_dim=3 + bb.SHAPE_DIM, hidden_dims=(8,),
                           feature_dim=4, n_novel_heads=3, neighborhood_k=4)
    params = bb.init_params(cfg, 0)
    clouds = [LabeledCloud(rng.uniform(0, 1, (60, 3)), rng.integers(0, 4, 60),
                           np.zeros(60, bool)) for _ in range(2)]
    rep = evaluate(params, cfg, clouds, task, voxel_size=0.05)
    assert 0 <= rep.head < 3
    assert set(rep.mapping.values()) == {2, 3}
    fixed = evaluate(params, cfg, clouds, task, head=2, voxel_size=0.05)
    assert fixed.head == 2
    with pytest.raises(ShapeMismatch):
        evaluate(params, cfg, clouds, NcdTaskSpec((0,), (1, 2, 3)))
