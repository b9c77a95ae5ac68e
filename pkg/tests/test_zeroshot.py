import numpy as np
import pytest

from ncdseg.data_model import NcdTaskSpec
from ncdseg.errors import DimensionMismatch, ParseError, UnknownClass, ZeroEnsemble
from ncdseg.synth import class_anchors
from ncdseg.zeroshot import (
    ClassEmbeddingBank,
    ensemble_embed,
    load_bank,
    match_points,
    parse_bank,
    save_bank,
    synthetic_bank,
    zeroshot_report,
)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def axis_bank():
    return ClassEmbeddingBank({c: np.eye(4)[c:c + 1] for c in range(3)})


def test_ensemble_examples():
    v = unit([1.0, 2.0, 2.0])
    bank = ClassEmbeddingBank({0: v[None], 1: np.vstack([v, -v]), 2: np.tile(v, (5, 1))})
    np.testing.assert_allclose(ensemble_embed(bank, 0), v)
    with pytest.raises(ZeroEnsemble):
        ensemble_embed(bank, 1)
    np.testing.assert_allclose(ensemble_embed(bank, 2), v)
    with pytest.raises(UnknownClass):
        ensemble_embed(bank, 9)


def test_bank_validation():
    with pytest.raises(ValueError):
        ClassEmbeddingBank({0: np.array([[2.0, 0.0]])})
    with pytest.raises(DimensionMismatch):
        ClassEmbeddingBank({0: np.array([[1.0, 0.0]]), 1: np.array([[1.0, 0.0, 0.0]])})


def test_match_examples():
    bank = axis_bank()
    ids, score = match_points(np.eye(4)[[2]], bank)
    assert ids[0] == 2 and score[0] == pytest.approx(1.0)
    ids, score = match_points(np.eye(4)[[3]], bank)
    assert ids[0] == 0 and score[0] == 0.0
    with pytest.raises(DimensionMismatch):
        match_points(np.ones((2, 3)), bank)


def test_rescaling_invariance():
    rng = np.random.default_rng(0)
    bank = synthetic_bank(class_anchors(5, 8, 1), range(5), seed=1)
    f = rng.standard_normal((50, 8))
    scale = rng.uniform(0.1, 10, (50, 1))
    assert np.array_equal(match_points(f, bank)[0], match_points(f * scale, bank)[0])


def test_duplicate_synonym_keeps_ensemble():
    rng = np.random.default_rng(1)
    v = unit(rng.standard_normal((3, 6)))
    a = ClassEmbeddingBank({0: v})
    b = ClassEmbeddingBank({0: np.vstack([v, v])})
    np.testing.assert_allclose(ensemble_embed(a, 0), ensemble_embed(b, 0), atol=1e-15)


def accuracy(sigma, anchors, bank, n=4000):
    rng = np.random.default_rng(2)
    labels = rng.integers(0, anchors.shape[0], n)
    noise = rng.standard_normal((n, anchors.shape[1]))
    pred, _ = match_points(anchors[labels] + sigma * noise, bank)
    return float((pred == labels).mean())


def test_accuracy_non_increasing_in_noise():
    anchors = class_anchors(6, 16, 3)
    bank = synthetic_bank(anchors, range(6), sigma=0.05, seed=4)
    accs = [accuracy(s, anchors, bank) for s in (0.0, 0.1, 0.2, 0.4, 0.8, 1.6)]
    assert all(b <= a for a, b in zip(accs, accs[1:]))
    assert accs[0] == 1.0 and accs[-1] < 0.9


def test_report_on_anchor_features():
    anchors = class_anchors(3, 8, 5)
    bank = synthetic_bank(anchors, range(3), sigma=0.0)
    gt = np.array([0, 1, 2, 2, -1])
    feats = anchors[np.clip(gt, 0, None)]
    rep = zeroshot_report([feats], [gt], bank, NcdTaskSpec((0,), (1, 2)))
    assert rep.miou_all == 1.0


def test_bank_round_trip(tmp_path):
    bank = synthetic_bank(class_anchors(3, 5, 0), [0, 2], n_synonyms=3, names={0: "wall", 2: "door"})
    save_bank(tmp_path / "b.ncdbank", bank)
    back = load_bank(tmp_path / "b.ncdbank")
    assert back.class_ids == [0, 2]
    assert back.synonyms[2] == ("door", "door-1", "door-2")
    for c in back.class_ids:
        np.testing.assert_allclose(back.vectors[c], bank.vectors[c], atol=1e-8)
    save_bank(tmp_path / "c.ncdbank", back)
    assert load_bank(tmp_path / "c.ncdbank").vectors[0].shape == (3, 5)


def test_bank_parse_errors():
    with pytest.raises(ParseError):
        parse_bank("")
    with pytest.raises(ParseError):
        parse_bank("ncdbank v1 1 2\nclass 0 2 a\n1 0\n")
    with pytest.raises(ParseError):
        parse_bank("ncdbank v1 1 2\nclass 0 1 a\n1 0 0\n")
    with pytest.raises(ParseError):
        parse_bank("ncdbank v1 1 2\nclass 0 1 a\n1 0\nclass 1 1 b\n0 1\n")
