import numpy as np
import pytest

from ncdseg.data_model import (
    UNLABELED,
    LabeledCloud,
    NcdTaskSpec,
    evaluation_reads,
    is_normalized,
    label_guard,
    normalize_rows,
    validate_task,
)
from ncdseg.errors import (
    DisjointnessViolation,
    LabelOutOfSplit,
    LengthMismatch,
    NormalizationDegenerate,
    TaintError,
)


def cloud(labels, mask, colors=False):
    n = len(labels)
    xyz = np.arange(3 * n, dtype=float).reshape(n, 3)
    return LabeledCloud(xyz, labels, mask, np.full((n, 3), 0.5) if colors else None)


def test_consistent_split_accepted():
    c = cloud([0, 1, 2, 3], [0, 0, 1, 1])
    task = NcdTaskSpec((0, 1), (2, 3))
    assert validate_task(c, task) == (c, task)


def test_overlapping_sets_rejected():
    with pytest.raises(DisjointnessViolation):
        NcdTaskSpec((0, 1), (1, 2))


def test_base_point_with_novel_id_rejected():
    with pytest.raises(LabelOutOfSplit):
        validate_task(cloud([0, 2], [0, 0]), NcdTaskSpec((0, 1), (2,)))


def test_validate_is_idempotent():
    c, t = cloud([0, 1, 2], [0, 0, 1]), NcdTaskSpec((0, 1), (2,))
    assert validate_task(*validate_task(c, t)) == validate_task(c, t)


def test_length_checks():
    with pytest.raises(LengthMismatch):
        LabeledCloud(np.zeros((3, 3)), [0, 1], [0, 0, 0])
    with pytest.raises(LengthMismatch):
        LabeledCloud(np.zeros((0, 3)), [], [])
    with pytest.raises(LengthMismatch):
        LabeledCloud(np.zeros((2, 3)), [0, 1], [0, 0], colors=np.zeros((3, 3)))


def test_training_view_hides_novel_ids():
    c = cloud([0, 1, 2, 3], [0, 0, 1, 1])
    assert list(c.labels) == [0, 1, UNLABELED, UNLABELED]
    assert list(c.evaluation_labels()) == [0, 1, 2, 3]


def test_guard_blocks_ground_truth():
    c = cloud([0, 2], [0, 1])
    before = evaluation_reads()
    with label_guard():
        with pytest.raises(TaintError):
            c.evaluation_labels()
        c.labels  # the training view stays readable
    c.evaluation_labels()
    assert evaluation_reads() == before + 1


def test_arrays_are_read_only():
    c = cloud([0, 1], [0, 0])
    with pytest.raises(ValueError):
        c.coords[0, 0] = 5.0
    with pytest.raises(ValueError):
        c.labels[0] = 1


def test_with_coords_and_subset():
    c = cloud([0, 1, 2], [0, 0, 1], colors=True)
    moved = c.with_coords(c.coords + 1.0)
    assert np.array_equal(moved.labels, c.labels) and moved.has_color
    sub = c.subset([2, 0])
    assert list(sub.evaluation_labels()) == [2, 0]
    assert list(sub.novel_mask) == [True, False]
    assert c.same_as(c.subset([0, 1, 2]))
    assert not c.same_as(sub)


def test_task_properties_and_dict_round_trip():
    t = NcdTaskSpec((1, 0), (3, 2), {0: "wall", 3: "chair"}, "demo", "synth")
    assert t.n_base == 2 and t.n_novel == 2
    assert t.all_classes == (0, 1, 2, 3)
    assert t.num_classes == 4
    assert t.name_of(3) == "chair" and t.name_of(1) == "1"
    assert NcdTaskSpec.from_dict(t.to_dict()) == t


def test_normalize_rows():
    z = normalize_rows(np.array([[3.0, 4.0], [0.0, 2.0]]))
    np.testing.assert_allclose(z, [[0.6, 0.8], [0.0, 1.0]])
    assert is_normalized(z)
    with pytest.raises(NormalizationDegenerate):
        normalize_rows(np.array([[1.0, 0.0], [0.0, 1e-9]]))
