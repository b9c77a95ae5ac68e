import numpy as np
import pytest

from ncdseg.data_model import validate_task
from ncdseg.synth import (
    KINDS,
    SynthClass,
    SynthSceneSpec,
    generate_synthetic_scene,
    make_scenario,
)


def two_class(seed=7, sigma=0.2):
    return SynthSceneSpec((SynthClass(0, "box", 100), SynthClass(1, "sphere", 100)),
                          novel_classes=(1,), aux_embedding_sigma=sigma, seed=seed)


def test_budgets_are_exact():
    cloud, aux = generate_synthetic_scene(two_class())
    assert len(cloud) == 200
    assert list(np.bincount(cloud.evaluation_labels())) == [100, 100]
    assert aux.shape == (200, 16)
    assert cloud.novel_mask.sum() == 100


def test_same_seed_same_scene():
    a, fa = generate_synthetic_scene(two_class())
    b, fb = generate_synthetic_scene(two_class())
    assert a.same_as(b) and np.array_equal(fa, fb)
    c, _ = generate_synthetic_scene(two_class(seed=8))
    assert not a.same_as(c)


def test_zero_sigma_gives_class_anchors():
    cloud, aux = generate_synthetic_scene(two_class(sigma=0.0))
    lab = cloud.evaluation_labels()
    for c in (0, 1):
        rows = aux[lab == c]
        assert (rows == rows[0]).all()
    assert not np.array_equal(aux[lab == 0][0], aux[lab == 1][0])


def test_every_kind_generates():
    classes = tuple(SynthClass(i, k, 20) for i, k in enumerate(KINDS))
    cloud, _ = generate_synthetic_scene(SynthSceneSpec(classes, with_color=False))
    assert len(cloud) == 20 * len(KINDS) and not cloud.has_color


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthClass(0, "torus", 10)
    with pytest.raises(ValueError):
        SynthClass(0, "box", 0)
    with pytest.raises(ValueError):
        SynthSceneSpec(())
    with pytest.raises(ValueError):
        SynthSceneSpec((SynthClass(0, "box", 5),), aux_embedding_sigma=-1)


@pytest.mark.parametrize("name,n_novel", [("separable", 3), ("four-novel", 4), ("longtail", 3)])
def test_named_scenarios(name, n_novel):
    sc = make_scenario(name, n_train=3, n_val=2)
    assert sc.task.n_novel == n_novel
    for cloud, aux in sc.train + sc.val:
        validate_task(cloud, sc.task)
        assert aux.shape[0] == len(cloud)
    with pytest.raises(ValueError):
        make_scenario("unknown")


def test_longtail_validation_has_every_novel_class():
    sc = make_scenario("longtail", n_train=12, n_val=2, seed=1)
    for cloud, _ in sc.val:
        assert set(sc.task.novel_classes) <= set(cloud.evaluation_labels())
    present = [set(c.evaluation_labels()) & set(sc.task.novel_classes) for c, _ in sc.train]
    assert any(len(p) < 3 for p in present)
