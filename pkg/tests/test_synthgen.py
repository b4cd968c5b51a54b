import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jowl.synthgen import (CELL, CONCEPTS, GRID, BiasSpec, DatasetConfig, SceneObject, build_scene,
                           generate_scene, likely_probability, make_dataset, render_scene)


def _same(a, b):
    return a.to_dict() == b.to_dict() and np.array_equal(a.image, b.image)


def test_scene_is_deterministic():
    assert _same(generate_scene(0), generate_scene(0))


@given(st.integers(0, 2**63 - 1), st.integers(0, 2), st.integers(0, 10_000))
def test_scene_invariants(seed, split, index):
    s = generate_scene(seed, split_id=split, index=index)
    assert 1 <= len(s.objects) <= 3
    cells = [o.cell for o in s.objects]
    assert len(set(cells)) == len(cells)
    for b in s.gt_boxes:
        assert b["w"] > 0 and b["h"] > 0
        assert 0 <= b["x"] and b["x"] + b["w"] <= 1 and 0 <= b["y"] and b["y"] + b["h"] <= 1
    ordered = sorted(s.objects, key=lambda o: o.cell)
    assert s.caption == [w for o in ordered for w in (o.color, o.shape)] + ["<eos>"]
    assert np.isfinite(s.image).all() and s.image.min() >= 0 and s.image.max() <= 1
    assert s.image.shape == (64, 64, 3)


def test_qa_matches_membership_over_1000_scenes():
    for i in range(1000):
        s = generate_scene(5, index=i)
        answers = {qa["question"][1]: qa["answer"] for qa in s.qa}
        assert set(answers) == set(CONCEPTS)
        for c in CONCEPTS:
            truth = any(c in (o.shape, o.color) for o in s.objects)
            assert answers[c] == ("yes" if truth else "no")


def _cooccurrence(bias, n=10_000):
    hits = total = 0
    for i in range(n):
        s = generate_scene(i, bias)
        if s.contains("circle"):
            total += 1
            hits += s.contains("red")
    return hits / total


def test_bias_cooccurrence_frequency():
    assert 0.87 <= _cooccurrence(BiasSpec("circle", "red", 0.9)) <= 0.93


def test_unbiased_cooccurrence_matches_uniform_rate():
    # exact P(red present | circle present) when shapes and colors are uniform,
    # independent, and there are 1-3 objects with equal probability
    both = sum(1 - 2 * (2 / 3) ** k + (4 / 9) ** k for k in (1, 2, 3))
    circle = sum(1 - (2 / 3) ** k for k in (1, 2, 3))
    assert abs(_cooccurrence(None) - both / circle) <= 0.03


def test_empty_scene_renders_black():
    assert not render_scene([]).any()


def test_red_square_fills_its_cell():
    img = render_scene([SceneObject("square", "red", (0, 0))])
    assert (img[:CELL, :CELL, 0] == 1.0).all()
    assert not img[:CELL, :CELL, 1:].any()
    img[:CELL, :CELL] = 0
    assert not img.any()


@given(st.integers(0, 10**9))
def test_boxes_are_at_least_half_painted(seed):
    s = generate_scene(seed)
    for b in s.gt_boxes:
        y0, x0 = round(b["y"] * 64), round(b["x"] * 64)
        y1, x1 = y0 + round(b["h"] * 64), x0 + round(b["w"] * 64)
        painted = s.image[y0:y1, x0:x1].any(axis=-1)
        assert painted.mean() >= 0.5


def test_make_dataset_sizes_and_determinism():
    cfg = DatasetConfig(7, 100, 10, 10)
    a, b = make_dataset(cfg), make_dataset(cfg)
    assert sum(len(v) for v in a.values()) == 120
    assert all(_same(x, y) for k in a for x, y in zip(a[k], b[k]))


def test_seed_changes_first_scene():
    a = make_dataset(DatasetConfig(7, 1, 1, 1))["train"][0]
    b = make_dataset(DatasetConfig(8, 1, 1, 1))["train"][0]
    assert not _same(a, b)


def test_minimal_dataset():
    ds = make_dataset(DatasetConfig(7, 1, 1, 1))
    assert [len(v) for v in ds.values()] == [1, 1, 1]


def test_splits_use_disjoint_streams():
    ds = make_dataset(DatasetConfig(7, 5, 5, 5))
    assert not _same(ds["train"][0], ds["val"][0])


@pytest.mark.parametrize("field", ["n_train", "n_val", "n_test"])
def test_zero_counts_rejected(field):
    kw = dict(seed=1, n_train=1, n_val=1, n_test=1)
    kw[field] = 0
    with pytest.raises(ValueError):
        DatasetConfig(**kw)


def test_bias_spec_validation():
    with pytest.raises(ValueError):
        BiasSpec("circle", "red", 1.5)
    with pytest.raises(ValueError):
        BiasSpec("circle", "circle", 0.5)
    with pytest.raises(ValueError):
        BiasSpec("hexagon", "red", 0.5)


def test_likely_target_is_uniform_without_bias():
    s = generate_scene(3, n_objects=3)
    for c in ("red", "green", "blue"):
        assert likely_probability(s.objects, c) == pytest.approx(1 / 3, abs=1e-12)


def test_likely_target_reflects_bias():
    # a lone circle is red with probability 0.9 under the bias
    objs = [SceneObject("circle", "blue", (1, 1))]
    assert likely_probability(objs, "red", BiasSpec("circle", "red", 0.9)) == pytest.approx(0.9)
    scene = build_scene(objs, BiasSpec("circle", "red", 0.9))
    assert scene.likely["red"] == pytest.approx(0.9)


def test_grid_constants():
    assert GRID * CELL == 64
