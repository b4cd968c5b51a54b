import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from jowl import attack as A
from jowl import diffcore as dc
from jowl.pipeline import DetectionOutput, embed

SETS = A.ConceptSets(["circle"], ["square"])


def det(scores, queries):
    scores = np.asarray(scores, dtype=np.float64)
    return DetectionOutput(scores, np.zeros((len(scores), 4)), queries)


def test_adv_loss_examples():
    assert A.adv_loss(det([[0.9, 0.1], [0.2, 0.3]], ["circle", "square"]), SETS) == pytest.approx(0.7)
    sets = A.ConceptSets(["red", "blue"], ["green"])
    assert A.adv_loss(det([[1.0, 0.5, 0.25]], ["red", "blue", "green"]), sets) == 1.25


@given(hnp.arrays(np.float64, (5, 3), elements=st.floats(0, 1)))
def test_adv_loss_brute_force(z):
    sets = A.ConceptSets(["circle", "red"], ["blue"])
    expected = sum(z[i, j] for i in range(5) for j in range(2)) - sum(z[i, 2] for i in range(5))
    assert A.adv_loss(det(z, sets.queries), sets) == pytest.approx(expected)


def test_adv_loss_rejects_query_mismatch():
    with pytest.raises(ValueError, match="do not match"):
        A.adv_loss(det([[0.5, 0.5]], ["square", "circle"]), SETS)


def test_concept_set_validation():
    with pytest.raises(ValueError, match="overlap"):
        A.ConceptSets(["circle"], ["circle"])
    with pytest.raises(ValueError):
        A.ConceptSets([], ["circle"])
    with pytest.raises(ValueError):
        A.ConceptSets(["dog"], ["circle"])


@pytest.mark.parametrize("delta", [0.0, -1.0, float("nan")])
def test_delta_must_be_positive(delta):
    with pytest.raises(ValueError):
        A.AttackConfig(delta)


def test_relative_delta():
    t = np.full((4, 4), 2.0)
    assert A.AttackConfig.relative(t, 0.05).delta == pytest.approx(0.1)


def test_perturbation_is_sign_structured(random_params, scene):
    t = embed(random_params, scene.image)
    g = A.loss_gradient(random_params, t, SETS)
    g[0, :3] = 0.0
    e = A.perturbation(g, 0.01)
    assert set(np.unique(e)) <= {-0.01, 0.0, 0.01}
    assert int((e == 0).sum()) == int((g == 0).sum())


def test_fgsm_matches_definition(random_params, scene):
    t = embed(random_params, scene.image)
    adv, e = A.semantic_fgsm(random_params, scene.image, SETS, A.AttackConfig(1e-3))
    assert np.array_equal(adv, t + e)
    assert np.array_equal(e, -1e-3 * dc.sign(A.loss_gradient(random_params, t, SETS)))


def test_small_step_lowers_the_loss(random_params, scene):
    t = embed(random_params, scene.image)
    for delta in (1e-3, 1e-2):
        adv, _ = A.semantic_fgsm(random_params, None, SETS, A.AttackConfig(delta), embedding=t)
        before, after = A.adv_losses(random_params, np.stack([t, adv]), SETS)
        assert after < before


def test_batched_gradient_is_per_item(random_params, scene, rng):
    t = embed(random_params, scene.image)
    other = t + rng.normal(scale=0.5, size=t.shape)
    batch = A.loss_gradient(random_params, np.stack([t, other]), SETS)
    assert np.array_equal(batch[0], A.loss_gradient(random_params, t, SETS))
    assert np.array_equal(batch[1], A.loss_gradient(random_params, other, SETS))


def test_small_delta_converges_to_clean(random_params, scene):
    t = embed(random_params, scene.image)
    adv, _ = A.semantic_fgsm(random_params, None, SETS, A.AttackConfig(1e-12), embedding=t)
    assert np.abs(adv - t).max() <= 2e-12


def test_identity_report_is_unchanged(random_params, scene):
    t = embed(random_params, scene.image)
    rep = A.attack_effect_report(random_params, None, SETS, A.AttackConfig(0.1), ["likely", "red", "?"],
                                 embedding=t, e=np.zeros_like(t))
    assert rep["score"]["before"] == rep["score"]["after"]
    for c in SETS.queries:
        assert rep["max_q"][c]["before"] == rep["max_q"][c]["after"]
    assert rep["adv_loss"]["before"] == rep["adv_loss"]["after"]


def test_report_round_trips_through_json(random_params, scene):
    rep = A.attack_effect_report(random_params, scene.image, SETS, A.AttackConfig(0.05), ["likely", "red", "?"])
    assert json.loads(json.dumps(rep)) == rep
    assert rep["adv_loss"]["after"] < rep["adv_loss"]["before"]
