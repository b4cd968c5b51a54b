import numpy as np
import pytest

from jowl import diffcore as dc
from jowl import harness as H
from jowl import models as M
from jowl.attack import AttackConfig, ConceptSets
from jowl.pipeline import embed
from jowl.synthgen import DatasetConfig, make_dataset


@pytest.fixture(scope="module")
def scenes():
    return make_dataset(DatasetConfig(seed=9, n_train=1, n_val=1, n_test=12))["test"]


def test_max_q_brute_force(random_params, scene):
    t = embed(random_params, scene.image)
    P = random_params.tensors()
    for c in ("circle", "blue"):
        z = M.detect(P, dc.constant(t), [c])[0].data
        best = max(z[i, 0] for i in range(len(z)))
        assert H.max_q(random_params, scene.image, c) == best
        assert H.max_q(random_params, t, c) == best
        assert 0.0 <= best <= 1.0


def test_max_q_rejects_non_concepts(random_params, scene):
    with pytest.raises(M.VocabularyError):
        H.max_q(random_params, scene.image, "yes")


def test_max_q_near_zero_for_suppressed_head(random_params, scene):
    p = random_params.copy()
    p.arrays["det_head.bias"] = np.array([-1e3])
    assert H.max_q(p, scene.image, "circle") == 0.0


def test_yes_ratio_examples():
    logits = np.zeros(len(M.VOCAB))
    assert H.yes_ratio(logits) == 0.5
    logits[M.YES] = 50.0
    assert H.yes_ratio(logits) == pytest.approx(1.0)
    logits[M.YES], logits[M.NO] = 0.0, np.log(1e12)
    assert H.yes_ratio(logits) == pytest.approx(1e-12, rel=1e-6)
    # other tokens do not matter
    logits[0] = 100.0
    assert H.yes_ratio(logits) == pytest.approx(1e-12, rel=1e-6)


def test_score_answer_matches_softmax(random_params, scene):
    t = embed(random_params, scene.image)
    P = random_params.tensors()
    logits = M.lm_forward(P, random_params.arch, M.align(P, dc.constant(t)),
                          [M.tokenize(["likely", "red", "?"])]).data[0, -1]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    expected = p[M.YES] / (p[M.YES] + p[M.NO])
    assert H.score_answer(random_params, scene.image, ["likely", "red", "?"]) == pytest.approx(expected)


def test_probe_must_be_a_question(random_params, scene):
    with pytest.raises(ValueError, match="\\?"):
        H.score_answer(random_params, scene.image, ["likely", "red"])


def test_hallucination_report_counts(random_params, scenes):
    rep = H.hallucination_report(random_params, scenes)
    assert sum(rep.counts.values()) == len(scenes) * len(H.OMEGA)
    for k in H.BUCKETS:
        assert (rep.means[k] is None) == (rep.counts[k] == 0)


def test_constant_detection_gives_equal_means(random_params, scenes):
    p = random_params.copy()
    for name in ("det_head.proj.w", "det_head.proj.b"):
        p.arrays[name] = np.zeros_like(p.arrays[name])
    rep = H.hallucination_report(p, scenes)
    means = {v for v in rep.means.values() if v is not None}
    assert len(means) == 1


def test_bias_report_rows(random_params, scenes):
    sets = ConceptSets(["circle"], ["square"])
    rep = H.bias_report(random_params, scenes, sets, ["likely", "red", "?"], AttackConfig(0.05))
    n = sum(s.contains("circle") for s in scenes)
    assert [r.kind for r in rep.rows] == ["property", "minus", "plus"]
    assert all(r.n == n for r in rep.rows)
    assert all(-1 <= r.delta <= 1 for r in rep.rows)


def test_bias_report_rejects_empty_subset(random_params, scenes):
    with pytest.raises(ValueError, match="no scene"):
        H.bias_report(random_params, scenes[:0], ConceptSets(["circle"], ["square"]), ["likely", "red", "?"])


def test_zero_deltas_give_unit_p_value():
    row = H._row(["x", "?"], ConceptSets(["red"], ["blue"]), np.ones(5), np.ones(5), "property")
    assert row.delta == 0.0 and row.p_value == 1.0


def test_threaded_evaluation_matches_serial(random_params, scenes, monkeypatch):
    monkeypatch.setattr(H, "CHUNK", 3)
    monkeypatch.setenv("JOWL_THREADS", "1")
    serial = H.hallucination_records(random_params, scenes)
    monkeypatch.setenv("JOWL_THREADS", "4")
    threaded = H.hallucination_records(random_params, scenes)
    for a, b in zip(serial, threaded):
        assert np.array_equal(a, b)


def test_bad_thread_count(monkeypatch):
    monkeypatch.setenv("JOWL_THREADS", "many")
    with pytest.raises(ValueError):
        H.workers()
