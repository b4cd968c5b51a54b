import numpy as np
import pytest

from jowl import models as M
from jowl import pipeline as PL

PROMPT = ["contains", "circle", "?"]


def test_embedding_is_the_detector_encoding(random_params, scene):
    out = PL.run_joint(random_params, scene.image, PROMPT, ["circle"])
    P = random_params.tensors()
    ref = M.encode_vision(P, random_params.arch, scene.image, "detector").data[0]
    assert np.array_equal(out.embedding, ref)


def test_query_set_does_not_change_language_output(random_params, scene):
    a = PL.run_joint(random_params, scene.image, PROMPT, ["circle"], gen_steps=3)
    b = PL.run_joint(random_params, scene.image, PROMPT, ["square", "blue", "red"], gen_steps=3)
    assert np.array_equal(a.logits, b.logits)
    assert a.tokens == b.tokens
    assert np.array_equal(a.owl.boxes, b.owl.boxes)
    assert np.array_equal(a.owl.scores[:, 0], PL.run_joint(
        random_params, scene.image, PROMPT, ["blue", "circle"]).owl.scores[:, 1])


def test_output_shapes(random_params, scene):
    out = PL.run_joint(random_params, scene.image, PROMPT, ["circle", "red"], gen_steps=2)
    S = random_params.arch.n_tokens
    assert out.owl.scores.shape == (S, 2) and out.owl.boxes.shape == (S, 4)
    assert out.logits.shape == (len(M.VOCAB),)
    assert out.tokens[0] == M.VOCAB[int(np.argmax(out.logits))]


def test_filter_boxes_thresholds(random_params, scene):
    out = PL.run_joint(random_params, scene.image, PROMPT, ["circle", "red"]).owl
    assert len(PL.filter_boxes(out, 0.0)) == len(out)
    assert len(PL.filter_boxes(out, 1.0)) == 0
    mid = float(np.median(out.max_scores()))
    kept = PL.filter_boxes(out, mid)
    assert np.all(kept.max_scores() >= mid)
    assert len(kept) == int((out.max_scores() >= mid).sum())


def test_unknown_query_rejected(random_params, scene):
    with pytest.raises(M.VocabularyError):
        PL.run_joint(random_params, scene.image, PROMPT, ["dog"])


def test_detection_to_dict(random_params, scene):
    d = PL.run_joint(random_params, scene.image, PROMPT, ["red"]).owl.to_dict()
    assert d["queries"] == ["red"] and len(d["boxes"]) == random_params.arch.n_tokens
    assert set(d["boxes"][0]) == {"x", "y", "w", "h", "z"}
