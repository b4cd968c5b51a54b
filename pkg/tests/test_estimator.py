import numpy as np
import pytest
from sklearn.base import clone

from jowl import models as M
from jowl.config import default_document
from jowl.estimator import JointModel
from jowl.synthgen import DatasetConfig, make_dataset


@pytest.fixture(scope="module")
def tiny_doc():
    doc = default_document()
    for stage in doc["training"].values():
        stage.update(epochs=1, batch_size=8)
    return doc


def test_params_and_clone(tiny_doc):
    est = JointModel(config=tiny_doc, validation_fraction=0.25)
    assert est.get_params() == {"config": tiny_doc, "validation_fraction": 0.25}
    twin = clone(est)
    assert twin.validation_fraction == 0.25 and not hasattr(twin, "params_")


def test_fit_predict_score(tiny_doc):
    scenes = make_dataset(DatasetConfig(seed=2, n_train=20, n_val=1, n_test=1))["train"]
    est = JointModel(config=tiny_doc).fit(scenes)
    assert set(est.reports_) == {"detector", "mllm", "align"}
    emb = est.transform(scenes[:3])
    assert emb.shape == (3, 16, 32)
    answers = est.predict(scenes[:3], ("contains", "red", "?"))
    assert len(answers) == 3 and all(a in M.VOCAB for a in answers)
    assert np.array_equal(est.transform(np.stack([s.image for s in scenes[:3]])), emb)
    assert 0.0 <= est.score(scenes[:5]) <= 1.0


def test_fit_needs_two_scenes(tiny_doc):
    scenes = make_dataset(DatasetConfig(seed=2, n_train=1, n_val=1, n_test=1))["train"]
    with pytest.raises(ValueError):
        JointModel(config=tiny_doc).fit(scenes)
