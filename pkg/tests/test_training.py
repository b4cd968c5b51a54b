import numpy as np
import pytest

from jowl import models as M
from jowl import training as T
from jowl.synthgen import DatasetConfig, make_dataset


@pytest.fixture(scope="module")
def data():
    return make_dataset(DatasetConfig(seed=5, n_train=24, n_val=8, n_test=4))


def cfg(stage, epochs=2, **kw):
    return T.TrainConfig(stage=stage, lr=0.05, epochs=epochs, batch_size=8, **kw)


def changed(a, b):
    return {M.component_of(n) for n in a.arrays if not np.array_equal(a.arrays[n], b.arrays[n])}


@pytest.mark.parametrize("stage, fn", [("detector", T.pretrain_detector), ("mllm", T.pretrain_mllm),
                                       ("align", T.train_alignment)])
def test_stage_touches_only_its_components(stage, fn, arch, data):
    p0 = M.init_params(arch, seed=0)
    p1, report = fn(p0, data["train"], data["val"], cfg(stage))
    assert changed(p0, p1) == set(T.STAGE_COMPONENTS[stage])
    assert len(report.val_loss) == 2 and report.initial_val_loss is not None


def test_zero_epochs_leaves_params_unchanged(arch, data):
    p0 = M.init_params(arch, seed=0)
    p1, report = T.pretrain_detector(p0, data["train"], data["val"], cfg("detector", epochs=0))
    assert p1 == p0 and report.val_loss == []


def test_training_is_deterministic(arch, data):
    p0 = M.init_params(arch, seed=0)
    a, _ = T.train_alignment(p0, data["train"], data["val"], cfg("align"))
    b, _ = T.train_alignment(p0, data["train"], data["val"], cfg("align"))
    assert a == b


def test_alignment_loss_decreases(arch, data):
    p0 = M.init_params(arch, seed=0)
    _, report = T.train_alignment(p0, data["train"], data["val"], cfg("align", epochs=4))
    assert report.val_loss[-1] < report.initial_val_loss


def test_frozen_component_cannot_be_trained(arch, data):
    p0 = M.init_params(arch, seed=0)
    p0.frozen["align"] = True
    with pytest.raises(ValueError, match="frozen"):
        T.train_alignment(p0, data["train"], data["val"], cfg("align"))


def test_divergence_is_reported(arch, data):
    p0 = M.init_params(arch, seed=0)
    p0.arrays["align.w1"] = p0.arrays["align.w1"] * np.nan
    with pytest.raises(T.TrainingDiverged) as info:
        T.train_alignment(p0, data["train"], data["val"], cfg("align"))
    assert info.value.report.stage == "align"


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(stage="nope", lr=0.1, epochs=1)
    with pytest.raises(ValueError):
        T.TrainConfig(stage="align", lr=0.0, epochs=1)
    with pytest.raises(ValueError):
        T.TrainConfig(stage="align", lr=0.1, epochs=-1)
    with pytest.raises(ValueError):
        T.TrainConfig(stage="align", lr=0.1, epochs=1, momentum=1.0)


def test_alignment_loss_is_zero_at_its_own_output(arch, rng):
    from jowl import diffcore as dc
    P = M.init_params(arch, seed=0).tensors()
    t = dc.constant(rng.normal(size=(2, arch.n_tokens, arch.d_vision)))
    assert T.alignment_loss(P, t, M.align(P, t).data).data.item() == 0.0
    shifted = M.align(P, t).data + 0.5
    assert T.alignment_loss(P, t, shifted).data.item() == pytest.approx(0.25 * arch.d_lang)


def test_lm_sequences_cover_every_question(scene):
    seqs = T.lm_sequences(scene)
    questions = [inp for inp, _ in seqs[1:]]
    assert len(questions) == len(scene.qa) + 3
    for inp, tgt in seqs[1:]:
        assert inp[-1] == "?" and tgt[-1] is not None and tgt[-1].sum() == pytest.approx(1.0)


def test_pack_sequences_pads_and_masks(scene):
    ids, targets, weights = T.pack_sequences(T.lm_sequences(scene))
    assert ids.shape == weights.shape == targets.shape[:2]
    assert (ids[weights == 0] >= 0).all()
    assert np.allclose(targets[weights == 1].sum(-1), 1.0)
