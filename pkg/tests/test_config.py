import json

import pytest

from jowl.config import ConfigError, RunConfig, default_document


def test_default_config_is_valid():
    cfg = RunConfig.load()
    assert cfg.arch.n_tokens == 16
    assert cfg.dataset.seed == cfg["seeds"]["dataset"]
    assert cfg.train("align").stage == "align"
    assert cfg.sets.minus == ("circle",)


def test_updates_are_validated():
    cfg = RunConfig.load().with_updates(seeds={"dataset": 3})
    assert cfg.dataset.seed == 3
    with pytest.raises(ConfigError):
        RunConfig.load().with_updates(seeds={"dataset": -1})


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d.pop("arch"), "arch"),
    (lambda d: d.update(extra=1), "extra"),
    (lambda d: d["vocabulary"].append("dog"), "vocabulary"),
    (lambda d: d["arch"].update(patch_size=12), "patch_size"),
    (lambda d: d["arch"].update(image_size=128, patch_size=16), "image_size"),
    (lambda d: d["attack"].update(plus=["circle"]), "overlap"),
    (lambda d: d["attack"].update(probe=["likely", "red"]), "\\?"),
    (lambda d: d["attack"].update(delta=0), "delta"),
    (lambda d: d["training"]["align"].update(lr=-1), "lr"),
    (lambda d: d["dataset"].update(bias_spec={"concept_a": "red", "concept_b": "red",
                                              "co_occurrence_prob": 0.5}), "differ"),
])
def test_invalid_documents(mutate, match):
    doc = default_document()
    mutate(doc)
    with pytest.raises(ConfigError, match=match):
        RunConfig(doc)


def test_load_from_file(tmp_path):
    doc = default_document()
    doc["seeds"]["init"] = 5
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert RunConfig.load(tmp_path / "c.json").init["seed"] == 5
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        RunConfig.load(tmp_path / "bad.json")
