"""Run configuration: a JSON document validated against a bundled schema."""

from __future__ import annotations

import copy
import json
from importlib import resources

import jsonschema

from . import models as M
from .attack import ConceptSets
from .synthgen import IMAGE_SIZE, DatasetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _resource(name):
    return json.loads(resources.files("jowl").joinpath("data").joinpath(name).read_text())


def schema():
    return _resource("config_schema.json")


def default_document():
    return _resource("default_config.json")


def _semantic_checks(doc):
    if list(doc["vocabulary"]) != list(M.VOCAB):
        raise ConfigError(f"vocabulary must be exactly {list(M.VOCAB)}")
    try:
        arch = M.ArchConfig(**doc["arch"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if arch.image_size != IMAGE_SIZE:
        raise ConfigError(f"arch.image_size must be {IMAGE_SIZE} to match the generated images")
    if arch.image_size % arch.patch_size:
        raise ConfigError("arch.patch_size must divide arch.image_size")
    for d, h, what in ((arch.d_vision, arch.vision_heads, "vision"), (arch.d_lang, arch.lm_heads, "lm")):
        if d % h:
            raise ConfigError(f"{what} width {d} is not divisible by its {h} heads")
    bias = doc["dataset"].get("bias_spec")
    if bias and bias["concept_a"] == bias["concept_b"]:
        raise ConfigError("bias_spec concepts must differ")
    a = doc["attack"]
    try:
        ConceptSets(a["minus"], a["plus"])
        M.tokenize(a["probe"])
    except ValueError as exc:
        raise ConfigError(f"attack: {exc}") from None
    if a["probe"][-1] != "?":
        raise ConfigError("attack.probe must end with '?'")
    prompt_limit = arch.max_prompt
    if len(a["probe"]) > prompt_limit:
        raise ConfigError(f"attack.probe is longer than max_prompt={prompt_limit}")


def validate(doc):
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    _semantic_checks(doc)
    return doc


class RunConfig:
    """Validated configuration document with typed accessors."""

    def __init__(self, doc):
        self.doc = validate(copy.deepcopy(doc))

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls(default_document())
        try:
            with open(path) as f:
                doc = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls(doc)

    def with_updates(self, **sections):
        """Copy with top-level sections shallow-merged, e.g. ``seeds={"dataset": 3}``."""
        doc = copy.deepcopy(self.doc)
        for key, value in sections.items():
            if isinstance(doc.get(key), dict) and isinstance(value, dict):
                doc[key].update(value)
            else:
                doc[key] = value
        return RunConfig(doc)

    @property
    def arch(self):
        return M.ArchConfig(**self.doc["arch"])

    @property
    def dataset(self):
        return DatasetConfig.from_dict(dict(self.doc["dataset"], seed=self.doc["seeds"]["dataset"]))

    def train(self, stage):
        return TrainConfig.from_dict(stage, dict(self.doc["training"][stage], seed=self.doc["seeds"]["shuffle"]))

    @property
    def init(self):
        return dict(self.doc["init"], seed=self.doc["seeds"]["init"])

    @property
    def sets(self):
        return ConceptSets(self.doc["attack"]["minus"], self.doc["attack"]["plus"])

    def __getitem__(self, key):
        return self.doc[key]
