"""scikit-learn style wrapper around the three training stages."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import diffcore as dc
from . import models as M
from . import training as T
from .config import RunConfig
from .harness import embed_scenes
from .synthgen import stack_images


class JointModel(BaseEstimator):
    """Detector + aligned language model.

    ``fit`` takes a list of scenes and runs the detector, MLLM and alignment
    stages; ``transform`` maps images to detector embeddings; ``predict``
    answers a prompt for each image.
    """

    def __init__(self, config=None, validation_fraction=0.2):
        self.config = config
        self.validation_fraction = validation_fraction

    def _run_config(self):
        return RunConfig(self.config) if self.config is not None else RunConfig.load()

    def fit(self, X, y=None):
        scenes = list(X)
        if len(scenes) < 2:
            raise ValueError("need at least two scenes (train + validation)")
        n_val = min(len(scenes) - 1, max(1, int(round(len(scenes) * self.validation_fraction))))
        train, val = scenes[:-n_val], scenes[-n_val:]
        cfg = self._run_config()
        init = cfg.init
        params = M.init_params(cfg.arch, seed=init["seed"], scheme=init["scheme"],
                               residual_scale=init["residual_scale"])
        self.reports_ = {}
        for stage, fn in (("detector", T.pretrain_detector), ("mllm", T.pretrain_mllm),
                          ("align", T.train_alignment)):
            params, self.reports_[stage] = fn(params, train, val, cfg.train(stage))
        self.params_ = params
        return self

    def _images(self, X):
        X = list(X)
        if X and hasattr(X[0], "image"):
            return stack_images(X)
        return np.asarray(X, dtype=np.float64)

    def transform(self, X):
        """Detector embeddings (N, S, d_vision)."""
        P = self.params_.tensors()
        return M.encode_vision(P, self.params_.arch, self._images(X), "detector").data

    def predict(self, X, prompt=("contains", "circle", "?")):
        """First greedy answer word after ``prompt`` for every image."""
        t = self.transform(X)
        P = self.params_.tensors()
        ids = np.tile(M.tokenize(prompt), (len(t), 1))
        logits = M.lm_forward(P, self.params_.arch, M.align(P, dc.constant(t)), ids)
        return [M.VOCAB[i] for i in logits.data[:, -1].argmax(axis=-1)]

    def score(self, X, y=None):
        """Accuracy on every "contains w ?" question of the given scenes."""
        scenes = list(X)
        P = self.params_.tensors()
        t = embed_scenes(self.params_, scenes)
        return T.qa_accuracy(P, self.params_.arch, scenes, M.align(P, dc.constant(t)))
