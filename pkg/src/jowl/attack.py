"""Single-step semantic FGSM on the shared detector embedding.

The loss L_ADV = sum z[C-] - sum z[C+] is taken over post-sigmoid scores;
the perturbation is e = -delta * sign(dL/dt) with sign(0) = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import models as M
from .pipeline import DetectionOutput, embed

DEFAULT_RELATIVE_DELTA = 0.05


@dataclass(frozen=True)
class ConceptSets:
    minus: tuple
    plus: tuple

    def __post_init__(self):
        object.__setattr__(self, "minus", tuple(self.minus))
        object.__setattr__(self, "plus", tuple(self.plus))
        if not self.minus or not self.plus:
            raise ValueError("both concept sets must be non-empty")
        overlap = set(self.minus) & set(self.plus)
        if overlap:
            raise ValueError(f"concept sets overlap on {sorted(overlap)}")
        M.query_ids(self.queries)

    @property
    def queries(self):
        return list(self.minus) + list(self.plus)

    def to_dict(self):
        return {"minus": list(self.minus), "plus": list(self.plus)}


@dataclass(frozen=True)
class AttackConfig:
    delta: float

    def __post_init__(self):
        if not np.isfinite(self.delta) or self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @classmethod
    def relative(cls, embedding, fraction=DEFAULT_RELATIVE_DELTA):
        """``fraction`` times the RMS of the embedding's entries."""
        rms = float(np.sqrt(np.mean(np.square(embedding))))
        return cls(fraction * rms)


def _split_scores(scores, sets):
    k = len(sets.minus)
    return scores[..., :k], scores[..., k:]


def adv_loss(detection, sets):
    """L_ADV for a detection made with queries C- followed by C+."""
    if list(detection.queries) != sets.queries:
        raise ValueError(f"detection queries {list(detection.queries)} do not match C- + C+ = {sets.queries}")
    minus, plus = _split_scores(np.asarray(detection.scores), sets)
    return float(minus.sum() - plus.sum())


def adv_loss_tensor(P, t, sets):
    z, _ = M.detect(P, t, sets.queries)
    k = len(sets.minus)
    return dc.sum(z[..., :k]) - dc.sum(z[..., k:])


def adv_losses(params, embeddings, sets):
    """Per-item L_ADV for a batch of embeddings (B, S, D)."""
    z, _ = M.detect(params.tensors(), dc.constant(embeddings), sets.queries)
    minus, plus = _split_scores(z.data, sets)
    return minus.sum(axis=(-2, -1)) - plus.sum(axis=(-2, -1))


def loss_gradient(params, embedding, sets):
    """dL_ADV/dt; a batch (B, S, D) gives each item's own gradient."""
    t = dc.Tensor(embedding, requires_grad=True)
    return dc.grad(adv_loss_tensor(params.tensors(), t, sets), t)


def perturbation(gradient, delta):
    return -delta * dc.sign(gradient)


def semantic_fgsm(params, image, sets, config, embedding=None):
    """(t_adv, e) for one image, or for a given (possibly batched) embedding."""
    if embedding is None:
        embedding = embed(params, image)
    e = perturbation(loss_gradient(params, embedding, sets), config.delta)
    return embedding + e, e


def attack_effect_report(params, image, sets, config, probe_prompt, embedding=None, e=None):
    """max_q of every attacked concept and the probe score, before and after."""
    from .harness import max_q, score_answer  # harness depends on this module

    if embedding is None:
        embedding = embed(params, image)
    if e is None:
        _, e = semantic_fgsm(params, None, sets, config, embedding=embedding)
    adv = embedding + e
    before = DetectionOutput(*_detect(params, embedding, sets), sets.queries)
    after = DetectionOutput(*_detect(params, adv, sets), sets.queries)
    return {
        "minus": list(sets.minus),
        "plus": list(sets.plus),
        "delta": float(config.delta),
        "probe": list(probe_prompt),
        "max_q": {
            c: {"before": max_q(params, embedding, c), "after": max_q(params, adv, c)}
            for c in sets.queries
        },
        "score": {
            "before": score_answer(params, embedding, probe_prompt),
            "after": score_answer(params, adv, probe_prompt),
        },
        "adv_loss": {"before": adv_loss(before, sets), "after": adv_loss(after, sets)},
    }


def _detect(params, embedding, sets):
    z, boxes = M.detect(params.tensors(), dc.constant(embedding), sets.queries)
    return z.data, boxes.data
