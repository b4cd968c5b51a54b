"""Joint execution: one detector embedding feeds both the LM (via the
alignment MLP) and the detection head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import models as M

DEFAULT_THRESHOLD = 0.5


@dataclass
class DetectionOutput:
    scores: np.ndarray  # (S, |Q|), post-sigmoid
    boxes: np.ndarray  # (S, 4) as x, y, w, h
    queries: list

    def __len__(self):
        return len(self.boxes)

    def max_scores(self):
        return self.scores.max(axis=1)

    def to_dict(self):
        return {
            "queries": list(self.queries),
            "boxes": [
                {"x": float(b[0]), "y": float(b[1]), "w": float(b[2]), "h": float(b[3]),
                 "z": [float(v) for v in z]}
                for b, z in zip(self.boxes, self.scores)
            ],
        }


@dataclass
class JointOutput:
    logits: np.ndarray  # last-position logit vector
    tokens: list  # greedy continuation, as words
    owl: DetectionOutput
    embedding: np.ndarray  # (S, d_vision), shared by both heads
    token_ids: list = field(default_factory=list)


def embed(params, image):
    """Detector embedding ``(S, d_vision)`` of a single image."""
    P = params.tensors()
    return M.encode_vision(P, params.arch, image, "detector").data[0]


def detect_embedding(params, embedding, queries):
    P = params.tensors()
    z, boxes = M.detect(P, dc.constant(embedding), list(queries))
    return DetectionOutput(z.data, boxes.data, list(queries))


def lm_logits(params, embedding, prompt_ids):
    """Logit rows for the aligned embedding followed by ``prompt_ids``."""
    P = params.tensors()
    vision = M.align(P, dc.constant(embedding))
    return M.lm_forward(P, params.arch, vision, np.asarray([prompt_ids], dtype=np.int64))


def joint_from_embedding(params, embedding, prompt, queries, gen_steps=1):
    """Both outputs from a given (possibly perturbed) detector embedding."""
    P = params.tensors()
    t = dc.constant(embedding)
    vision = M.align(P, t)
    ids = M.tokenize(prompt)
    logits = M.lm_forward(P, params.arch, vision, np.asarray([ids], dtype=np.int64))
    z, boxes = M.detect(P, t, list(queries))
    generated = []
    if gen_steps > 0:
        generated = M.decode_greedy(P, params.arch, vision, ids, gen_steps, logits=logits)
    return JointOutput(
        logits=logits.data[0, -1].copy(),
        tokens=M.detokenize(generated),
        owl=DetectionOutput(z.data[0] if z.data.ndim == 3 else z.data,
                            boxes.data[0] if boxes.data.ndim == 3 else boxes.data, list(queries)),
        embedding=np.array(embedding),
        token_ids=generated,
    )


def run_joint(params, image, prompt, queries, gen_steps=1):
    """Encode once, align, run the LM on [vision | prompt], detect with ``queries``."""
    return joint_from_embedding(params, embed(params, image), prompt, queries, gen_steps)


def filter_boxes(output, threshold=DEFAULT_THRESHOLD):
    """Boxes whose best query score reaches ``threshold``, order preserved."""
    keep = output.max_scores() >= threshold
    return DetectionOutput(output.scores[keep], output.boxes[keep], list(output.queries))
