"""Gradient-alignment saliency maps.

Each detection box i gets the relevance r_i = cos(d l[s] / dt, d z_i / dt),
both gradients taken with respect to the whole flattened detector
embedding t. Pixels take the maximum r_i over the boxes covering them.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import models as M
from .pipeline import DetectionOutput, embed

UNCOVERED = -np.inf


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def relevance_scores(grad_text, grad_boxes):
    """Cosine of the text gradient with each box gradient; zero norm gives 0."""
    return np.array([cosine(grad_text, g) for g in grad_boxes])


def text_gradient(params, embedding, prompt_ids):
    """(top logit index s, d l[s] / d embedding)."""
    P = params.tensors()
    t = dc.Tensor(embedding, requires_grad=True)
    logits = M.lm_forward(P, params.arch, M.align(P, t), np.asarray([prompt_ids], dtype=np.int64))
    last = logits.data[0, -1]
    s = int(np.argmax(last))
    top = logits[0, -1, s]
    return s, dc.grad(top, t)


def box_gradients(params, embedding, concept):
    """Detection output for ``{concept}`` and d z_i / d embedding for each box i."""
    P = params.tensors()
    t = dc.Tensor(embedding, requires_grad=True)
    z, boxes = M.detect(P, t, [concept])
    tape = dc.Tape(z)
    grads = []
    for i in range(z.shape[0]):
        seed = np.zeros_like(z.data)
        seed[i, 0] = 1.0
        grads.append(tape.backward(z, [t], seed=seed)[0])
    return DetectionOutput(z.data, boxes.data, [concept]), np.stack(grads)


def ga_scores(params, image, prompt, concept, embedding=None):
    """Relevance scores, the single-query detection, and the explained token id."""
    if concept not in M.QUERY_ID:
        raise M.VocabularyError(f"unknown concept {concept!r}")
    if embedding is None:
        embedding = embed(params, image)
    ids = M.tokenize(prompt)
    s, grad_text = text_gradient(params, embedding, ids)
    detection, grad_boxes = box_gradients(params, embedding, concept)
    return relevance_scores(grad_text, grad_boxes), detection, s


def box_pixels(box, height, width):
    """Pixel rectangle (y0, y1, x0, x1) covered by a normalised box."""
    x, y, w, h = (float(v) for v in box)

    def rnd(v):
        # round half up, independent of numpy/python banker's rounding
        return int(np.floor(v + 0.5))

    y0 = rnd(y * height)
    x0 = rnd(x * width)
    y1 = y0 + max(1, rnd(h * height))
    x1 = x0 + max(1, rnd(w * width))
    return (min(max(y0, 0), height), min(max(y1, 0), height),
            min(max(x0, 0), width), min(max(x1, 0), width))


def composite_map(scores, detection, image_size=(64, 64)):
    """Per-pixel max of r_i over covering boxes; uncovered pixels are -inf."""
    boxes = detection.boxes if isinstance(detection, DetectionOutput) else np.asarray(detection)
    if len(scores) != len(boxes):
        raise ValueError(f"{len(scores)} scores for {len(boxes)} boxes")
    height, width = image_size
    out = np.full((height, width), UNCOVERED)
    for r, box in zip(scores, boxes):
        y0, y1, x0, x1 = box_pixels(box, height, width)
        region = out[y0:y1, x0:x1]
        np.maximum(region, r, out=region)
    return out


def normalize_map(raw):
    """Fill uncovered pixels with the covered minimum, then min-max to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    covered = np.isfinite(raw)
    if not covered.any():
        return np.zeros_like(raw)
    filled = np.where(covered, raw, raw[covered].min())
    lo, hi = filled.min(), filled.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (filled - lo) / (hi - lo)


def saliency_map(params, image, prompt, concept):
    scores, detection, s = ga_scores(params, image, prompt, concept)
    image = np.asarray(image)
    final = normalize_map(composite_map(scores, detection, image.shape[:2]))
    return final, scores, detection, s


def render_overlay(image, saliency):
    """Half-intensity grayscale with saliency added to the red channel."""
    image = np.asarray(image, dtype=np.float64)
    saliency = np.asarray(saliency, dtype=np.float64)
    if image.shape[:2] != saliency.shape:
        raise ValueError(f"image {image.shape[:2]} and map {saliency.shape} differ in size")
    gray = 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]
    rest = 0.5 * gray * (1.0 - saliency)
    return np.stack([0.5 * gray + 0.5 * saliency, rest, rest], axis=-1)
