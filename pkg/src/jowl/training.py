"""The three training stages: detector, reference MLLM, alignment MLP."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from . import models as M
from .synthgen import CONCEPTS, COLORS, GRID, stack_images, stream

log = logging.getLogger(__name__)

STAGE_COMPONENTS = {
    "detector": ("det_enc", "det_head"),
    "mllm": ("ref_enc", "lm"),
    "align": ("align",),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    """``lr_scale`` multiplies the learning rate per component, e.g. ``{"ref_enc": 0.1}``."""

    stage: str
    lr: float
    epochs: int
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9
    clip_norm: float | None = 1.0
    lr_scale: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGE_COMPONENTS:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def from_dict(cls, stage, d):
        return cls(stage=stage, **d)


@dataclass
class TrainReport:
    stage: str
    initial_val_loss: float | None = None
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self):
        return asdict(self)


# targets -------------------------------------------------------------------

def token_centers(arch):
    g = arch.image_size // arch.patch_size
    idx = np.arange(g * g)
    return (idx % g + 0.5) / g, (idx // g + 0.5) / g


def detection_targets(scenes, arch):
    """Per-token concept labels (B, S, |concepts|) and boxes (B, S, 4).

    Every token regresses a box: its object's box if it lies on one, else
    its own patch. Untrained background boxes would otherwise land anywhere
    and smear saliency maps over unrelated objects.
    """
    cx, cy = token_centers(arch)
    labels = np.zeros((len(scenes), arch.n_tokens, len(CONCEPTS)))
    g = arch.image_size // arch.patch_size
    own = np.stack([cx - 0.5 / g, cy - 0.5 / g, np.full_like(cx, 1.0 / g), np.full_like(cx, 1.0 / g)], axis=-1)
    boxes = np.repeat(own[None], len(scenes), axis=0)
    for b, scene in enumerate(scenes):
        for box in scene.gt_boxes:
            inside = ((cx >= box["x"]) & (cx < box["x"] + box["w"])
                      & (cy >= box["y"]) & (cy < box["y"] + box["h"]))
            for concept in box["concepts"]:
                labels[b, inside, M.QUERY_ID[concept]] = 1.0
            boxes[b, inside] = [box["x"], box["y"], box["w"], box["h"]]
    return labels, boxes


def lm_sequences(scene, include_likely=True):
    """(input words, per-position target distributions) for one scene."""
    V = len(M.VOCAB)
    seqs = []
    caption = scene.caption
    inputs = ["<bos>"] + caption[:-1]
    targets = []
    for w in caption:
        t = np.zeros(V)
        t[M.TOKEN_ID[w]] = 1.0
        targets.append(t)
    seqs.append((inputs, targets))
    for qa in scene.qa:
        t = np.zeros(V)
        t[M.TOKEN_ID[qa["answer"]]] = 1.0
        seqs.append((qa["question"], [None] * (len(qa["question"]) - 1) + [t]))
    if include_likely:
        for color in COLORS:
            p = scene.likely[color]
            t = np.zeros(V)
            t[M.YES], t[M.NO] = p, 1.0 - p
            seqs.append((["likely", color, "?"], [None, None, t]))
    return seqs


def pack_sequences(seqs):
    """Pad to a common length; returns ids (N, L), targets (N, L, V), weights (N, L)."""
    V = len(M.VOCAB)
    L = max(len(inp) for inp, _ in seqs)
    ids = np.full((len(seqs), L), M.PAD, dtype=np.int64)
    targets = np.zeros((len(seqs), L, V))
    weights = np.zeros((len(seqs), L))
    for n, (inp, tgt) in enumerate(seqs):
        ids[n, :len(inp)] = M.tokenize(inp)
        for j, t in enumerate(tgt):
            if t is not None:
                targets[n, j] = t
                weights[n, j] = 1.0
    return ids, targets, weights


# losses ----------------------------------------------------------------------

def detector_loss(P, arch, scenes):
    labels, boxes = detection_targets(scenes, arch)
    t = M.encode_vision(P, arch, stack_images(scenes), "detector")
    logits = M.detection_logits(P, t, list(CONCEPTS))
    loss = dc.bce_with_logits(logits, labels)
    # L1 box error summed over coordinates, averaged over tokens
    diff = dc.absolute(M.detection_boxes(P, t) - boxes)
    return loss + dc.sum(diff) * (1.0 / (len(scenes) * arch.n_tokens))


def mllm_loss(P, arch, scenes, vision=None):
    """Causal LM cross-entropy; ``vision`` overrides the reference prefix."""
    seqs, owner = [], []
    for b, scene in enumerate(scenes):
        s = lm_sequences(scene)
        seqs += s
        owner += [b] * len(s)
    ids, targets, weights = pack_sequences(seqs)
    if vision is None:
        vision = M.encode_vision(P, arch, stack_images(scenes), "reference")
    prefix = dc.take(vision, np.array(owner))
    logits = M.lm_forward(P, arch, prefix, ids)
    S = arch.n_tokens
    return dc.cross_entropy(logits[:, S:], targets, weights)


def alignment_loss(P, t_det, t_ref):
    """Mean over tokens of the squared L2 distance between aligned and reference tokens."""
    diff = M.align(P, t_det) - t_ref
    return dc.mean(dc.sum(dc.square(diff), axis=-1))


# metrics ---------------------------------------------------------------------

def detection_accuracy(P, arch, scenes):
    t = M.encode_vision(P, arch, stack_images(scenes), "detector")
    z, _ = M.detect(P, t, list(CONCEPTS))
    pred = z.data.max(axis=1) >= 0.5
    truth = np.array([[s.contains(c) for c in CONCEPTS] for s in scenes])
    return float((pred == truth).mean())


def answer_ids(P, arch, vision, concepts=CONCEPTS, head="contains"):
    """Greedy first answer token for "<head> c ?" for every scene x concept."""
    B = vision.shape[0]
    ids = np.array([M.tokenize([head, c, "?"]) for c in concepts])
    prefix = dc.take(vision, np.repeat(np.arange(B), len(concepts)))
    logits = M.lm_forward(P, arch, prefix, np.tile(ids, (B, 1)))
    return logits.data[:, -1].argmax(axis=-1).reshape(B, len(concepts))


def qa_accuracy(P, arch, scenes, vision):
    pred = answer_ids(P, arch, vision)
    truth = np.array([[M.YES if s.contains(c) else M.NO for c in CONCEPTS] for s in scenes])
    return float((pred == truth).mean())


# generic loop ------------------------------------------------------------------

def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _fit(params, config, train, val, loss_fn, metric_fn=None):
    trainable = STAGE_COMPONENTS[config.stage]
    frozen = [c for c in trainable if params.frozen.get(c)]
    if frozen:
        raise ValueError(f"stage {config.stage} would update frozen component(s) {frozen}")
    params = params.copy()
    names = sorted(n for n in params.arrays if M.component_of(n) in trainable)
    velocity = {n: np.zeros_like(params.arrays[n]) for n in names}
    report = TrainReport(stage=config.stage)
    start = time.perf_counter()

    def val_loss():
        return float(loss_fn(params.tensors(), val).data.reshape(-1)[0])

    if config.epochs == 0:
        return params, report
    report.initial_val_loss = val_loss()
    for epoch in range(config.epochs):
        rng = stream(config.seed, 20_000 + epoch, 0)
        total, count = 0.0, 0
        for idx in _batches(len(train), config.batch_size, rng):
            P = params.tensors(trainable)
            loss = loss_fn(P, [train[i] for i in idx])
            value = float(loss.data.reshape(-1)[0])
            if not np.isfinite(value):
                report.wall_time = time.perf_counter() - start
                raise TrainingDiverged(f"non-finite loss in stage {config.stage}, epoch {epoch}", report)
            tape = dc.Tape(loss)
            leaves = [P[n] for n in names if P[n] in tape]
            grads = dict(zip((leaf for leaf in leaves), tape.backward(loss, leaves)))
            gmap = {n: grads.get(P[n]) for n in names}
            norm = np.sqrt(sum(float((g * g).sum()) for g in gmap.values() if g is not None))
            scale = 1.0
            if config.clip_norm and norm > config.clip_norm:
                scale = config.clip_norm / norm
            for n in names:
                g = gmap[n]
                if g is None:
                    continue
                velocity[n] = config.momentum * velocity[n] + scale * g
                lr = config.lr * config.lr_scale.get(M.component_of(n), 1.0)
                params.arrays[n] = params.arrays[n] - lr * velocity[n]
            total += value * len(idx)
            count += len(idx)
        report.train_loss.append(total / count)
        report.val_loss.append(val_loss())
        if metric_fn is not None:
            report.val_metric.append(metric_fn(params))
        log.info("%s epoch %d train %.4f val %.4f", config.stage, epoch, report.train_loss[-1], report.val_loss[-1])
    report.wall_time = time.perf_counter() - start
    return params, report


# stages --------------------------------------------------------------------------

def pretrain_detector(params, train, val, config):
    arch = params.arch
    return _fit(
        params, config, train, val,
        lambda P, scenes: detector_loss(P, arch, scenes),
        lambda p: detection_accuracy(p.tensors(), arch, val),
    )


def pretrain_mllm(params, train, val, config):
    arch = params.arch

    def metric(p):
        P = p.tensors()
        return qa_accuracy(P, arch, val, M.encode_vision(P, arch, stack_images(val), "reference"))

    return _fit(params, config, train, val, lambda P, scenes: mllm_loss(P, arch, scenes), metric)


def train_alignment(params, train, val, config):
    """Fit the alignment MLP; encoders and LM are frozen and left untouched."""
    arch = params.arch
    base = params.tensors()
    cache = {}

    def targets(scenes):
        key = tuple(id(s) for s in scenes)
        if key not in cache:
            imgs = stack_images(scenes)
            cache[key] = (M.encode_vision(base, arch, imgs, "detector").data,
                          M.encode_vision(base, arch, imgs, "reference").data)
        return cache[key]

    # frozen encoders: evaluate each scene once
    pairs = {}
    for chunk in (train, val):
        for i in range(0, len(chunk), 64):
            part = chunk[i:i + 64]
            t_det, t_ref = targets(part)
            for s, a, b in zip(part, t_det, t_ref):
                pairs[id(s)] = (a, b)
    cache.clear()

    def loss_fn(P, scenes):
        t_det = np.stack([pairs[id(s)][0] for s in scenes])
        t_ref = np.stack([pairs[id(s)][1] for s in scenes])
        return alignment_loss(P, dc.constant(t_det), dc.constant(t_ref))

    frozen = {c: True for c in ("det_enc", "det_head", "ref_enc", "lm")}
    params = params.copy()
    params.frozen.update(frozen)
    return _fit(params, config, train, val, loss_fn)
