"""Learnable components of the joint detector / language-model architecture.

Five parameter groups, keyed by name prefix:

``det_enc``   detection vision encoder (image -> S x d_vision tokens)
``det_head``  open-vocabulary detection head (tokens, queries -> scores, boxes)
``ref_enc``   reference vision encoder (image -> S x d_lang tokens)
``align``     per-token alignment MLP (d_vision -> d_lang)
``lm``        causal transformer language model

Everything is expressed with :mod:`jowl.diffcore` so any output can be
differentiated with respect to any intermediate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .synthgen import CONCEPTS, stream

COMPONENTS = ("det_enc", "det_head", "ref_enc", "align", "lm")

VOCAB = (
    "<pad>", "<bos>", "<eos>",
    "circle", "square", "triangle",
    "red", "green", "blue",
    "contains", "likely", "?", "yes", "no",
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD, BOS, EOS = TOKEN_ID["<pad>"], TOKEN_ID["<bos>"], TOKEN_ID["<eos>"]
YES, NO = TOKEN_ID["yes"], TOKEN_ID["no"]
QUERY_ID = {c: i for i, c in enumerate(CONCEPTS)}


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 64
    patch_size: int = 16
    d_vision: int = 32
    d_lang: int = 48
    align_hidden: int = 128
    d_query: int = 32
    vision_blocks: int = 2
    vision_heads: int = 2
    lm_blocks: int = 2
    lm_heads: int = 2
    mlp_ratio: int = 4
    max_prompt: int = 32

    @property
    def n_tokens(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def context(self):
        return self.n_tokens + self.max_prompt

    @property
    def vocab_size(self):
        return len(VOCAB)

    @classmethod
    def paper_scale(cls):
        # 768 px input, 32 px patches -> 24 x 24 = 576 tokens
        return cls(image_size=768, patch_size=32, d_vision=768, d_lang=4096, align_hidden=8192,
                   d_query=512)

    def to_dict(self):
        return asdict(self)


# parameters -----------------------------------------------------------------

def _block_shapes(prefix, d, ratio):
    return {
        f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.wq": (d, d), f"{prefix}.attn.bq": (d,),
        f"{prefix}.attn.wk": (d, d), f"{prefix}.attn.bk": (d,),
        f"{prefix}.attn.wv": (d, d), f"{prefix}.attn.bv": (d,),
        f"{prefix}.attn.wo": (d, d), f"{prefix}.attn.bo": (d,),
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
        f"{prefix}.mlp.w1": (d, ratio * d), f"{prefix}.mlp.b1": (ratio * d,),
        f"{prefix}.mlp.w2": (ratio * d, d), f"{prefix}.mlp.b2": (d,),
    }


def _encoder_shapes(prefix, arch, d):
    patch_dim = arch.patch_size * arch.patch_size * 3
    shapes = {
        f"{prefix}.patch.w": (patch_dim, d), f"{prefix}.patch.b": (d,),
        f"{prefix}.pos": (arch.n_tokens, d),
    }
    for k in range(arch.vision_blocks):
        shapes.update(_block_shapes(f"{prefix}.block{k}", d, arch.mlp_ratio))
    shapes.update({f"{prefix}.ln_f.g": (d,), f"{prefix}.ln_f.b": (d,)})
    return shapes


def parameter_shapes(arch, components=COMPONENTS):
    dv, dl = arch.d_vision, arch.d_lang
    shapes = {}
    if "det_enc" in components:
        shapes.update(_encoder_shapes("det_enc", arch, dv))
    if "det_head" in components:
        shapes.update({
            "det_head.proj.w": (dv, arch.d_query), "det_head.proj.b": (arch.d_query,),
            "det_head.query": (len(CONCEPTS), arch.d_query),
            "det_head.temp": (1,), "det_head.bias": (1,),
            "det_head.box.w": (dv, 4), "det_head.box.b": (4,),
        })
    if "ref_enc" in components:
        shapes.update(_encoder_shapes("ref_enc", arch, dl))
    if "align" in components:
        h = arch.align_hidden
        shapes.update({
            "align.w1": (dv, h), "align.b1": (h,),
            "align.w2": (h, h), "align.b2": (h,),
            "align.w3": (h, dl), "align.b3": (dl,),
        })
    if "lm" in components:
        shapes.update({
            "lm.tok": (arch.vocab_size, dl), "lm.pos": (arch.context, dl),
        })
        for k in range(arch.lm_blocks):
            shapes.update(_block_shapes(f"lm.block{k}", dl, arch.mlp_ratio))
        shapes.update({
            "lm.ln_f.g": (dl,), "lm.ln_f.b": (dl,),
            "lm.head.w": (dl, arch.vocab_size), "lm.head.b": (arch.vocab_size,),
        })
    return shapes


def component_of(name):
    return name.split(".", 1)[0]


class ModelParams:
    """Named float64 arrays plus a frozen flag per component."""

    def __init__(self, arch, arrays, frozen=None):
        self.arch = arch
        self.arrays = dict(arrays)
        self.frozen = {c: False for c in COMPONENTS}
        self.frozen.update(frozen or {})
        expected = parameter_shapes(arch, self.components)
        for name, shape in expected.items():
            if name not in self.arrays:
                raise KeyError(f"missing parameter {name}")
            if self.arrays[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.arrays[name].shape}, expected {shape}")

    @property
    def components(self):
        return tuple(c for c in COMPONENTS if any(component_of(n) == c for n in self.arrays))

    def copy(self):
        return ModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()}, dict(self.frozen))

    def subset(self, components):
        return {k: v for k, v in self.arrays.items() if component_of(k) in components}

    def tensors(self, trainable=()):
        """Wrap arrays as diffcore leaves; ``trainable`` components require grad."""
        return {k: dc.Tensor(v, requires_grad=component_of(k) in trainable) for k, v in self.arrays.items()}

    def __eq__(self, other):
        return (isinstance(other, ModelParams) and self.arch == other.arch
                and self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()))


RESIDUAL_OUT = ("attn.wo", "mlp.w2")


def init_params(arch=None, seed=0, components=COMPONENTS, scheme="uniform", residual_scale=1.0):
    """Scaled-uniform weights, zero biases, unit layer-norm gains.

    ``scheme="zeros"`` zeroes every weight (gains stay 1); it exists for
    degenerate-case checks and shape-only construction at large scale.
    """
    arch = arch or ArchConfig()
    arrays = {}
    for k, (name, shape) in enumerate(sorted(parameter_shapes(arch, components).items())):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arrays[name] = np.ones(shape)
        elif leaf == "temp":
            arrays[name] = np.ones(shape) * (0.0 if scheme == "zeros" else 1.0)
        elif len(shape) == 1 or scheme == "zeros":
            arrays[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            rng = stream(seed, 10_000 + k, 0)
            if name.endswith(RESIDUAL_OUT):
                limit *= residual_scale
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(arch, arrays)


# building blocks ---------------------------------------------------------

def linear(x, P, prefix_w, prefix_b):
    return dc.matmul(x, P[prefix_w]) + P[prefix_b]


def attention(x, P, prefix, n_heads, mask=None):
    B, T, D = x.shape
    dh = D // n_heads

    def heads(t):
        return dc.transpose(dc.reshape(t, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(x, P, f"{prefix}.wq", f"{prefix}.bq"))
    k = heads(linear(x, P, f"{prefix}.wk", f"{prefix}.bk"))
    v = heads(linear(x, P, f"{prefix}.wv", f"{prefix}.bv"))
    scores = dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    out = dc.matmul(dc.softmax(scores, axis=-1), v)
    out = dc.reshape(dc.transpose(out, (0, 2, 1, 3)), (B, T, D))
    return linear(out, P, f"{prefix}.wo", f"{prefix}.bo")


def block(x, P, prefix, n_heads, mask=None):
    h = dc.layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    x = x + attention(h, P, f"{prefix}.attn", n_heads, mask)
    h = dc.layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    h = dc.gelu(linear(h, P, f"{prefix}.mlp.w1", f"{prefix}.mlp.b1"))
    return x + linear(h, P, f"{prefix}.mlp.w2", f"{prefix}.mlp.b2")


def causal_mask(T):
    return np.triu(np.full((T, T), -1e30), k=1)


# encoders ----------------------------------------------------------------

def patchify(images, patch):
    images = np.asarray(images, dtype=np.float64)
    B, H, W, C = images.shape
    g = H // patch
    x = images.reshape(B, g, patch, g, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * g, patch * patch * C)


def check_images(images, arch):
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (arch.image_size, arch.image_size, 3):
        raise ValueError(f"expected image(s) of shape ({arch.image_size}, {arch.image_size}, 3), "
                         f"got {images.shape[-3:] if images.ndim >= 3 else images.shape}")
    return images, single


def encode_vision(P, arch, images, which="detector"):
    """Vision tokens for a batch ``(B, H, W, 3)``; returns a (B, S, D) tensor."""
    prefix = {"detector": "det_enc", "reference": "ref_enc"}[which]
    images, _ = check_images(images, arch)
    x = dc.constant(patchify(images, arch.patch_size))
    h = linear(x, P, f"{prefix}.patch.w", f"{prefix}.patch.b") + P[f"{prefix}.pos"]
    for k in range(arch.vision_blocks):
        h = block(h, P, f"{prefix}.block{k}", arch.vision_heads)
    return dc.layer_norm(h, P[f"{prefix}.ln_f.g"], P[f"{prefix}.ln_f.b"])


def query_ids(queries):
    unknown = [q for q in queries if q not in QUERY_ID]
    if unknown:
        raise VocabularyError(f"unknown query word(s): {unknown}")
    if not queries:
        raise VocabularyError("query set is empty")
    return np.array([QUERY_ID[q] for q in queries])


def detection_logits(P, t, queries):
    """Pre-sigmoid query scores, shape (..., S, |Q|)."""
    q = dc.embedding(P["det_head.query"], query_ids(queries))
    proj = linear(t, P, "det_head.proj.w", "det_head.proj.b")
    # broadcast product + row sum rather than matmul: each query column is
    # computed alone, so scores do not depend on which other queries are asked
    proj = dc.reshape(proj, proj.shape[:-1] + (1, proj.shape[-1]))
    sim = dc.sum(proj * q, axis=-1)
    return sim * P["det_head.temp"] + P["det_head.bias"]


def detection_boxes(P, t):
    """(..., S, 4) boxes (x, y, w, h) with w, h clamped to stay inside [0, 1]."""
    raw = dc.sigmoid(linear(t, P, "det_head.box.w", "det_head.box.b"))
    xy = raw[..., 0:2]
    wh = dc.minimum(raw[..., 2:4], 1.0 - xy)
    return dc.concat([xy, wh], axis=-1)


def detect(P, t, queries):
    return dc.sigmoid(detection_logits(P, t, queries)), detection_boxes(P, t)


def align(P, t):
    h = dc.gelu(linear(t, P, "align.w1", "align.b1"))
    h = dc.gelu(linear(h, P, "align.w2", "align.b2"))
    return linear(h, P, "align.w3", "align.b3")


# language model ----------------------------------------------------------

def tokenize(words):
    words = list(words)
    unknown = [w for w in words if w not in TOKEN_ID]
    if unknown:
        raise VocabularyError(f"out-of-vocabulary word(s): {unknown}")
    return [TOKEN_ID[w] for w in words]


def detokenize(ids):
    return [VOCAB[int(i)] for i in ids]


def lm_forward(P, arch, vision, ids):
    """Logits (B, S + n, V) for vision prefix (B, S, d_lang) and ids (B, n)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.shape[1] > arch.max_prompt:
        raise ValueError(f"prompt of {ids.shape[1]} tokens exceeds the limit of {arch.max_prompt}")
    B = ids.shape[0]
    if vision.data.ndim == 2:
        vision = dc.reshape(vision, (1,) + vision.shape)
    if vision.shape[0] != B:
        raise dc.ShapeError(f"vision batch {vision.shape[0]} != prompt batch {B}")
    parts = [vision]
    if ids.shape[1]:
        parts.append(dc.embedding(P["lm.tok"], ids))
    x = dc.concat(parts, axis=1) if len(parts) > 1 else vision
    T = x.shape[1]
    x = x + P["lm.pos"][:T]
    mask = causal_mask(T)
    for k in range(arch.lm_blocks):
        x = block(x, P, f"lm.block{k}", arch.lm_heads, mask)
    x = dc.layer_norm(x, P["lm.ln_f.g"], P["lm.ln_f.b"])
    return linear(x, P, "lm.head.w", "lm.head.b")


def decode_greedy(P, arch, vision, prompt_ids, steps, logits=None):
    """Greedy continuation of one sequence; stops at ``<eos>`` or ``steps`` tokens."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ids = list(prompt_ids)
    out = []
    for _ in range(steps):
        if logits is None:
            logits = lm_forward(P, arch, vision, np.array([ids], dtype=np.int64))
        nxt = int(np.argmax(logits.data[0, -1]))
        out.append(nxt)
        if nxt == EOS or len(ids) + 1 > arch.max_prompt:
            break
        ids.append(nxt)
        logits = None
    return out
