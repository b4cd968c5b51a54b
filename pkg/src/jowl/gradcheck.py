"""Finite-difference checks: random op graphs and the full joint model."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import models as M
from .pipeline import embed

SHAPE = (3, 4)


def _unary(rng, x):
    kind = rng.integers(9)
    if kind == 0:
        return dc.gelu(x)
    if kind == 1:
        return dc.sigmoid(x)
    if kind == 2:
        return dc.softmax(x, axis=-1)
    if kind == 3:
        g = dc.Tensor(rng.normal(size=x.shape[-1]), requires_grad=True)
        b = dc.Tensor(rng.normal(size=x.shape[-1]), requires_grad=True)
        return dc.layer_norm(x, g, b)
    if kind == 4:
        return dc.square(x) * 0.5
    if kind == 5:
        w = dc.Tensor(rng.normal(size=(x.shape[-1], x.shape[-1])) / 2.0, requires_grad=True)
        return dc.matmul(x, w)
    if kind == 6:
        return dc.transpose(dc.reshape(x, SHAPE[::-1]), (1, 0))
    if kind == 7:
        return dc.take(x, rng.integers(x.shape[0], size=x.shape[0]))
    # kinks at 0 are never hit by continuous random inputs
    return dc.absolute(x) if rng.random() < 0.5 else dc.relu(x)


def _binary(rng, x, y):
    kind = rng.integers(5)
    if kind == 0:
        return x + y
    if kind == 1:
        return x - y
    if kind == 2:
        return x * y
    if kind == 3:
        return dc.minimum(x, y)
    z = dc.concat([x, y], axis=0)
    return dc.take(z, np.arange(x.shape[0]) * 2 % z.shape[0])


def _head(rng, x):
    kind = rng.integers(4)
    if kind == 0:
        return dc.sum(x * dc.constant(rng.normal(size=x.shape)))
    if kind == 1:
        return dc.reshape(dc.l2_norm(x), (1,))
    if kind == 2:
        return dc.cross_entropy(x, rng.integers(x.shape[-1], size=x.shape[:-1]))
    return dc.bce_with_logits(x, (rng.random(size=x.shape) < 0.5).astype(np.float64))


def random_graph(seed, n_ops=6):
    """(scalar output, input leaf) of a random graph over a fixed-shape leaf."""
    rng = np.random.default_rng(seed)
    leaf = dc.Tensor(rng.normal(size=SHAPE), requires_grad=True)
    nodes = [leaf, dc.Tensor(rng.normal(size=SHAPE), requires_grad=True)]
    for _ in range(n_ops):
        x = nodes[rng.integers(len(nodes))]
        if rng.random() < 0.5:
            out = _unary(rng, x)
        else:
            out = _binary(rng, x, nodes[rng.integers(len(nodes))])
        nodes.append(out)
    # every node feeds the output, so the leaf is always on the tape
    total = nodes[0]
    for n in nodes[1:]:
        total = total + n
    return _head(rng, total), leaf


def random_graphs_error(n_graphs=100, seed=0, n_samples=12):
    worst = 0.0
    for k in range(n_graphs):
        out, leaf = random_graph([seed, k])
        worst = max(worst, dc.check_gradients(out, leaf, n_samples=n_samples, seed=k))
    return worst


def model_errors(params, image, prompt, concept, n_samples=12, seed=0):
    """Worst error of d l[s]/dt and of every d z_i/dt against finite differences."""
    P = params.tensors()
    t = dc.Tensor(embed(params, image), requires_grad=True)
    ids = np.asarray([M.tokenize(prompt)], dtype=np.int64)
    logits = M.lm_forward(P, params.arch, M.align(P, t), ids)
    s = int(np.argmax(logits.data[0, -1]))
    text = dc.check_gradients(logits[0, -1, s], t, n_samples=n_samples, seed=seed)
    z, _ = M.detect(P, t, [concept])
    boxes = 0.0
    for i in range(z.shape[0]):
        boxes = max(boxes, dc.check_gradients(z[i, 0], t, n_samples=n_samples, seed=seed + 1 + i))
    return {"text": text, "boxes": boxes}
