"""Reverse-mode differentiation over dense float64 arrays.

Every operator eagerly computes its value and records its parents plus a
forward and a backward closure. A :class:`Tape` is the topologically ordered
list of nodes reachable from an output; it can be replayed with substituted
leaf values (used by the finite-difference checker) and differentiated.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> y = x * x
    >>> grad(y, x)
    array([6.])
"""

from __future__ import annotations

import itertools
import math

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "GradientError", "tensor", "constant",
    "add", "sub", "mul", "neg", "matmul", "gelu", "relu", "sigmoid",
    "softmax", "layer_norm", "embedding", "concat", "reshape", "transpose",
    "take", "sum", "mean", "l2_norm", "minimum", "square", "absolute",
    "cross_entropy", "bce_with_logits", "forward", "grad", "check_gradients",
    "sign",
]

_ids = itertools.count()
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operator applied to incompatible shapes."""


class GradientError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "op", "_fwd", "_bwd", "requires_grad", "uid", "__weakref__")

    def __init__(self, data, requires_grad=False, *, _parents=(), _op="leaf", _fwd=None, _bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = _parents
        self.op = _op
        self._fwd = _fwd
        self._bwd = _bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.uid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data, requires_grad=False)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op, parents, fwd, bwd):
    values = [p.data for p in parents]
    try:
        out = fwd(*values)
    except (ValueError, IndexError) as exc:
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"{op} node #{next(_ids)} rejected input shapes ({shapes}): {exc}") from exc
    out = np.asarray(out, dtype=np.float64)
    return Tensor(out, _parents=tuple(parents), _op=op, _fwd=fwd, _bwd=bwd)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    return _node(
        "add", (a, b), np.add,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    return _node(
        "sub", (a, b), np.subtract,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    return _node(
        "mul", (a, b), np.multiply,
        lambda g, x, y, out: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def neg(a):
    return _node("neg", (a,), np.negative, lambda g, x, out: (-g,))


def absolute(a):
    return _node("abs", (a,), np.abs, lambda g, x, out: (g * np.sign(x),))


def square(a):
    return _node("square", (a,), np.square, lambda g, x, out: (2.0 * x * g,))


def minimum(a, b):
    """Elementwise minimum; ties send the gradient to the first argument."""
    a, b = _lift(a), _lift(b)
    _check_broadcast("minimum", a, b)

    def bwd(g, x, y, out):
        first = x <= y
        return (_unbroadcast(np.where(first, g, 0.0), x.shape),
                _unbroadcast(np.where(first, 0.0, g), y.shape))

    return _node("minimum", (a, b), np.minimum, bwd)


# linear algebra ------------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul node #{next(_ids)}: incompatible shapes {a.shape} @ {b.shape}")

    def bwd(g, x, y, out):
        gx = g @ np.swapaxes(y, -1, -2)
        if y.ndim == 2:
            # shared weight: fold the batch axes into one product
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gy = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _node("matmul", (a, b), np.matmul, bwd)


# activations ---------------------------------------------------------------

def _gelu(x):
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2)))


def _gelu_grad(x):
    x2 = x * x
    t = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2))
    du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def gelu(a):
    """GELU, tanh approximation."""
    return _node("gelu", (a,), _gelu, lambda g, x, out: (g * _gelu_grad(x),))


def relu(a):
    return _node("relu", (a,), lambda x: np.maximum(x, 0.0), lambda g, x, out: (g * (x > 0),))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    return _node("sigmoid", (a,), _sigmoid, lambda g, x, out: (g * out * (1.0 - out),))


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    def bwd(g, x, out):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node("softmax", (a,), lambda x: _softmax(x, axis), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    a, gamma, beta = _lift(a), _lift(gamma), _lift(beta)
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise ShapeError(f"layer_norm node #{next(_ids)}: gain/bias {gamma.shape}/{beta.shape} vs input {a.shape}")

    def stats(x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        return xc * inv, inv

    def fwd(x, gm, bt):
        xhat, _ = stats(x)
        return xhat * gm + bt

    def bwd(g, x, gm, bt, out):
        xhat, inv = stats(x)
        gh = g * gm
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node("layer_norm", (a, gamma, beta), fwd, bwd)


# indexing and shape ---------------------------------------------------------

def embedding(table, ids):
    """Row lookup ``table[ids]`` with integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding node #{next(_ids)}: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding node #{next(_ids)}: id out of range for table {table.shape}")

    def bwd(g, t, out):
        gt = np.zeros_like(t)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, t.shape[1]))
        return (gt,)

    return _node("embedding", (table,), lambda t: t[ids], bwd)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g, *args):
        return tuple(np.split(g, cuts, axis=axis))

    return _node("concat", tensors, lambda *xs: np.concatenate(xs, axis=axis), bwd)


def reshape(a, shape):
    shape = tuple(shape)
    return _node("reshape", (a,), lambda x: x.reshape(shape), lambda g, x, out: (g.reshape(x.shape),))


def transpose(a, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node("transpose", (a,), lambda x: np.transpose(x, axes),
                 lambda g, x, out: (np.transpose(g, inv),))


def take(a, index):
    """Basic or advanced indexing ``a[index]``."""

    def bwd(g, x, out):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)

    return _node("index", (a,), lambda x: x[index], bwd)


# reductions ----------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return _node("sum", (a,), lambda x: x.sum(axis=axis, keepdims=keepdims),
                 lambda g, x, out: (np.array(_expand(g, x.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims=False):
    def bwd(g, x, out):
        n = x.size // max(out.size, 1) if axis is not None else x.size
        return (np.array(_expand(g, x.shape, axis, keepdims)) / n,)

    return _node("mean", (a,), lambda x: x.mean(axis=axis, keepdims=keepdims), bwd)


def l2_norm(a, axis=None, keepdims=False):
    def fwd(x):
        return np.sqrt((x * x).sum(axis=axis, keepdims=keepdims))

    def bwd(g, x, out):
        o = _expand(out, x.shape, axis, keepdims)
        gg = _expand(g, x.shape, axis, keepdims)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, gg * x / safe, 0.0),)

    return _node("l2_norm", (a,), fwd, bwd)


# losses --------------------------------------------------------------------

def cross_entropy(logits, target, weights=None):
    """Weighted sum over rows of ``-sum_k target_k log softmax(logits)_k``.

    ``target`` is either integer class ids (shape = logits.shape[:-1]) or a
    probability array matching ``logits``. ``weights`` scales each row; the
    result is the weighted sum divided by the weight total.
    """
    target = np.asarray(target)
    lead = logits.shape[:-1]
    if target.dtype.kind in "iu":
        if target.shape != lead:
            raise ShapeError(f"cross_entropy node #{next(_ids)}: targets {target.shape} vs logits {logits.shape}")
        onehot = np.zeros(logits.shape)
        np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
        target = onehot
    elif target.shape != logits.shape:
        raise ShapeError(f"cross_entropy node #{next(_ids)}: targets {target.shape} vs logits {logits.shape}")
    w = np.ones(lead) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: weights sum to zero")

    def fwd(z):
        m = z.max(axis=-1, keepdims=True)
        logp = z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
        return np.array([-(w * (target * logp).sum(axis=-1)).sum() / total])

    def bwd(g, z, out):
        p = _softmax(z)
        rowmass = target.sum(axis=-1, keepdims=True)
        return (g[0] * w[..., None] * (p * rowmass - target) / total,)

    return _node("cross_entropy", (logits,), fwd, bwd)


def bce_with_logits(logits, target, weights=None):
    """Weighted mean binary cross-entropy computed from pre-sigmoid logits."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"bce node #{next(_ids)}: targets {target.shape} vs logits {logits.shape}")
    w = np.ones(target.shape) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), target.shape)
    total = w.sum()

    def fwd(z):
        per = np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))
        return np.array([(w * per).sum() / total])

    def bwd(g, z, out):
        return (g[0] * w * (_sigmoid(z) - target) / total,)

    return _node("bce", (logits,), fwd, bwd)


def sign(x):
    """Sign with sign(0) = 0, on raw arrays."""
    return np.sign(np.asarray(x, dtype=np.float64))


# tape ----------------------------------------------------------------------

class Tape:
    """Nodes reachable from ``output``, parents before children."""

    def __init__(self, output):
        self.output = output
        order, seen, stack = [], set(), [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for p in reversed(node.parents):
                if p.uid not in seen:
                    stack.append((p, False))
        self.nodes = order
        self._members = {n.uid for n in order}

    def __contains__(self, node):
        return node.uid in self._members

    def __len__(self):
        return len(self.nodes)

    def replay(self, feeds=None):
        """Recompute every node; ``feeds`` maps leaf tensors to new arrays."""
        feeds = {t.uid: np.asarray(v, dtype=np.float64) for t, v in (feeds or {}).items()}
        values = {}
        for node in self.nodes:
            if node.is_leaf:
                values[node.uid] = feeds.get(node.uid, node.data)
            else:
                args = [values[p.uid] for p in node.parents]
                values[node.uid] = np.asarray(node._fwd(*args), dtype=np.float64)
        return values

    def backward(self, output, leaves, seed=None):
        if output not in self:
            raise GradientError("output is not on this tape")
        if output.data.size != 1 and seed is None:
            raise GradientError(f"gradient requires a scalar output, got shape {output.shape}")
        for leaf in leaves:
            if leaf not in self:
                raise GradientError(f"leaf {leaf!r} is not on the tape")
        grads = {output.uid: np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=np.float64)}
        wanted = {leaf.uid for leaf in leaves}
        for node in reversed(self.nodes):
            g = grads.get(node.uid)
            if g is None or node.is_leaf or not node.requires_grad:
                continue
            if node.uid not in wanted:
                grads.pop(node.uid)
            pgrads = node._bwd(g, *[p.data for p in node.parents], node.data)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not (p.requires_grad or p.uid in wanted):
                    continue
                if p.uid in grads:
                    grads[p.uid] = grads[p.uid] + pg
                else:
                    grads[p.uid] = pg
        return [grads.get(leaf.uid, np.zeros_like(leaf.data)) for leaf in leaves]


def forward(tape, feeds=None):
    """Value of the tape's output, optionally with substituted leaves."""
    if feeds is None:
        return tape.output.data
    return tape.replay(feeds)[tape.output.uid]


def grad(output, leaves, tape=None):
    """d(output)/d(leaf) for one leaf or a list of leaves."""
    single = isinstance(leaves, Tensor)
    leaf_list = [leaves] if single else list(leaves)
    tape = tape or Tape(output)
    out = tape.backward(output, leaf_list)
    return out[0] if single else out


def check_gradients(output, leaf, n_samples=10, step=1e-4, seed=0, tape=None, floor=1e-6):
    """Worst relative error between reverse-mode and finite differences.

    Coordinates of ``leaf`` are sampled without replacement and probed with
    the fourth-order central stencil. The error is
    ``|a - n| / max(|a|, |n|, floor)``: gradients smaller than ``floor`` are
    compared on that absolute scale, where rounding noise of the stencil
    would otherwise dominate.
    """
    tape = tape or Tape(output)
    analytic = tape.backward(output, [leaf])[0].reshape(-1)
    base = leaf.data.reshape(-1)
    rng = np.random.default_rng(seed)
    n = min(n_samples, base.size)
    coords = np.sort(rng.choice(base.size, size=n, replace=False))

    def f(k, offset):
        x = base.copy()
        x[k] += offset
        return forward(tape, {leaf: x.reshape(leaf.shape)}).reshape(-1)[0]

    worst = 0.0
    for k in coords:
        numeric = (8.0 * (f(k, step) - f(k, -step)) - (f(k, 2 * step) - f(k, -2 * step))) / (12.0 * step)
        a = analytic[k]
        denom = max(abs(a), abs(numeric), floor)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
