"""Evaluation protocols: detection-vs-answer correlation and attack-induced bias deltas."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special, stats

from . import diffcore as dc
from . import models as M
from .attack import DEFAULT_RELATIVE_DELTA, AttackConfig, ConceptSets, semantic_fgsm
from .pipeline import embed
from .synthgen import CONCEPTS, stack_images

OMEGA = CONCEPTS
CHUNK = 64


def workers():
    """Evaluation thread count from ``JOWL_THREADS`` (default 1)."""
    raw = os.environ.get("JOWL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"JOWL_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def ordered_map(fn, items):
    """``[fn(x) for x in items]``, threaded when JOWL_THREADS > 1; order is kept."""
    items = list(items)
    n = workers()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _chunks(seq, size=None):
    size = size or CHUNK
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def embed_scenes(params, scenes):
    """Detector embeddings (N, S, D) of a list of scenes."""
    P = params.tensors()

    def run(chunk):
        return M.encode_vision(P, params.arch, stack_images(chunk), "detector").data

    return np.concatenate(ordered_map(run, _chunks(scenes)), axis=0)


def _as_embedding(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[-1] == 3:
        return embed(params, x)
    return x


# per-input measures -----------------------------------------------------------

def max_q(params, x, concept):
    """Highest score over all tokens for the single query ``concept``.

    ``x`` is an image (H, W, 3) or a precomputed embedding (S, D).
    """
    if concept not in OMEGA:
        raise M.VocabularyError(f"{concept!r} is not a concept")
    t = _as_embedding(params, x)
    z, _ = M.detect(params.tensors(), dc.constant(t), [concept])
    return float(z.data.max())


def yes_ratio(logits):
    """p(yes) / (p(yes) + p(no)) from the softmax of a logit row (or rows)."""
    logits = np.asarray(logits, dtype=np.float64)
    y, n = logits[..., M.YES], logits[..., M.NO]
    # the softmax normaliser cancels: p_yes / (p_yes + p_no) = sigmoid(y - n)
    return special.expit(y - n)


def _check_probe(prompt):
    prompt = list(prompt)
    if not prompt or prompt[-1] != "?":
        raise ValueError(f"probe prompt must end with '?', got {prompt}")
    return M.tokenize(prompt)


def _last_logits(params, embeddings, prompt_ids):
    P = params.tensors()

    def run(chunk):
        vision = M.align(P, dc.constant(chunk))
        ids = np.tile(np.asarray(prompt_ids, dtype=np.int64), (len(chunk), 1))
        return M.lm_forward(P, params.arch, vision, ids).data[:, -1]

    return np.concatenate(ordered_map(run, _chunks(embeddings)), axis=0)


def score_answer(params, x, prompt):
    """Yes-probability ratio of the next token after ``prompt``."""
    ids = _check_probe(prompt)
    t = _as_embedding(params, x)
    return float(yes_ratio(_last_logits(params, t[None], ids)[0]))


def score_answers(params, embeddings, prompt):
    """:func:`score_answer` for a batch of embeddings (N, S, D)."""
    return yes_ratio(_last_logits(params, embeddings, _check_probe(prompt)))


# hallucination ------------------------------------------------------------------

BUCKETS = ("gt_yes", "gt_no", "neg_yes", "neg_no")


@dataclass
class HallucinationReport:
    means: dict
    counts: dict
    malformed: int = 0

    def to_dict(self):
        return asdict(self)


def hallucination_records(params, scenes):
    """(answer ids (N, 6), max_q (N, 6), ground truth (N, 6)) over concepts OMEGA."""
    t = embed_scenes(params, scenes)
    answers = np.stack([_last_logits(params, t, M.tokenize(["contains", c, "?"])).argmax(axis=-1)
                        for c in OMEGA], axis=1)
    P = params.tensors()
    scores = np.stack([M.detect(P, dc.constant(t), [c])[0].data.max(axis=(1, 2)) for c in OMEGA], axis=1)
    truth = np.array([[s.contains(c) for c in OMEGA] for s in scenes], dtype=bool)
    return answers, scores, truth


def hallucination_report(params, scenes):
    answers, scores, truth = hallucination_records(params, scenes)
    yes = answers == M.YES
    malformed = int(((answers != M.YES) & (answers != M.NO)).sum())
    masks = {
        "gt_yes": truth & yes,
        "gt_no": truth & ~yes,
        "neg_yes": ~truth & yes,
        "neg_no": ~truth & ~yes,
    }
    means = {k: (float(scores[m].mean()) if m.any() else None) for k, m in masks.items()}
    counts = {k: int(m.sum()) for k, m in masks.items()}
    return HallucinationReport(means=means, counts=counts, malformed=malformed)


# bias -----------------------------------------------------------------------------

@dataclass
class BiasRow:
    probe: list
    minus: list
    plus: list
    delta: float
    n: int
    std: float
    p_value: float | None
    kind: str = "property"

    def to_dict(self):
        return asdict(self)


@dataclass
class BiasReport:
    rows: list = field(default_factory=list)
    delta_param: float | None = None

    def row(self, kind="property"):
        return next(r for r in self.rows if r.kind == kind)

    def to_dict(self):
        return {"delta_param": self.delta_param, "rows": [r.to_dict() for r in self.rows]}


def _row(probe, sets, before, after, kind):
    d = after - before
    n = len(d)
    std = float(d.std(ddof=1)) if n > 1 else 0.0
    p = None
    if n > 1:
        # identical deltas give an undefined statistic; a constant zero is "no effect"
        p = 1.0 if std == 0.0 and d[0] == 0.0 else float(stats.ttest_1samp(d, 0.0).pvalue)
        if std == 0.0 and d[0] != 0.0:
            p = 0.0
    return BiasRow(list(probe), list(sets.minus), list(sets.plus), float(d.mean()), n, std, p, kind)


def attacked_embeddings(params, embeddings, sets, config=None, relative=DEFAULT_RELATIVE_DELTA):
    """FGSM every embedding; ``config=None`` uses ``relative`` x RMS per item."""
    if config is not None:
        return semantic_fgsm(params, None, sets, config, embedding=embeddings)[0]
    adv = [semantic_fgsm(params, None, sets, AttackConfig.relative(t, relative), embedding=t)[0]
           for t in embeddings]
    return np.stack(adv)


def bias_report(params, scenes, sets, probe, config=None, relative=DEFAULT_RELATIVE_DELTA):
    """Probe-score deltas under the C- -> C+ attack, over scenes containing all of C-."""
    if not isinstance(sets, ConceptSets):
        sets = ConceptSets(*sets)
    _check_probe(probe)
    chosen = [s for s in scenes if all(s.contains(c) for c in sets.minus)]
    if not chosen:
        raise ValueError(f"no scene out of {len(scenes)} contains {list(sets.minus)}")
    t = embed_scenes(params, chosen)
    adv = attacked_embeddings(params, t, sets, config, relative)
    report = BiasReport(delta_param=None if config is None else float(config.delta))
    report.rows.append(_row(probe, sets, score_answers(params, t, probe), score_answers(params, adv, probe), "property"))
    for c in sets.queries:
        q = ["contains", c, "?"]
        report.rows.append(_row(q, sets, score_answers(params, t, q), score_answers(params, adv, q),
                                "minus" if c in sets.minus else "plus"))
    return report
