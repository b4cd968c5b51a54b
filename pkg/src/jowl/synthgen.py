"""Synthetic colored-shapes world.

A scene holds one to three objects on a 4x4 grid of 16 px cells of a
64x64 RGB image. Randomness comes from numpy's PCG64 seeded through
``SeedSequence(entropy=(seed, split_id, index))``, so any scene can be
regenerated independently of the others.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
CONCEPTS = SHAPES + COLORS
GRID = 4
CELL = 16
IMAGE_SIZE = GRID * CELL
MAX_OBJECTS = 3
SPLITS = {"train": 0, "val": 1, "test": 2}

_RGB = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}


@dataclass(frozen=True)
class BiasSpec:
    """When ``concept_a`` is present, ``concept_b`` is present with probability ``p``."""

    concept_a: str
    concept_b: str
    co_occurrence_prob: float

    def __post_init__(self):
        if self.concept_a not in CONCEPTS or self.concept_b not in CONCEPTS:
            raise ValueError(f"bias concepts must be in {CONCEPTS}")
        if self.concept_a == self.concept_b:
            raise ValueError("bias concepts must differ")
        if not 0.0 <= self.co_occurrence_prob <= 1.0:
            raise ValueError("co_occurrence_prob must lie in [0, 1]")

    def to_dict(self):
        return {"concept_a": self.concept_a, "concept_b": self.concept_b,
                "co_occurrence_prob": self.co_occurrence_prob}


@dataclass(frozen=True)
class DatasetConfig:
    seed: int
    n_train: int
    n_val: int
    n_test: int
    bias_spec: BiasSpec | None = None

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d):
        bias = d.get("bias_spec")
        return cls(int(d["seed"]), int(d["n_train"]), int(d["n_val"]), int(d["n_test"]),
                   BiasSpec(**bias) if bias else None)

    def to_dict(self):
        return {"seed": self.seed, "n_train": self.n_train, "n_val": self.n_val,
                "n_test": self.n_test, "bias_spec": self.bias_spec.to_dict() if self.bias_spec else None}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]

    def has(self, concept):
        return concept in (self.shape, self.color)


@dataclass
class Scene:
    objects: list[SceneObject]
    image: np.ndarray
    gt_boxes: list[dict] = field(default_factory=list)
    caption: list[str] = field(default_factory=list)
    qa: list[dict] = field(default_factory=list)
    likely: dict[str, float] = field(default_factory=dict)

    @property
    def concepts(self):
        return {c for o in self.objects for c in (o.shape, o.color)}

    def contains(self, concept):
        return any(o.has(concept) for o in self.objects)

    def to_dict(self):
        return {
            "objects": [{"shape": o.shape, "color": o.color, "cell": list(o.cell)} for o in self.objects],
            "gt_boxes": self.gt_boxes,
            "caption": self.caption,
            "qa": self.qa,
            "likely": self.likely,
        }


def stream(seed, split_id=0, index=0):
    """The PCG64 generator for scene ``index`` of split ``split_id``."""
    ss = np.random.SeedSequence(entropy=[int(seed) & (2**64 - 1), int(split_id), int(index)])
    return np.random.Generator(np.random.PCG64(ss))


def _kind(concept):
    return "shape" if concept in SHAPES else "color"


def _with(obj, concept):
    if _kind(concept) == "shape":
        return SceneObject(concept, obj.color, obj.cell)
    return SceneObject(obj.shape, concept, obj.cell)


def _other_values(concept):
    pool = SHAPES if _kind(concept) == "shape" else COLORS
    return [v for v in pool if v != concept]


def bias_outcomes(objects, bias):
    """Distribution over object lists after the bias adjustment.

    Returns ``[(probability, objects), ...]``. Scenes without ``concept_a``
    are returned unchanged. Otherwise ``concept_b`` is forced present with
    probability p and absent with probability 1 - p, keeping ``concept_a``.
    """
    a, b, p = bias.concept_a, bias.concept_b, bias.co_occurrence_prob
    objects = list(objects)
    if not any(o.has(a) for o in objects):
        return [(1.0, objects)]

    present = []
    if any(o.has(b) for o in objects):
        present.append((1.0, objects))
    elif _kind(a) != _kind(b):
        # put b on one of the a-objects
        idx = [i for i, o in enumerate(objects) if o.has(a)]
        for i in idx:
            new = list(objects)
            new[i] = _with(objects[i], b)
            present.append((1.0 / len(idx), new))
    else:
        idx = [i for i, o in enumerate(objects) if not o.has(a)]
        if not idx and len(objects) > 1:
            idx = list(range(1, len(objects)))
        if idx:
            for i in idx:
                new = list(objects)
                new[i] = _with(objects[i], b)
                present.append((1.0 / len(idx), new))
        else:
            used = {o.cell for o in objects}
            free = [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in used]
            pool = COLORS if _kind(b) == "shape" else SHAPES
            n = len(free) * len(pool)
            for cell, other in itertools.product(free, pool):
                obj = SceneObject(b, other, cell) if _kind(b) == "shape" else SceneObject(other, b, cell)
                present.append((1.0 / n, objects + [obj]))

    absent = []
    hits = [i for i, o in enumerate(objects) if o.has(b)]
    if not hits:
        absent.append((1.0, objects))
    else:
        choices = _other_values(b)
        n = len(choices) ** len(hits)
        for combo in itertools.product(choices, repeat=len(hits)):
            new = list(objects)
            for i, v in zip(hits, combo):
                new[i] = _with(objects[i], v)
            absent.append((1.0 / n, new))

    return [(p * q, o) for q, o in present] + [((1 - p) * q, o) for q, o in absent]


def _sample(outcomes, rng):
    probs = np.array([q for q, _ in outcomes])
    k = rng.choice(len(outcomes), p=probs / probs.sum())
    return outcomes[k][1]


def likely_probability(objects, concept, bias=None):
    """Expected fraction of objects showing ``concept`` once it is redrawn.

    Shapes are redrawn for a shape concept, colors for a color concept; the
    other attribute and the cells stay fixed, and the bias adjustment is
    applied afterwards. Without a bias this is 1/3 for every scene. Computed
    by exact enumeration.
    """
    if not objects:
        return 0.0
    pool = SHAPES if _kind(concept) == "shape" else COLORS
    n = len(pool) ** len(objects)
    total = 0.0
    for combo in itertools.product(pool, repeat=len(objects)):
        drawn = [_with(o, v) for o, v in zip(objects, combo)]
        outcomes = bias_outcomes(drawn, bias) if bias else [(1.0, drawn)]
        total += sum(q * sum(o.has(concept) for o in objs) / len(objs) for q, objs in outcomes) / n
    return total


def caption_for(objects):
    words = []
    for o in sorted(objects, key=lambda o: o.cell):
        words += [o.color, o.shape]
    return words + ["<eos>"]


def boxes_for(objects):
    return [
        {"concepts": [o.shape, o.color], "x": o.cell[1] / GRID, "y": o.cell[0] / GRID,
         "w": 1.0 / GRID, "h": 1.0 / GRID}
        for o in sorted(objects, key=lambda o: o.cell)
    ]


def qa_for(objects):
    present = {c for o in objects for c in (o.shape, o.color)}
    return [{"question": ["contains", c, "?"], "answer": "yes" if c in present else "no"}
            for c in CONCEPTS]


def _shape_mask(shape):
    # pixel centres of one cell, in cell coordinates
    c = np.arange(CELL) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    half = CELL / 2
    if shape == "square":
        return np.ones((CELL, CELL), dtype=bool)
    if shape == "circle":
        return (xx - half) ** 2 + (yy - half) ** 2 <= half ** 2
    if shape == "triangle":
        # apex at top centre, base along the bottom edge
        return np.abs(xx - half) <= yy / 2
    raise ValueError(f"unknown shape {shape!r}")


_MASKS = {s: _shape_mask(s) for s in SHAPES}


def render_scene(scene_or_objects):
    objects = getattr(scene_or_objects, "objects", scene_or_objects)
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    for o in objects:
        r, c = o.cell
        patch = img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
        patch[_MASKS[o.shape]] = _RGB[o.color]
    return img


def build_scene(objects, bias=None):
    objects = sorted(objects, key=lambda o: o.cell)
    return Scene(
        objects=objects,
        image=render_scene(objects),
        gt_boxes=boxes_for(objects),
        caption=caption_for(objects),
        qa=qa_for(objects),
        likely={c: likely_probability(objects, c, bias) for c in COLORS},
    )


def generate_scene(seed, bias_spec=None, *, split_id=0, index=0, n_objects=None):
    """Deterministic scene for ``(seed, split_id, index)``."""
    rng = stream(seed, split_id, index)
    k = int(rng.integers(1, MAX_OBJECTS + 1)) if n_objects is None else n_objects
    cells = rng.choice(GRID * GRID, size=k, replace=False)
    objects = [
        SceneObject(SHAPES[int(rng.integers(3))], COLORS[int(rng.integers(3))], divmod(int(cell), GRID))
        for cell in cells
    ]
    if bias_spec is not None:
        objects = _sample(bias_outcomes(objects, bias_spec), rng)
    return build_scene(objects, bias_spec)


def make_dataset(config):
    """Train/val/test scene lists; split s, scene i uses stream (seed, s, i)."""
    if not isinstance(config, DatasetConfig):
        config = DatasetConfig.from_dict(config)
    sizes = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    return {
        name: [generate_scene(config.seed, config.bias_spec, split_id=SPLITS[name], index=i)
               for i in range(n)]
        for name, n in sizes.items()
    }


def stack_images(scenes):
    return np.stack([s.image for s in scenes])
