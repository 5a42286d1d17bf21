"""Procedural shape scenes with templated count / exist / relation questions.

Objects sit on the 8x8 patch grid (one object per patch cell, centred at
``8k + 4``) with radius 3, so every object is contained in a single image patch
and no two objects touch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, VocabularyError

CANVAS = 64
CELL = 8
RADIUS = 3
SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
KINDS = ("count", "exist", "relation")
MAX_COUNT = 5
MAX_LATENTS = 16
MAX_QUESTION_LEN = 12

SPECIALS = ("BOS", "SEP", "ANS", "EOS", "PAD", "LAT")
WORDS = ("how", "many", "is", "there", "a", "or", "of")
ANSWERS = tuple(str(i) for i in range(MAX_COUNT + 1)) + ("yes", "no", "left", "right")


class Vocab:
    """Dense token <-> id map. Answer words double as question words where they overlap."""

    def __init__(self):
        tokens = list(SPECIALS)
        tokens += [f"LAT{i}" for i in range(MAX_LATENTS)]
        tokens += list(WORDS) + list(COLORS) + list(SHAPES) + list(ANSWERS)
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        assert len(self.ids) == len(self.tokens) < 64

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        try:
            return self.ids[token]
        except KeyError:
            raise VocabularyError(token) from None

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabularyError(idx)
        return self.tokens[idx]

    def encode(self, words) -> list[int]:
        return [self[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.token(int(i)) for i in ids]

    def latent_ids(self, k: int, mode: str) -> list[int]:
        if mode == "identical":
            return [self["LAT"]] * k
        if mode == "diverse":
            if k > MAX_LATENTS:
                raise VocabularyError(f"only {MAX_LATENTS} diverse latent ids")
            return [self[f"LAT{i}"] for i in range(k)]
        raise ContractError(f"unknown latent mode {mode!r}")

    @property
    def answer_ids(self) -> list[int]:
        return [self[a] for a in ANSWERS]


VOCAB = Vocab()


@dataclass(frozen=True)
class Obj:
    shape: str
    color: str
    center: tuple[int, int]  # (row, col) in pixels
    radius: int = RADIUS


@dataclass(frozen=True)
class Scene:
    objects: tuple[Obj, ...] = ()
    canvas: int = CANVAS

    def count(self, shape: str, color: str) -> int:
        return sum(o.shape == shape and o.color == color for o in self.objects)

    def find(self, shape: str, color: str) -> list[Obj]:
        return [o for o in self.objects if o.shape == shape and o.color == color]


@dataclass
class QASample:
    image: np.ndarray
    question: list[int]
    answer: list[int]
    kind: str
    seed: int
    scene: Scene = field(repr=False, default=None)

    def question_text(self) -> str:
        return " ".join(VOCAB.decode(self.question))

    def answer_text(self) -> str:
        return " ".join(VOCAB.decode(self.answer))


def shape_mask(obj: Obj, canvas: int = CANVAS) -> np.ndarray:
    rows, cols = np.mgrid[0:canvas, 0:canvas]
    dy, dx = rows - obj.center[0], cols - obj.center[1]
    r = obj.radius
    if obj.shape == "circle":
        return dy * dy + dx * dx <= r * r
    if obj.shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if obj.shape == "triangle":
        # apex up, base on the bottom row of the bounding box
        return (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)
    raise ContractError(f"unknown shape {obj.shape!r}")


def render(scene: Scene) -> np.ndarray:
    img = np.ones((scene.canvas, scene.canvas, 3))
    for obj in scene.objects:
        img[shape_mask(obj, scene.canvas)] = COLORS[obj.color]
    return img


def _cells(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    per_side = CANVAS // CELL
    picks = rng.choice(per_side * per_side, size=n, replace=False)
    return [(int(p // per_side) * CELL + CELL // 2, int(p % per_side) * CELL + CELL // 2) for p in picks]


def _random_type(rng: np.random.Generator, exclude=()) -> tuple[str, str]:
    options = [(s, c) for s in SHAPES for c in COLORS if (s, c) not in exclude]
    s, c = options[int(rng.integers(len(options)))]
    return s, c


def _place(rng, types: list[tuple[str, str]]) -> Scene:
    order = rng.permutation(len(types))
    cells = _cells(rng, len(types))
    objs = tuple(Obj(types[i][0], types[i][1], cells[j]) for j, i in enumerate(order))
    return Scene(objs)


def _count_scene(rng):
    target = _random_type(rng)
    n = int(rng.integers(0, MAX_COUNT + 1))
    total = int(rng.integers(max(2, n), MAX_COUNT + 1))
    types = [target] * n + [_random_type(rng, exclude=[target]) for _ in range(total - n)]
    scene = _place(rng, types)
    shape, color = target
    return scene, ["how", "many", color, shape]


def _exist_scene(rng):
    target = _random_type(rng)
    present = bool(rng.integers(2))
    total = int(rng.integers(2, MAX_COUNT + 1))
    n = int(rng.integers(1, total + 1)) if present else 0
    types = [target] * n + [_random_type(rng, exclude=[target]) for _ in range(total - n)]
    shape, color = target
    return _place(rng, types), ["is", "there", "a", color, shape]


def _relation_scene(rng):
    a = _random_type(rng)
    b = _random_type(rng, exclude=[a])
    extra = int(rng.integers(0, MAX_COUNT - 1))
    per_side = CANVAS // CELL
    # a and b in different columns so left/right is well defined
    ca, cb = rng.choice(per_side, size=2, replace=False)
    ra, rb = rng.integers(per_side, size=2)
    pa = (int(ra) * CELL + CELL // 2, int(ca) * CELL + CELL // 2)
    pb = (int(rb) * CELL + CELL // 2, int(cb) * CELL + CELL // 2)
    taken = {pa, pb}
    objs = [Obj(a[0], a[1], pa), Obj(b[0], b[1], pb)]
    free = [c for c in _cells(rng, per_side * per_side) if c not in taken]
    for i in range(extra):
        t = _random_type(rng, exclude=[a, b])
        objs.append(Obj(t[0], t[1], free[i]))
    return Scene(tuple(objs)), [a[1], a[0], "left", "or", "right", "of", b[1], b[0]]


def answer_for(scene: Scene, kind: str, question: list[str]) -> str:
    """Ground-truth answer computed from the scene alone."""
    if kind == "count":
        return str(scene.count(question[3], question[2]))
    if kind == "exist":
        return "yes" if scene.count(question[4], question[3]) > 0 else "no"
    if kind == "relation":
        (a,) = scene.find(question[1], question[0])
        (b,) = scene.find(question[7], question[6])
        return "left" if a.center[1] < b.center[1] else "right"
    raise ContractError(f"unknown task kind {kind!r}")


_BUILDERS = {"count": _count_scene, "exist": _exist_scene, "relation": _relation_scene}


def make_sample(seed: int, kind: str) -> QASample:
    if kind not in _BUILDERS:
        raise ContractError(f"unknown task kind {kind!r}")
    rng = np.random.default_rng(seed)
    scene, words = _BUILDERS[kind](rng)
    answer = answer_for(scene, kind, words)
    return QASample(
        image=render(scene),
        question=VOCAB.encode(words),
        answer=[VOCAB[answer]],
        kind=kind,
        seed=seed,
        scene=scene,
    )


SPLITS = {"train": 0, "eval": 1}


def sample_seed(seed: int, split: str, index: int) -> int:
    """Per-sample seed; the low bit encodes the split so train and eval never collide."""
    return (int(seed) << 32) | (int(index) << 1) | SPLITS[split]


def parse_mix(mix) -> tuple[float, float, float]:
    if isinstance(mix, dict):
        unknown = set(mix) - set(KINDS)
        if unknown:
            raise ContractError(f"unknown task kinds {sorted(unknown)}")
        mix = tuple(float(mix.get(k, 0.0)) for k in KINDS)
    mix = tuple(float(m) for m in mix)
    if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
        raise ContractError(f"mix must be three nonnegative weights summing to 1, got {mix}")
    return mix


def make_split(seed: int, n: int, mix=(1.0, 0.0, 0.0), split: str = "train") -> list[QASample]:
    if n <= 0:
        raise ContractError("n must be positive")
    if split not in SPLITS:
        raise ContractError(f"split must be one of {list(SPLITS)}")
    p = np.array(parse_mix(mix))
    rng = np.random.default_rng([seed, SPLITS[split]])
    kinds = rng.choice(len(KINDS), size=n, p=p)
    return [make_sample(sample_seed(seed, split, i), KINDS[k]) for i, k in enumerate(kinds)]
