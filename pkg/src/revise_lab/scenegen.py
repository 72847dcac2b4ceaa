"""Synthetic grid-scene VQA generator with templated explanations.

Scenes are G×G grids of colored shapes. Three question families: attribute
("what color is the square?"), spatial relation ("what color is the square
left of the circle?"), and existence ("is there a triangle?"). Every sample
is reconstructible from its scene by `answer_oracle`, which is the ground
truth the generator itself is checked against.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RELATIONS = ("left of", "right of", "above", "below")
RELATION_PHRASES = {
    "left of": "to the left of",
    "right of": "to the right of",
    "above": "above",
    "below": "below",
}
COLOR_RGB = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
BACKGROUND = 128
QUESTION_TYPES = ("attribute", "spatial", "existence")

_ATTR_RE = re.compile(r"^what color is the (square|circle|triangle)\?$")
_SPATIAL_RE = re.compile(
    r"^what color is the (square|circle|triangle) (left of|right of|above|below) "
    r"the (square|circle|triangle)\?$"
)
_EXIST_RE = re.compile(r"^is there a (square|circle|triangle)\?$")


@dataclass(frozen=True)
class SceneObject:
    row: int
    col: int
    shape: str
    color: str


@dataclass(frozen=True)
class Scene:
    grid: int
    objects: tuple[SceneObject, ...]

    def key(self) -> str:
        canon = sorted((o.row, o.col, o.shape, o.color) for o in self.objects)
        return hashlib.sha256(repr((self.grid, canon)).encode()).hexdigest()


@dataclass
class Sample:
    id: int
    split: str
    question: str
    answer: str
    explanation: str
    scene: Scene
    image: np.ndarray  # HxWx3 uint8


@dataclass
class DatasetConfig:
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"train": 200, "val": 50, "test": 50})
    grid: int = 4
    image_size: int = 32
    mix: tuple[float, float, float] = (0.4, 0.4, 0.2)  # attribute / spatial / existence
    noise_sigma: float = 8.0

    def validate(self) -> None:
        if any(c < 1 for c in self.counts.values()):
            raise ValueError(f"counts must be >= 1, got {self.counts}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.grid * self.grid < 6:
            raise ValueError(f"grid {self.grid} too small for up to 5 objects plus relations")
        if self.image_size % self.grid != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by grid {self.grid}")
        if abs(sum(self.mix) - 1.0) > 1e-9 or any(m < 0 for m in self.mix):
            raise ValueError(f"mix must be a distribution, got {self.mix}")


def question_type(question: str) -> str:
    if _SPATIAL_RE.match(question):
        return "spatial"
    if _ATTR_RE.match(question):
        return "attribute"
    if _EXIST_RE.match(question):
        return "existence"
    raise ValueError(f"question outside the generator grammar: {question!r}")


def answer_options(question: str) -> tuple[str, ...]:
    """The closed answer set a question draws from."""
    return ("yes", "no") if question_type(question) == "existence" else COLORS


def valid_questions(scene: Scene) -> dict:
    """Every grammar question the scene answers unambiguously, by type."""
    by_shape: dict[str, list[SceneObject]] = {}
    for o in scene.objects:
        by_shape.setdefault(o.shape, []).append(o)
    attribute = [f"what color is the {s}?" for s, objs in by_shape.items() if len(objs) == 1]
    spatial = []
    for sb, anchors in by_shape.items():
        if len(anchors) != 1:
            continue
        for sa, targets in by_shape.items():
            if sa == sb:
                continue
            for rel in RELATIONS:
                hits = [o for o in targets if _in_relation(o, rel, anchors[0])]
                if len(hits) == 1:
                    spatial.append(f"what color is the {sa} {rel} the {sb}?")
    existence = [f"is there a {s}?" for s in SHAPES]
    return {"attribute": attribute, "spatial": spatial, "existence": existence}


def sample_question(scene: Scene, rng, mix=(0.4, 0.4, 0.2)):
    """Draw one oracle-valid question (with its answer and explanation).

    Used to re-pair scenes with fresh questions during training so a scene
    never keys a single memorized answer.
    """
    pools = valid_questions(scene)
    weights = []
    for qt, w in zip(QUESTION_TYPES, mix):
        weights.append(w if pools[qt] else 0.0)
    total = sum(weights)
    if total == 0:
        raise ValueError("scene admits no unambiguous question")
    r = rng.random() * total
    acc = 0.0
    for qt, w in zip(QUESTION_TYPES, weights):
        acc += w
        if r <= acc and w > 0:
            pool = pools[qt]
            question = pool[int(rng.integers(len(pool)))]
            answer, explanation = answer_oracle(scene, question)
            return question, answer, explanation
    qt = next(t for t, w in zip(QUESTION_TYPES, weights) if w > 0)
    pool = pools[qt]
    question = pool[int(rng.integers(len(pool)))]
    answer, explanation = answer_oracle(scene, question)
    return question, answer, explanation


def describe_scene(scene: Scene) -> str:
    """Atomic per-object tokens "{color}_{shape}_p{row}{col}", row-major.

    Each token binds one object's attributes and cell, so a bag of their
    embeddings is a lossless scene summary regardless of row order.
    """
    objs = sorted(scene.objects, key=lambda o: (o.row, o.col))
    return " ".join(f"{o.color}_{o.shape}_p{o.row}{o.col}" for o in objs)


def _in_relation(target: SceneObject, relation: str, anchor: SceneObject) -> bool:
    if relation == "left of":
        return target.row == anchor.row and target.col < anchor.col
    if relation == "right of":
        return target.row == anchor.row and target.col > anchor.col
    if relation == "above":
        return target.col == anchor.col and target.row < anchor.row
    if relation == "below":
        return target.col == anchor.col and target.row > anchor.row
    raise ValueError(f"unknown relation {relation!r}")


def answer_oracle(scene: Scene, question: str) -> tuple[str, str]:
    """Symbolically answer a grammar question against the scene."""
    m = _SPATIAL_RE.match(question)
    if m:
        sa, rel, sb = m.group(1), m.group(2), m.group(3)
        anchors = [o for o in scene.objects if o.shape == sb]
        if len(anchors) != 1:
            raise ValueError(f"ambiguous anchor: {len(anchors)} {sb}(s) in scene")
        hits = [o for o in scene.objects if o.shape == sa and _in_relation(o, rel, anchors[0])]
        if len(hits) != 1:
            raise ValueError(f"ambiguous target: {len(hits)} {sa}(s) {rel} the {sb}")
        color = hits[0].color
        return color, f"the {sa} {RELATION_PHRASES[rel]} the {sb} is {color}"
    m = _ATTR_RE.match(question)
    if m:
        s = m.group(1)
        hits = [o for o in scene.objects if o.shape == s]
        if len(hits) != 1:
            raise ValueError(f"ambiguous referent: {len(hits)} {s}(s) in scene")
        color = hits[0].color
        return color, f"the {s} is {color}"
    m = _EXIST_RE.match(question)
    if m:
        s = m.group(1)
        if any(o.shape == s for o in scene.objects):
            return "yes", f"yes there is a {s} in the image"
        return "no", f"there is no {s} in the image"
    raise ValueError(f"question outside the generator grammar: {question!r}")


# -- rendering -------------------------------------------------------------

def _shape_mask(shape: str, cell: int) -> np.ndarray:
    yy, xx = np.mgrid[0:cell, 0:cell]
    c = (cell - 1) / 2.0
    if shape == "square":
        return (yy >= 1) & (yy <= cell - 2) & (xx >= 1) & (xx <= cell - 2)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (cell / 2.0 - 0.8) ** 2
    if shape == "triangle":
        half = (yy - 0.5) * 0.62
        return (yy >= 1) & (yy <= cell - 2) & (np.abs(xx - c) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def render(scene: Scene, sigma: float, seed, size: int = 32) -> np.ndarray:
    """Draw the scene on a gray background, then add clamped Gaussian noise."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    cell = size // scene.grid
    img = np.full((size, size, 3), BACKGROUND, dtype=np.float64)
    for obj in scene.objects:
        mask = _shape_mask(obj.shape, cell)
        y0, x0 = obj.row * cell, obj.col * cell
        img[y0 : y0 + cell, x0 : x0 + cell][mask] = COLOR_RGB[obj.color]
    if sigma > 0:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


# -- scene construction ------------------------------------------------------

def _free_cells(grid: int, taken) -> list[tuple[int, int]]:
    return [(r, c) for r in range(grid) for c in range(grid) if (r, c) not in taken]


def _pick_cell(rng, grid, taken) -> tuple[int, int]:
    free = _free_cells(grid, taken)
    return free[rng.integers(len(free))]


def _build_attribute(rng, grid: int, color: str):
    shape = SHAPES[rng.integers(len(SHAPES))]
    others = [s for s in SHAPES if s != shape]
    taken: set = set()
    cell = _pick_cell(rng, grid, taken)
    taken.add(cell)
    objs = [SceneObject(cell[0], cell[1], shape, color)]
    for _ in range(int(rng.integers(1, 5))):
        c = _pick_cell(rng, grid, taken)
        taken.add(c)
        objs.append(SceneObject(c[0], c[1], others[rng.integers(2)], COLORS[rng.integers(4)]))
    question = f"what color is the {shape}?"
    return Scene(grid, tuple(objs)), question


def _build_spatial(rng, grid: int, color: str):
    sa, sb = rng.permutation(np.array(SHAPES))[:2]
    sa, sb = str(sa), str(sb)
    third = next(s for s in SHAPES if s not in (sa, sb))
    rel = RELATIONS[rng.integers(len(RELATIONS))]
    ar, ac = int(rng.integers(grid)), int(rng.integers(grid))
    if rel == "left of":
        if ac == 0:
            ac = 1 + int(rng.integers(grid - 1))
        tr, tc = ar, int(rng.integers(ac))
    elif rel == "right of":
        if ac == grid - 1:
            ac = int(rng.integers(grid - 1))
        tr, tc = ar, ac + 1 + int(rng.integers(grid - 1 - ac))
    elif rel == "above":
        if ar == 0:
            ar = 1 + int(rng.integers(grid - 1))
        tr, tc = int(rng.integers(ar)), ac
    else:  # below
        if ar == grid - 1:
            ar = int(rng.integers(grid - 1))
        tr, tc = ar + 1 + int(rng.integers(grid - 1 - ar)), ac
    anchor = SceneObject(ar, ac, sb, COLORS[rng.integers(4)])
    target = SceneObject(tr, tc, sa, color)
    taken = {(ar, ac), (tr, tc)}
    objs = [anchor, target]
    # same-shape distractor with a different color, placed off the relation axis
    wrong = [c for c in COLORS if c != color]
    valid = [
        (r, c)
        for (r, c) in _free_cells(grid, taken)
        if not _in_relation(SceneObject(r, c, sa, "red"), rel, anchor)
    ]
    if not valid:
        raise RuntimeError("no cell available for the spatial distractor")
    dr, dc = valid[rng.integers(len(valid))]
    taken.add((dr, dc))
    objs.append(SceneObject(dr, dc, sa, wrong[rng.integers(3)]))
    for _ in range(int(rng.integers(0, 2))):
        c = _pick_cell(rng, grid, taken)
        taken.add(c)
        objs.append(SceneObject(c[0], c[1], third, COLORS[rng.integers(4)]))
    question = f"what color is the {sa} {rel} the {sb}?"
    return Scene(grid, tuple(objs)), question


def _build_existence(rng, grid: int, answer: str):
    shape = SHAPES[rng.integers(len(SHAPES))]
    others = [s for s in SHAPES if s != shape]
    taken: set = set()
    objs = []
    if answer == "yes":
        cell = _pick_cell(rng, grid, taken)
        taken.add(cell)
        objs.append(SceneObject(cell[0], cell[1], shape, COLORS[rng.integers(4)]))
        extra = int(rng.integers(1, 5))
    else:
        extra = int(rng.integers(2, 6))
    for _ in range(extra):
        c = _pick_cell(rng, grid, taken)
        taken.add(c)
        objs.append(SceneObject(c[0], c[1], others[rng.integers(2)], COLORS[rng.integers(4)]))
    question = f"is there a {shape}?"
    return Scene(grid, tuple(objs)), question


def _type_plan(n: int, mix, rng) -> list[str]:
    """Exact largest-remainder partition of n samples over question types."""
    raw = [n * m for m in mix]
    counts = [int(x) for x in raw]
    rema = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[rema[i % 3]] += 1
    plan = [t for t, c in zip(QUESTION_TYPES, counts) for _ in range(c)]
    rng.shuffle(plan)
    return plan


def generate_dataset(cfg: DatasetConfig) -> list[Sample]:
    """Deterministic dataset; splits scene-disjoint, per-type answers balanced."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    used_keys: set[str] = set()
    samples: list[Sample] = []
    answer_cycle = {t: 0 for t in QUESTION_TYPES}
    sid = 0
    for split in ("train", "val", "test"):
        n = cfg.counts.get(split, 0)
        if n == 0:
            continue
        for qtype in _type_plan(n, cfg.mix, rng):
            if qtype == "existence":
                answer = ("yes", "no")[answer_cycle[qtype] % 2]
            else:
                answer = COLORS[answer_cycle[qtype] % 4]
            answer_cycle[qtype] += 1
            for attempt in range(200):
                if qtype == "attribute":
                    scene, question = _build_attribute(rng, cfg.grid, answer)
                elif qtype == "spatial":
                    scene, question = _build_spatial(rng, cfg.grid, answer)
                else:
                    scene, question = _build_existence(rng, cfg.grid, answer)
                if scene.key() in used_keys:
                    continue
                got_answer, explanation = answer_oracle(scene, question)
                if got_answer == answer:
                    break
            else:
                raise RuntimeError(f"could not build a fresh scene for {qtype}/{answer}")
            used_keys.add(scene.key())
            image = render(
                scene,
                cfg.noise_sigma,
                np.random.SeedSequence(entropy=cfg.seed, spawn_key=(sid,)),
                size=cfg.image_size,
            )
            samples.append(Sample(sid, split, question, answer, explanation, scene, image))
            sid += 1
    return samples


# -- serialization -----------------------------------------------------------

def sample_to_record(s: Sample) -> dict:
    return {
        "id": s.id,
        "split": s.split,
        "question": s.question,
        "answer": s.answer,
        "explanation": s.explanation,
        "image": base64.b64encode(s.image.tobytes()).decode("ascii"),
        "scene": {
            "grid": s.scene.grid,
            "objects": [
                {"row": o.row, "col": o.col, "shape": o.shape, "color": o.color}
                for o in s.scene.objects
            ],
        },
    }


def record_to_sample(rec: dict) -> Sample:
    raw = base64.b64decode(rec["image"])
    side = int(round((len(raw) // 3) ** 0.5))
    image = np.frombuffer(raw, dtype=np.uint8).reshape(side, side, 3)
    scene = Scene(
        rec["scene"]["grid"],
        tuple(SceneObject(o["row"], o["col"], o["shape"], o["color"]) for o in rec["scene"]["objects"]),
    )
    return Sample(rec["id"], rec["split"], rec["question"], rec["answer"], rec["explanation"], scene, image)


def save_dataset(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), sort_keys=True) + "\n")


def load_dataset(path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        return [record_to_sample(json.loads(line)) for line in fh if line.strip()]
