"""Deterministic synthetic VQA corpus: attributed-object scenes rendered to
region feature vectors, plus templated questions composing skills with
concepts.

One scene per question. Region features are a fixed random linear mix of the
object attribute code (one-hot category, one-hot supercategory, one-hot
color, size bit, position) plus Gaussian noise, so grounding is learnable
from the features but not trivially readable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# --------------------------------------------------------------------------
# closed lexicon
# --------------------------------------------------------------------------

SUPERCATEGORIES: dict[str, list[str]] = {
    "animal": ["dog", "cat", "horse", "cow", "sheep", "zebra", "giraffe",
               "elephant", "bird"],
    "vehicle": ["car", "truck", "bus", "bike", "motorcycle", "plane", "train"],
    "electronics": ["laptop", "phone", "monitor", "camera", "television"],
    "dishware": ["plate", "bowl", "cup", "fork"],
    "furniture": ["chair", "table", "bed", "couch", "lamp"],
}

CATEGORIES: list[str] = [c for group in SUPERCATEGORIES.values() for c in group]
CATEGORY_TO_ID = {c: i for i, c in enumerate(CATEGORIES)}
SUPERCAT_NAMES = list(SUPERCATEGORIES.keys())
SUPERCAT_OF = {c: sup for sup, cats in SUPERCATEGORIES.items() for c in cats}
SUPERCAT_ID_OF = {CATEGORY_TO_ID[c]: SUPERCAT_NAMES.index(SUPERCAT_OF[c])
                  for c in CATEGORIES}

COLORS = ["red", "blue", "green", "yellow", "black", "white", "orange", "purple"]

SIZES = ["small", "large"]

SKILLS = ["counting", "color", "subcategory", "attribute", "positional",
          "existence"]

# template = (prefix tokens, suffix tokens); question = prefix + concept + suffix
TEMPLATES: dict[str, tuple[list[str], list[str]]] = {
    "counting": (["how", "many"], ["are", "there"]),
    "color": (["what", "color", "is", "the"], []),
    "subcategory": (["what", "kind", "is", "the"], []),
    "existence": (["is", "there", "a"], ["here"]),
    "attribute": (["is", "the"], ["really", "large"]),
    "positional": (["is", "the"], ["on", "the", "left", "side"]),
}

# content-free words sprinkled into every question so that two questions of
# the same skill never share an identical surface form; without them the
# question context degenerates into a clean template fingerprint
FILLER_POOL = ["please", "tell", "me", "now", "exactly", "actually", "right",
               "currently", "overall", "today", "again", "clearly", "simply",
               "just", "quite", "very", "indeed", "then", "still", "also",
               "maybe", "perhaps", "somehow", "roughly"]

PAD_TOKEN = "<pad>"
MASK_TOKEN = "[MASK]"

FILLER_WORDS = sorted({w for pre, suf in TEMPLATES.values() for w in pre + suf}
                      | set(FILLER_POOL))

VOCAB: list[str] = [PAD_TOKEN, MASK_TOKEN] + FILLER_WORDS + CATEGORIES
TOKEN_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = TOKEN_TO_ID[PAD_TOKEN]
MASK_ID = TOKEN_TO_ID[MASK_TOKEN]

# answers: counts 0..8, colors, supercategories, yes/no
MAX_COUNT = 8
ANSWERS: list[str] = ([str(i) for i in range(MAX_COUNT + 1)] + COLORS
                      + SUPERCAT_NAMES + ["yes", "no"])
ANSWER_TO_ID = {a: i for i, a in enumerate(ANSWERS)}

_CONCEPT_TOKEN_BASE = 2 + len(FILLER_WORDS)


def concept_token_id(concept: int) -> int:
    """Vocabulary id of the surface word for a concept (category) id."""
    return TOKEN_TO_ID[CATEGORIES[concept]]


def token_concept_id(token: int) -> int | None:
    """Concept (category) id of a vocabulary token, or None for non-concepts."""
    if token >= _CONCEPT_TOKEN_BASE:
        return token - _CONCEPT_TOKEN_BASE
    return None


ATTR_CODE_WIDTH = len(CATEGORIES) + len(SUPERCAT_NAMES) + len(COLORS) + 1 + 2

# default desk benchmark: 32 compositions, uniform weights. 20k questions
# gives 625 per composition, comfortably above the 400-train/200-test floor.
DEFAULT_COMPOSITIONS: list[tuple[str, str]] = (
    [("counting", c) for c in ["dog", "cat", "car", "sheep", "zebra", "laptop"]]
    + [("color", c) for c in ["car", "dog", "bus", "horse", "zebra", "chair"]]
    + [("subcategory", c) for c in ["plate", "bowl", "cup", "fork", "dog",
                                    "car", "zebra", "laptop"]]
    + [("existence", c) for c in ["dog", "car", "zebra", "laptop", "chair",
                                  "bird"]]
    + [("attribute", c) for c in ["dog", "car", "chair"]]
    + [("positional", c) for c in ["dog", "car", "chair"]]
)


def derive_seed(seed: int, tag: str) -> int:
    """Stable sub-seed for a pipeline stage, independent of call order."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclass
class SceneObject:
    category: int          # index into CATEGORIES
    color: int             # index into COLORS
    size: int              # 0 small, 1 large
    x: float
    y: float


@dataclass
class Scene:
    objects: list[SceneObject]
    regions: np.ndarray    # (M, d_v) float64
    gold_region_of: dict[int, list[int]]
    scene_id: int = -1


@dataclass
class QuestionRecord:
    tokens: list[int]
    skill: str
    concept_mentions: list[tuple[int, int]]   # (token index, concept id)
    answer: int | None
    labeled: bool
    scene_id: int = -1

    def words(self) -> list[str]:
        return [VOCAB[t] for t in self.tokens]


@dataclass
class Example:
    scene: Scene
    question: QuestionRecord


@dataclass
class DatasetConfig:
    n_questions: int = 20000
    m_min: int = 6            # dense scenes keep chance recall@5 low
    m_max: int = 12
    d_v: int = 48
    noise: float = 0.1
    seed: int = 0
    composition_weights: dict[tuple[str, str], float] | None = None
    category_weights: Sequence[float] | None = None

    def weights(self) -> dict[tuple[str, str], float]:
        if self.composition_weights is not None:
            return dict(self.composition_weights)
        return {pair: 1.0 for pair in DEFAULT_COMPOSITIONS}


@dataclass
class Dataset:
    examples: list[Example]
    config: DatasetConfig | None = None

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> Example:
        return self.examples[i]


# --------------------------------------------------------------------------
# scene generation
# --------------------------------------------------------------------------

def feature_mixer(config: DatasetConfig) -> np.ndarray:
    """Fixed (code_width, d_v) mixing matrix derived from the dataset seed."""
    if config.d_v < ATTR_CODE_WIDTH:
        raise ValueError(
            f"d_v={config.d_v} smaller than attribute code width "
            f"{ATTR_CODE_WIDTH}")
    rng = np.random.default_rng(derive_seed(config.seed, "feature-mixer"))
    return rng.standard_normal((ATTR_CODE_WIDTH, config.d_v)) / np.sqrt(
        ATTR_CODE_WIDTH)


def _attribute_code(obj: SceneObject) -> np.ndarray:
    code = np.zeros(ATTR_CODE_WIDTH)
    off = 0
    code[obj.category] = 1.0
    off += len(CATEGORIES)
    code[off + SUPERCAT_ID_OF[obj.category]] = 1.0
    off += len(SUPERCAT_NAMES)
    code[off + obj.color] = 1.0
    off += len(COLORS)
    code[off] = float(obj.size)
    code[off + 1] = obj.x
    code[off + 2] = obj.y
    return code


def featurize(objects: list[SceneObject], config: DatasetConfig,
              mixer: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    codes = np.stack([_attribute_code(o) for o in objects])
    feats = codes @ mixer
    if config.noise > 0:
        feats = feats + config.noise * rng.standard_normal(feats.shape)
    return feats


def _gold_map(objects: list[SceneObject]) -> dict[int, list[int]]:
    gold: dict[int, list[int]] = {}
    for i, obj in enumerate(objects):
        gold.setdefault(obj.category, []).append(i)
    return gold


def _random_object(rng: np.random.Generator, config: DatasetConfig,
                   exclude: int | None = None, category: int | None = None) -> SceneObject:
    if category is None:
        w = config.category_weights
        if w is None:
            w = np.ones(len(CATEGORIES))
        w = np.asarray(w, dtype=np.float64).copy()
        if exclude is not None:
            w[exclude] = 0.0
        w /= w.sum()
        category = int(rng.choice(len(CATEGORIES), p=w))
    return SceneObject(
        category=category,
        color=int(rng.integers(len(COLORS))),
        size=int(rng.integers(2)),
        x=float(rng.random()),
        y=float(rng.random()),
    )


def generate_scene(config: DatasetConfig, rng: np.random.Generator,
                   mixer: np.ndarray | None = None) -> Scene:
    """Unconditioned scene: 1..m_max objects sampled i.i.d."""
    if mixer is None:
        mixer = feature_mixer(config)
    n = int(rng.integers(max(1, config.m_min), config.m_max + 1))
    objects = [_random_object(rng, config) for _ in range(n)]
    return Scene(objects=objects,
                 regions=featurize(objects, config, mixer, rng),
                 gold_region_of=_gold_map(objects))


def scene_for_composition(skill: str, concept: int, config: DatasetConfig,
                          rng: np.random.Generator,
                          mixer: np.ndarray) -> Scene:
    """Scene constructed so that (skill, concept) is applicable to it."""
    m_max = config.m_max
    m_min = max(1, config.m_min)
    if skill == "counting":
        k = int(rng.integers(0, min(m_max, MAX_COUNT) + 1))
    elif skill == "existence":
        k = int(rng.integers(1, min(2, m_max) + 1)) if rng.random() < 0.5 else 0
    else:
        # color/subcategory/attribute/positional need a unique referent
        k = 1
    total = int(rng.integers(max(k, m_min), m_max + 1))
    objects = [_random_object(rng, config, category=concept) for _ in range(k)]
    if skill == "subcategory":
        # enough distractors share the referent's supercategory that it forms
        # a strict plurality of the scene, so the gold answer stays readable
        # from the regions alone even when the mentioned word itself carries
        # no signal for the model
        siblings = [c for c in range(len(CATEGORIES))
                    if SUPERCAT_ID_OF[c] == SUPERCAT_ID_OF[concept]
                    and c != concept]
        n_same = max(0, total // 2 + 1 - k) if siblings else 0
        for _ in range(n_same):
            cat = siblings[int(rng.integers(len(siblings)))]
            objects.append(_random_object(rng, config, category=cat))
        k += n_same
    objects += [_random_object(rng, config, exclude=concept)
                for _ in range(total - k)]
    order = rng.permutation(len(objects))
    objects = [objects[i] for i in order]
    return Scene(objects=objects,
                 regions=featurize(objects, config, mixer, rng),
                 gold_region_of=_gold_map(objects))


# --------------------------------------------------------------------------
# question generation
# --------------------------------------------------------------------------

def compute_answer(scene: Scene, skill: str, concept: int) -> str | None:
    """Gold answer from scene ground truth; None when the pair is inapplicable."""
    instances = scene.gold_region_of.get(concept, [])
    if skill == "counting":
        return str(min(len(instances), MAX_COUNT))
    if skill == "existence":
        return "yes" if instances else "no"
    if len(instances) != 1:
        return None   # ambiguous or missing referent
    obj = scene.objects[instances[0]]
    if skill == "color":
        return COLORS[obj.color]
    if skill == "subcategory":
        return SUPERCAT_NAMES[SUPERCAT_ID_OF[obj.category]]
    if skill == "attribute":
        return "yes" if obj.size == 1 else "no"
    if skill == "positional":
        return "yes" if obj.x < 0.5 else "no"
    raise ValueError(f"unknown skill {skill!r}")


def generate_question(scene: Scene, skill: str, concept: int,
                      rng: np.random.Generator | None = None) -> QuestionRecord | None:
    """Templated question for (skill, concept) on this scene, or None (refusal)
    when the pair is inapplicable (e.g. ambiguous color referent)."""
    if skill not in TEMPLATES:
        raise ValueError(f"unknown skill {skill!r}")
    answer = compute_answer(scene, skill, concept)
    if answer is None:
        return None
    prefix, suffix = TEMPLATES[skill]
    words: list[str | None] = list(prefix) + [None] + list(suffix)
    mention = len(prefix)
    if rng is not None:
        n_fill = int(rng.integers(3, 6))
        fillers = rng.choice(len(FILLER_POOL), size=n_fill, replace=False)
        for f in fillers:
            slot = int(rng.integers(len(words) + 1))
            words.insert(slot, FILLER_POOL[int(f)])
            if slot <= mention:
                mention += 1
    tokens = [TOKEN_TO_ID[CATEGORIES[concept] if w is None else w]
              for w in words]
    return QuestionRecord(
        tokens=tokens,
        skill=skill,
        concept_mentions=[(mention, concept)],
        answer=ANSWER_TO_ID[answer],
        labeled=True,
        scene_id=scene.scene_id,
    )


def _quotas(weights: dict[tuple[str, str], float], n: int) -> dict[tuple[str, str], int]:
    """Largest-remainder apportionment of n questions across compositions."""
    pairs = sorted((p for p, w in weights.items() if w > 0))
    total_w = sum(weights[p] for p in pairs)
    if not pairs:
        raise ValueError("all composition weights are zero")
    exact = {p: n * weights[p] / total_w for p in pairs}
    counts = {p: int(np.floor(exact[p])) for p in pairs}
    leftover = n - sum(counts.values())
    by_rem = sorted(pairs, key=lambda p: (-(exact[p] - counts[p]), p))
    for p in by_rem[:leftover]:
        counts[p] += 1
    unreachable = [p for p in pairs if counts[p] == 0]
    if unreachable:
        raise ValueError(
            f"infeasible balance: zero questions allotted to {unreachable}")
    return counts


def build_dataset(config: DatasetConfig) -> Dataset:
    """Full corpus with balanced skill-concept coverage, fully labeled.

    Deterministic given the config seed; one scene per question, constructed
    so the sampled composition is always applicable.
    """
    weights = {(s, CATEGORY_TO_ID[c]) if isinstance(c, str) else (s, c): w
               for (s, c), w in config.weights().items()}
    counts = _quotas(weights, config.n_questions)
    schedule: list[tuple[str, int]] = []
    for pair in sorted(counts):
        schedule += [pair] * counts[pair]
    rng = np.random.default_rng(derive_seed(config.seed, "dataset"))
    order = rng.permutation(len(schedule))
    mixer = feature_mixer(config)

    examples: list[Example] = []
    for idx, sched_i in enumerate(order):
        skill, concept = schedule[sched_i]
        scene = scene_for_composition(skill, concept, config, rng, mixer)
        scene.scene_id = idx
        question = generate_question(scene, skill, concept, rng)
        assert question is not None, "constructed scene must be applicable"
        examples.append(Example(scene=scene, question=question))
    return Dataset(examples=examples, config=config)


# --------------------------------------------------------------------------
# serialization (JSON Lines, one example per line)
# --------------------------------------------------------------------------

def example_to_json(ex: Example) -> dict:
    q, s = ex.question, ex.scene
    return {
        "scene_id": s.scene_id,
        "regions": [list(row) for row in s.regions],
        "objects": [{"category": CATEGORIES[o.category],
                     "color": COLORS[o.color],
                     "size": SIZES[o.size],
                     "x": o.x, "y": o.y} for o in s.objects],
        "tokens": q.words(),
        "skill": q.skill,
        "concept_mentions": [[i, CATEGORIES[c]] for i, c in q.concept_mentions],
        "answer": None if q.answer is None else ANSWERS[q.answer],
        "labeled": q.labeled,
    }


def example_from_json(obj: dict) -> Example:
    objects = [SceneObject(category=CATEGORY_TO_ID[o["category"]],
                           color=COLORS.index(o["color"]),
                           size=SIZES.index(o["size"]),
                           x=o["x"], y=o["y"]) for o in obj["objects"]]
    scene = Scene(objects=objects,
                  regions=np.array(obj["regions"], dtype=np.float64),
                  gold_region_of=_gold_map(objects),
                  scene_id=obj["scene_id"])
    answer = obj["answer"]
    question = QuestionRecord(
        tokens=[TOKEN_TO_ID[w] for w in obj["tokens"]],
        skill=obj["skill"],
        concept_mentions=[(i, CATEGORY_TO_ID[c])
                          for i, c in obj["concept_mentions"]],
        answer=None if answer is None else ANSWER_TO_ID[answer],
        labeled=obj["labeled"],
        scene_id=obj["scene_id"],
    )
    return Example(scene=scene, question=question)


def write_jsonl(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in dataset.examples:
            f.write(json.dumps(example_to_json(ex), sort_keys=True))
            f.write("\n")


def read_jsonl(path: str | Path) -> Dataset:
    examples = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                examples.append(example_from_json(json.loads(line)))
    return Dataset(examples=examples)
