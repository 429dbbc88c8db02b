"""Novel-split construction, metrics, and the ablation harness.

A novel slice is either a skill-concept composition or a bare concept. Every
question matching a slice is removed from the labeled training pool: its label
is stripped, it joins the unlabeled pool, and a third of each slice is held
out as its test set. Accuracy is exact match on the synthetic gold answer;
grounding quality is recall@k of the gold region under the grounding-head
similarity.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import (ANSWERS, CATEGORIES, CATEGORY_TO_ID, Dataset, Example,
                   derive_seed)
from .encoder import EncoderConfig, answer_logits, encode_batch, project_ground
from .mining import ReferenceCache, mine_reference_cache
from .training import (TrainConfig, TrainState, collate, desk_train_config,
                       train)

log = logging.getLogger(__name__)

MIN_NOVEL_TRAIN = 400
MIN_NOVEL_TEST = 200


# --------------------------------------------------------------------------
# slices and splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SliceSpec:
    kind: str                 # "composition" or "concept"
    concept: int              # category id
    skill: str | None = None  # set for compositions

    def __post_init__(self):
        if self.kind not in ("composition", "concept"):
            raise ValueError(f"unknown slice kind {self.kind!r}")
        if self.kind == "composition" and self.skill is None:
            raise ValueError("composition slice needs a skill")

    def matches(self, ex: Example) -> bool:
        mentioned = any(c == self.concept
                        for _, c in ex.question.concept_mentions)
        if self.kind == "concept":
            return mentioned
        return mentioned and ex.question.skill == self.skill

    @property
    def name(self) -> str:
        word = CATEGORIES[self.concept]
        if self.kind == "composition":
            return f"{self.skill}/{word}"
        return f"concept/{word}"


def default_novel_slices() -> list[SliceSpec]:
    """Three held-out compositions plus three held-out concepts."""
    return [
        SliceSpec("composition", CATEGORY_TO_ID["dog"], "counting"),
        SliceSpec("composition", CATEGORY_TO_ID["car"], "color"),
        SliceSpec("composition", CATEGORY_TO_ID["plate"], "subcategory"),
        SliceSpec("concept", CATEGORY_TO_ID["zebra"]),
        SliceSpec("concept", CATEGORY_TO_ID["laptop"]),
        SliceSpec("concept", CATEGORY_TO_ID["chair"]),
    ]


@dataclass
class NovelSplit:
    slices: list[SliceSpec]
    labeled_ids: list[int]
    unlabeled_ids: list[int]
    test_ids: list[int]
    slice_of: dict[int, int]          # example id -> slice index (novel only)
    test_fraction: float
    seed: int

    def test_ids_for_slice(self, slice_index: int) -> list[int]:
        return [i for i in self.test_ids if self.slice_of[i] == slice_index]

    def to_json(self) -> dict:
        return {
            "slices": [asdict(s) for s in self.slices],
            "labeled_ids": self.labeled_ids,
            "unlabeled_ids": self.unlabeled_ids,
            "test_ids": self.test_ids,
            "slice_of": {str(k): v for k, v in self.slice_of.items()},
            "test_fraction": self.test_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NovelSplit":
        return cls(
            slices=[SliceSpec(**s) for s in obj["slices"]],
            labeled_ids=list(obj["labeled_ids"]),
            unlabeled_ids=list(obj["unlabeled_ids"]),
            test_ids=list(obj["test_ids"]),
            slice_of={int(k): v for k, v in obj["slice_of"].items()},
            test_fraction=obj["test_fraction"],
            seed=obj["seed"])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def read_json(cls, path: str | Path) -> "NovelSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_novel_splits(dataset: Dataset,
                       slices: Sequence[SliceSpec] | None = None,
                       test_fraction: float = 1.0 / 3.0,
                       seed: int = 0,
                       min_train: int = MIN_NOVEL_TRAIN,
                       min_test: int = MIN_NOVEL_TEST) -> NovelSplit:
    """Partition the corpus into labeled / unlabeled / test ids.

    A question joins the first slice that matches it. Each slice keeps
    `test_fraction` of its questions as test; the rest become the unlabeled
    pool. Errors when any slice falls below the train/test floor.
    """
    if slices is None:
        slices = default_novel_slices()
    slices = list(slices)
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    per_slice: list[list[int]] = [[] for _ in slices]
    labeled: list[int] = []
    slice_of: dict[int, int] = {}
    for i, ex in enumerate(dataset.examples):
        for j, spec in enumerate(slices):
            if spec.matches(ex):
                per_slice[j].append(i)
                slice_of[i] = j
                break
        else:
            labeled.append(i)

    rng = np.random.default_rng(derive_seed(seed, "novel-split"))
    unlabeled: list[int] = []
    test: list[int] = []
    for j, ids in enumerate(per_slice):
        ids = np.array(ids, dtype=np.int64)
        order = rng.permutation(ids)
        n_test = int(np.ceil(test_fraction * ids.size))
        n_train = ids.size - n_test
        if n_train < min_train or n_test < min_test:
            raise ValueError(
                f"slice {slices[j].name} too small: {n_train} unlabeled "
                f"training questions (floor {min_train}), {n_test} test "
                f"questions (floor {min_test})")
        test += sorted(int(i) for i in order[:n_test])
        unlabeled += sorted(int(i) for i in order[n_test:])

    return NovelSplit(slices=slices, labeled_ids=labeled,
                      unlabeled_ids=sorted(unlabeled), test_ids=sorted(test),
                      slice_of=slice_of, test_fraction=test_fraction,
                      seed=seed)


def apply_split(dataset: Dataset, split: NovelSplit) -> Dataset:
    """Copy of the dataset with labels stripped from every novel question."""
    examples = []
    novel = set(split.unlabeled_ids) | set(split.test_ids)
    for i, ex in enumerate(dataset.examples):
        if i in novel:
            q = copy.copy(ex.question)
            q.answer = None
            q.labeled = False
            ex = Example(scene=ex.scene, question=q)
        examples.append(ex)
    return Dataset(examples=examples, config=dataset.config)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def predict(params, config: EncoderConfig, dataset: Dataset,
            ids: Sequence[int], batch_size: int = 256) -> np.ndarray:
    """Argmax answer ids for the given examples."""
    preds = np.empty(len(ids), dtype=np.int64)
    for start in range(0, len(ids), batch_size):
        chunk = list(ids[start:start + batch_size])
        examples = [dataset.examples[i] for i in chunk]
        regions, rmask, tokens, tmask, _ = collate(examples)
        batch = encode_batch(params, config, regions, rmask, tokens, tmask)
        logits = answer_logits(params, batch.cls)
        preds[start:start + len(chunk)] = np.argmax(logits.data, axis=-1)
    return preds


def vqa_accuracy(params, config: EncoderConfig, dataset: Dataset,
                 ids: Sequence[int], gold: dict[int, int],
                 batch_size: int = 256) -> float:
    """Exact-match accuracy in percent against the gold answer map."""
    if len(ids) == 0:
        raise ValueError("empty evaluation set")
    preds = predict(params, config, dataset, ids, batch_size)
    correct = sum(int(preds[k] == gold[i]) for k, i in enumerate(ids))
    return 100.0 * correct / len(ids)


def gold_answers(dataset: Dataset, ids: Sequence[int]) -> dict[int, int]:
    gold = {}
    for i in ids:
        a = dataset.examples[i].question.answer
        if a is None:
            raise ValueError(f"example {i} has no gold answer")
        gold[i] = a
    return gold


def grounding_recall_at_k(params, config: EncoderConfig, dataset: Dataset,
                          ids: Sequence[int], k: int = 5,
                          batch_size: int = 256) -> float:
    """Recall@k of gold regions under the grounding-head similarity.

    The mention-position token of the unmasked question is scored against
    every region; a question counts as a hit when any gold region of its
    concept lands in the top k. Single-region scenes are excluded.
    """
    usable = []
    for i in ids:
        ex = dataset.examples[i]
        if not ex.question.concept_mentions:
            continue
        if ex.scene.regions.shape[0] <= 1:
            continue
        _, concept = ex.question.concept_mentions[0]
        if not ex.scene.gold_region_of.get(concept):
            continue   # nothing to ground (e.g. existence answered "no")
        usable.append(i)
    if not usable:
        raise ValueError("no multi-region questions with concept mentions")
    hits = 0
    for start in range(0, len(usable), batch_size):
        chunk = usable[start:start + batch_size]
        examples = [dataset.examples[i] for i in chunk]
        regions, rmask, tokens, tmask, _ = collate(examples)
        batch = encode_batch(params, config, regions, rmask, tokens, tmask)
        tok_proj = project_ground(params, batch.h).data
        reg_proj = project_ground(params, batch.z).data
        d = tok_proj.shape[-1]
        for row, i in enumerate(chunk):
            ex = dataset.examples[i]
            pos, concept = ex.question.concept_mentions[0]
            m = ex.scene.regions.shape[0]
            sims = reg_proj[row, :m] @ tok_proj[row, pos] / np.sqrt(d)
            top = np.argsort(-sims, kind="stable")[:k]
            gold = set(ex.scene.gold_region_of.get(concept, []))
            if gold & set(int(r) for r in top):
                hits += 1
    return 100.0 * hits / len(usable)


# --------------------------------------------------------------------------
# ablation harness
# --------------------------------------------------------------------------

ABLATION_CONFIGS = ["base", "base+mlm", "base+skill", "base+ground", "full",
                    "full-random-refs"]


def ablation_train_config(name: str, template: TrainConfig) -> TrainConfig:
    """Template with the loss flags of one ablation row."""
    if name not in ABLATION_CONFIGS:
        raise ValueError(f"unknown ablation config {name!r}")
    cfg = copy.deepcopy(template)
    cfg.use_mlm = name == "base+mlm"
    cfg.use_skill = name in ("base+skill", "full", "full-random-refs")
    cfg.use_grounding = name in ("base+ground", "full", "full-random-refs")
    if name == "base":
        cfg.p_sep = 0.0
    return cfg


def cache_mode_for(name: str) -> str | None:
    if name == "base":
        return None
    return "random" if name == "full-random-refs" else "ccc"


@dataclass
class RunResult:
    config_name: str
    seed: int
    overall_accuracy: float
    slice_accuracy: dict[str, float]
    recall_at_5: float


@dataclass
class AblationResult:
    runs: list[RunResult] = field(default_factory=list)
    input_hashes: dict[str, str] = field(default_factory=dict)

    def accuracies(self, name: str) -> list[float]:
        return [r.overall_accuracy for r in self.runs if r.config_name == name]

    def recalls(self, name: str) -> list[float]:
        return [r.recall_at_5 for r in self.runs if r.config_name == name]

    def slice_accuracies(self, name: str, slice_name: str) -> list[float]:
        return [r.slice_accuracy[slice_name] for r in self.runs
                if r.config_name == name]

    def mean_accuracy(self, name: str) -> float:
        return float(np.mean(self.accuracies(name)))

    def std_accuracy(self, name: str) -> float:
        vals = self.accuracies(name)
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def to_json(self) -> dict:
        return {"runs": [asdict(r) for r in self.runs],
                "input_hashes": self.input_hashes}

    @classmethod
    def from_json(cls, obj: dict) -> "AblationResult":
        return cls(runs=[RunResult(**r) for r in obj["runs"]],
                   input_hashes=dict(obj["input_hashes"]))

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True,
                                         indent=1))

    @classmethod
    def read_json(cls, path: str | Path) -> "AblationResult":
        return cls.from_json(json.loads(Path(path).read_text()))


def dataset_hash(dataset: Dataset) -> str:
    """Content hash over the serialized examples."""
    from .data import example_to_json
    h = hashlib.sha256()
    for ex in dataset.examples:
        h.update(json.dumps(example_to_json(ex), sort_keys=True).encode())
    return h.hexdigest()


def split_hash(split: NovelSplit) -> str:
    return hashlib.sha256(
        json.dumps(split.to_json(), sort_keys=True).encode()).hexdigest()


def evaluate_run(state: TrainState, dataset: Dataset, split: NovelSplit,
                 gold: dict[int, int], config_name: str, seed: int) -> RunResult:
    params, enc = state.params, state.config.encoder
    overall = vqa_accuracy(params, enc, dataset, split.test_ids, gold)
    per_slice = {}
    for j, spec in enumerate(split.slices):
        ids = split.test_ids_for_slice(j)
        per_slice[spec.name] = vqa_accuracy(params, enc, dataset, ids, gold)
    recall = grounding_recall_at_k(params, enc, dataset, split.test_ids, k=5)
    return RunResult(config_name=config_name, seed=seed,
                     overall_accuracy=overall, slice_accuracy=per_slice,
                     recall_at_5=recall)


def run_ablation(dataset: Dataset, split: NovelSplit,
                 seeds: Sequence[int],
                 template: TrainConfig | None = None,
                 config_names: Sequence[str] | None = None,
                 cache_ccc: ReferenceCache | None = None,
                 cache_random: ReferenceCache | None = None,
                 log_progress: bool = True) -> AblationResult:
    """Train and evaluate every ablation row over the given seeds.

    Gold labels for the test set are read from the original dataset before
    stripping; the models only ever see the stripped copy.
    """
    if template is None:
        template = desk_train_config()
    if config_names is None:
        config_names = ABLATION_CONFIGS
    gold = gold_answers(dataset, split.test_ids)
    stripped = apply_split(dataset, split)
    pool = split.labeled_ids + split.unlabeled_ids

    need_ccc = any(cache_mode_for(n) == "ccc" for n in config_names)
    need_random = any(cache_mode_for(n) == "random" for n in config_names)
    if need_ccc and cache_ccc is None:
        cache_ccc = mine_reference_cache(stripped, seed=template.seed,
                                         mode="ccc")
    if need_random and cache_random is None:
        cache_random = mine_reference_cache(stripped, seed=template.seed,
                                            mode="random")

    result = AblationResult(input_hashes={
        "dataset": dataset_hash(dataset), "split": split_hash(split)})
    for name in config_names:
        for seed in seeds:
            cfg = ablation_train_config(name, template)
            cfg.seed = seed
            cache = {None: None, "ccc": cache_ccc,
                     "random": cache_random}[cache_mode_for(name)]
            state, _ = train(cfg, stripped, split.labeled_ids, pool, cache)
            run = evaluate_run(state, dataset, split, gold, name, seed)
            result.runs.append(run)
            if log_progress:
                log.info("%s seed=%d acc=%.2f recall@5=%.2f", name, seed,
                         run.overall_accuracy, run.recall_at_5)
    return result


def format_ablation_table(result: AblationResult) -> str:
    """Plain-text summary: accuracy and recall mean +/- stdev per config."""
    names = []
    for r in result.runs:
        if r.config_name not in names:
            names.append(r.config_name)
    lines = [f"{'config':<18} {'accuracy':>16} {'recall@5':>16}"]
    for name in names:
        accs = result.accuracies(name)
        recs = result.recalls(name)
        acc = f"{np.mean(accs):6.2f} +/- {np.std(accs, ddof=1) if len(accs) > 1 else 0.0:5.2f}"
        rec = f"{np.mean(recs):6.2f} +/- {np.std(recs, ddof=1) if len(recs) > 1 else 0.0:5.2f}"
        lines.append(f"{name:<18} {acc:>16} {rec:>16}")
    lines.append("")
    lines.append(f"dataset sha256: {result.input_hashes.get('dataset', '?')}")
    lines.append(f"split sha256:   {result.input_hashes.get('split', '?')}")
    return "\n".join(lines)
