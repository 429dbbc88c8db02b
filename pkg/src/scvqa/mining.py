"""Reference candidate mining for the two contrastive losses.

Grounding (CCC) candidates: positives mention the target concept but have
dissimilar context; negatives mention none of the target's concepts but have
similar context, under two mixing weights (text-heavy and visual-heavy).
Skill candidates: top-200 most similar fully-concept-masked questions plus
200 random negatives.

Context embeddings substitute the off-the-shelf extractors with a fixed-seed
random-projection bag of tokens (questions) and mean region features
(images). Mining is a pure function of (corpus, seed) and is cached to JSONL.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotate import ConceptLexicon, discover_concepts, mask_all_concepts
from .data import (MASK_ID, PAD_ID, VOCAB, ANSWER_TO_ID, Dataset, Scene,
                   concept_token_id, derive_seed)

log = logging.getLogger(__name__)

BETA_POSITIVE = 0.6
BETA_NEG_TEXT = 0.7
BETA_NEG_VISUAL = 0.3

N_POS = 20
N_NEG = 40          # split evenly across the two negative settings
N_SKILL_POS = 200
N_SKILL_NEG = 200

EMBED_DIM = 32


# --------------------------------------------------------------------------
# context embedding
# --------------------------------------------------------------------------

@dataclass
class ContextEmbedding:
    q: np.ndarray
    v: np.ndarray


class ContextEmbedder:
    """Fixed random-projection bag-of-tokens text encoder plus mean region
    features. PAD and MASK rows are zero, so a mask contributes a zero vector
    to the mean."""

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        rng = np.random.default_rng(derive_seed(seed, "context-embedder"))
        table = rng.standard_normal((len(VOCAB), dim))
        table[PAD_ID] = 0.0
        table[MASK_ID] = 0.0
        self.table = table
        self.dim = dim

    def embed_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        if len(tokens) == 0:
            raise ValueError("cannot embed an empty token list")
        return self.table[list(tokens)].mean(axis=0)

    def embed_scene(self, scene: Scene) -> np.ndarray:
        return scene.regions.mean(axis=0)


def context_embed(scene: Scene, tokens: Sequence[int],
                  embedder: ContextEmbedder) -> ContextEmbedding:
    return ContextEmbedding(q=embedder.embed_tokens(tokens),
                            v=embedder.embed_scene(scene))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def xi(target: ContextEmbedding, candidate: ContextEmbedding,
       beta: float) -> float:
    """Contextual similarity: beta * cos(q, q') + (1 - beta) * cos(v, v')."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    return beta * cosine(target.q, candidate.q) + (1.0 - beta) * cosine(
        target.v, candidate.v)


def presence_filter(question_skill: str, answer: int | None) -> bool:
    """Heuristic: keep candidates whose image likely shows the concept.

    Rejects counting questions answered "0" and existence questions answered
    "no". Accepts everything else (including unanswered records).
    """
    if answer is None:
        return True
    if question_skill == "counting" and answer == ANSWER_TO_ID["0"]:
        return False
    if question_skill == "existence" and answer == ANSWER_TO_ID["no"]:
        return False
    return True


# --------------------------------------------------------------------------
# candidate types
# --------------------------------------------------------------------------

@dataclass
class GroundingCandidates:
    target_id: int
    concept: int
    positives: list[int]          # xi-minimizing under BETA_POSITIVE
    negatives_text: list[int]     # xi-maximizing under BETA_NEG_TEXT
    negatives_visual: list[int]   # xi-maximizing under BETA_NEG_VISUAL
    short_pool: bool = False


@dataclass
class SkillCandidates:
    target_id: int
    positives: list[int]          # top cosine of fully-masked questions
    negatives: list[int]          # uniform random from the rest
    short_pool: bool = False


@dataclass
class ReferenceEntry:
    target_id: int
    concept: int
    positives: list[int]
    negatives_text: list[int]
    negatives_visual: list[int]
    skill_positives: list[int]
    skill_negatives: list[int]
    short_pool: bool = False


@dataclass
class ReferenceCache:
    entries: dict[int, ReferenceEntry] = field(default_factory=dict)

    def __contains__(self, target_id: int) -> bool:
        return target_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tid in sorted(self.entries):
                e = self.entries[tid]
                f.write(json.dumps({
                    "target_id": e.target_id, "concept": e.concept,
                    "positives": e.positives,
                    "negatives_text": e.negatives_text,
                    "negatives_visual": e.negatives_visual,
                    "skill_positives": e.skill_positives,
                    "skill_negatives": e.skill_negatives,
                    "short_pool": e.short_pool,
                }, sort_keys=True))
                f.write("\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "ReferenceCache":
        cache = cls()
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                o = json.loads(line)
                cache.entries[o["target_id"]] = ReferenceEntry(
                    target_id=o["target_id"], concept=o["concept"],
                    positives=o["positives"],
                    negatives_text=o["negatives_text"],
                    negatives_visual=o["negatives_visual"],
                    skill_positives=o["skill_positives"],
                    skill_negatives=o["skill_negatives"],
                    short_pool=o["short_pool"])
        return cache


# --------------------------------------------------------------------------
# mining context: precomputed embeddings and pools
# --------------------------------------------------------------------------

class MiningContext:
    """Precomputed normalized context embeddings and candidate pools."""

    def __init__(self, dataset: Dataset, lexicon: ConceptLexicon | None = None,
                 seed: int = 0, dim: int = EMBED_DIM):
        if lexicon is None:
            lexicon = discover_concepts(
                [ex.question for ex in dataset.examples],
                top_k=len(VOCAB))
        self.dataset = dataset
        self.lexicon = lexicon
        self.seed = seed
        self.embedder = ContextEmbedder(seed=seed, dim=dim)
        n = len(dataset)

        q_ground = np.zeros((n, dim))
        q_skill = np.zeros((n, dim))
        v = np.zeros((n, dataset.examples[0].scene.regions.shape[1]))
        concepts: list[frozenset[int]] = []
        self.mention_pos: dict[int, int] = {}

        for i, ex in enumerate(dataset.examples):
            tokens = ex.question.tokens
            mentioned = frozenset(c for _, c in ex.question.concept_mentions)
            concepts.append(mentioned)
            masked_all = mask_all_concepts(tokens, lexicon)
            q_skill[i] = self.embedder.embed_tokens(masked_all)
            if ex.question.concept_mentions:
                # single grounding view: mask the (unique) mention
                pos, _ = ex.question.concept_mentions[0]
                self.mention_pos[i] = pos
                masked = list(tokens)
                for p, _c in ex.question.concept_mentions:
                    masked[p] = MASK_ID
                q_ground[i] = self.embedder.embed_tokens(masked)
            else:
                q_ground[i] = q_skill[i]
            v[i] = self.embedder.embed_scene(ex.scene)

        self.concepts_of = concepts
        self.qg_norm = _normalize_rows(q_ground)
        self.qs_norm = _normalize_rows(q_skill)
        self.v_norm = _normalize_rows(v)

        # pools shared by every target mentioning the same single concept
        self.pos_pool: dict[int, np.ndarray] = {}
        self.neg_pool: dict[frozenset[int], np.ndarray] = {}
        by_concept: dict[int, list[int]] = {}
        for i, ex in enumerate(dataset.examples):
            for _, c in ex.question.concept_mentions:
                if presence_filter(ex.question.skill, ex.question.answer):
                    by_concept.setdefault(c, []).append(i)
        for c, ids in by_concept.items():
            self.pos_pool[c] = np.array(sorted(set(ids)), dtype=np.int64)
        all_ids = np.arange(n, dtype=np.int64)
        distinct_sets = set(concepts)
        for cs in distinct_sets:
            mask = np.array([not (concepts[i] & cs) for i in range(n)])
            self.neg_pool[cs] = all_ids[mask]

    # -- score rows ---------------------------------------------------------

    def cos_q_ground(self, target: int) -> np.ndarray:
        return self.qg_norm @ self.qg_norm[target]

    def cos_q_skill(self, target: int) -> np.ndarray:
        return self.qs_norm @ self.qs_norm[target]

    def cos_v(self, target: int) -> np.ndarray:
        return self.v_norm @ self.v_norm[target]


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm context embedding")
    return m / norms


# duplicate templated questions produce exact score ties whose last-ulp
# noise depends on how the cosine was computed; quantizing before ranking
# makes the id tie-break independent of the arithmetic path
SCORE_DECIMALS = 9


def quantize_scores(scores: np.ndarray) -> np.ndarray:
    return np.round(scores, SCORE_DECIMALS)


def _top_ids(ids: np.ndarray, scores: np.ndarray, k: int,
             largest: bool) -> tuple[list[int], bool]:
    """The k extremal ids, ties at the boundary broken by ascending id.

    Returned in canonical order (score extremal-first, then id). Second item
    flags a short pool (fewer candidates than k).
    """
    key = -scores if largest else scores
    if ids.size <= k:
        order = np.lexsort((ids, key))
        return [int(i) for i in ids[order]], ids.size < k
    part = np.argpartition(key, k - 1)[:k]
    kth = key[part].max()
    strict_idx = np.flatnonzero(key < kth)
    tie_idx = np.flatnonzero(key == kth)
    need = k - strict_idx.size
    tie_keep = tie_idx[np.argsort(ids[tie_idx])[:need]]
    sel = np.concatenate([strict_idx, tie_keep])
    order = np.lexsort((ids[sel], key[sel]))
    return [int(i) for i in ids[sel][order]], False


# --------------------------------------------------------------------------
# per-target candidate construction
# --------------------------------------------------------------------------

def build_grounding_candidates(ctx: MiningContext, target_id: int,
                               concept: int | None = None,
                               n_pos: int = N_POS,
                               n_neg: int = N_NEG) -> GroundingCandidates | None:
    """CCC candidates for one target; None (logged) when no positives exist."""
    q = ctx.dataset.examples[target_id].question
    if concept is None:
        if not q.concept_mentions:
            log.info("target %d skipped: no concept mention", target_id)
            return None
        concept = q.concept_mentions[0][1]
    pos_ids = ctx.pos_pool.get(concept, np.empty(0, dtype=np.int64))
    pos_ids = pos_ids[pos_ids != target_id]
    if pos_ids.size == 0:
        log.info("target %d skipped: empty positive pool for concept %d",
                 target_id, concept)
        return None
    neg_ids = ctx.neg_pool[ctx.concepts_of[target_id]]
    neg_ids = neg_ids[neg_ids != target_id]

    cq = ctx.cos_q_ground(target_id)
    cv = ctx.cos_v(target_id)

    xi_pos = BETA_POSITIVE * cq[pos_ids] + (1 - BETA_POSITIVE) * cv[pos_ids]
    positives, short1 = _top_ids(pos_ids, quantize_scores(xi_pos), n_pos,
                                 largest=False)

    half = n_neg // 2
    xi_text = BETA_NEG_TEXT * cq[neg_ids] + (1 - BETA_NEG_TEXT) * cv[neg_ids]
    neg_text, short2 = _top_ids(neg_ids, quantize_scores(xi_text), half,
                                largest=True)
    xi_vis = BETA_NEG_VISUAL * cq[neg_ids] + (1 - BETA_NEG_VISUAL) * cv[neg_ids]
    neg_vis, short3 = _top_ids(neg_ids, quantize_scores(xi_vis), half,
                               largest=True)

    return GroundingCandidates(
        target_id=target_id, concept=concept, positives=positives,
        negatives_text=neg_text, negatives_visual=neg_vis,
        short_pool=short1 or short2 or short3)


def build_random_grounding_candidates(ctx: MiningContext, target_id: int,
                                      rng: np.random.Generator,
                                      concept: int | None = None,
                                      n_pos: int = N_POS,
                                      n_neg: int = N_NEG) -> GroundingCandidates | None:
    """Baseline: uniform sampling from the mention pools, no xi ranking."""
    q = ctx.dataset.examples[target_id].question
    if concept is None:
        if not q.concept_mentions:
            return None
        concept = q.concept_mentions[0][1]
    pos_ids = ctx.pos_pool.get(concept, np.empty(0, dtype=np.int64))
    pos_ids = pos_ids[pos_ids != target_id]
    if pos_ids.size == 0:
        return None
    neg_ids = ctx.neg_pool[ctx.concepts_of[target_id]]
    neg_ids = neg_ids[neg_ids != target_id]
    half = n_neg // 2

    def pick(pool: np.ndarray, k: int) -> tuple[list[int], bool]:
        if pool.size <= k:
            return [int(i) for i in pool], pool.size < k
        sel = rng.choice(pool, size=k, replace=False)
        return sorted(int(i) for i in sel), False

    positives, s1 = pick(pos_ids, n_pos)
    neg_text, s2 = pick(neg_ids, half)
    neg_vis, s3 = pick(neg_ids, half)
    return GroundingCandidates(
        target_id=target_id, concept=concept, positives=positives,
        negatives_text=neg_text, negatives_visual=neg_vis,
        short_pool=s1 or s2 or s3)


def build_skill_candidates(ctx: MiningContext, target_id: int,
                           n_pos: int = N_SKILL_POS,
                           n_neg: int = N_SKILL_NEG) -> SkillCandidates:
    """Top-n_pos cosine-similar fully-masked questions plus random negatives."""
    n = len(ctx.dataset)
    ids = np.arange(n, dtype=np.int64)
    ids = ids[ids != target_id]
    cos = quantize_scores(ctx.cos_q_skill(target_id)[ids])
    positives, short1 = _top_ids(ids, cos, n_pos, largest=True)
    pos_set = set(positives)
    rest = np.array([int(i) for i in ids if int(i) not in pos_set],
                    dtype=np.int64)
    rng = np.random.default_rng(
        derive_seed(ctx.seed, f"skill-neg:{target_id}"))
    if rest.size <= n_neg:
        negatives = [int(i) for i in rest]
        short2 = rest.size < n_neg
    else:
        negatives = sorted(int(i) for i in rng.choice(rest, size=n_neg,
                                                      replace=False))
        short2 = False
    return SkillCandidates(target_id=target_id, positives=positives,
                           negatives=negatives, short_pool=short1 or short2)


# --------------------------------------------------------------------------
# corpus-level mining
# --------------------------------------------------------------------------

def mine_reference_cache(dataset: Dataset, lexicon: ConceptLexicon | None = None,
                         seed: int = 0, mode: str = "ccc",
                         n_pos: int = N_POS, n_neg: int = N_NEG,
                         n_skill_pos: int = N_SKILL_POS,
                         n_skill_neg: int = N_SKILL_NEG) -> ReferenceCache:
    """Mine candidates for every target with a groundable mention.

    `mode` is "ccc" (xi-ranked pools) or "random" (uniform from the mention
    pools; the Table-4 baseline). Skill candidates are identical in both.
    """
    if mode not in ("ccc", "random"):
        raise ValueError(f"unknown mining mode {mode!r}")
    ctx = MiningContext(dataset, lexicon, seed=seed)
    rng = np.random.default_rng(derive_seed(seed, "random-ground-refs"))
    cache = ReferenceCache()
    for tid, ex in enumerate(dataset.examples):
        if not ex.question.concept_mentions:
            continue
        if mode == "ccc":
            g = build_grounding_candidates(ctx, tid, n_pos=n_pos, n_neg=n_neg)
        else:
            g = build_random_grounding_candidates(ctx, tid, rng,
                                                  n_pos=n_pos, n_neg=n_neg)
        if g is None:
            continue
        s = build_skill_candidates(ctx, tid, n_pos=n_skill_pos,
                                   n_neg=n_skill_neg)
        cache.entries[tid] = ReferenceEntry(
            target_id=tid, concept=g.concept, positives=g.positives,
            negatives_text=g.negatives_text,
            negatives_visual=g.negatives_visual,
            skill_positives=s.positives, skill_negatives=s.negatives,
            short_pool=g.short_pool or s.short_pool)
    return cache


# --------------------------------------------------------------------------
# per-step reference sampling
# --------------------------------------------------------------------------

def sample_reference_set(entry: ReferenceEntry, kind: str,
                         rng: np.random.Generator) -> tuple[int, list[int]]:
    """Sample one training reference set: (positive id, negative ids).

    Grounding draws one negative from each of the two settings; skill draws
    two from its single pool. No duplicate ids within a set.
    """
    if kind == "grounding":
        if not entry.positives:
            raise ValueError("empty pool: grounding positives")
        if not entry.negatives_text:
            raise ValueError("empty pool: grounding text negatives")
        if not entry.negatives_visual:
            raise ValueError("empty pool: grounding visual negatives")
        pos = int(rng.choice(entry.positives))
        neg_t = int(rng.choice(entry.negatives_text))
        vis_pool = [i for i in entry.negatives_visual if i != neg_t]
        if not vis_pool:
            raise ValueError("empty pool: grounding visual negatives "
                             "(after de-duplication)")
        neg_v = int(rng.choice(vis_pool))
        return pos, [neg_t, neg_v]
    if kind == "skill":
        if not entry.skill_positives:
            raise ValueError("empty pool: skill positives")
        if len(entry.skill_negatives) < 2:
            raise ValueError("empty pool: skill negatives")
        pos = int(rng.choice(entry.skill_positives))
        negs = rng.choice(entry.skill_negatives, size=2, replace=False)
        return pos, [int(i) for i in negs]
    raise ValueError(f"unknown reference kind {kind!r}")
