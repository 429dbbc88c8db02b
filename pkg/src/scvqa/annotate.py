"""Corpus-level concept discovery, template-based skill labeling, mention
location, and concept masking.

The synthetic vocabulary is closed and already lemmatized, so POS tagging
collapses to exact word match against a stoplist of non-groundable words
(template fillers).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .data import (FILLER_WORDS, MASK_ID, MASK_TOKEN, PAD_TOKEN, SUPERCAT_OF,
                   TEMPLATES, TOKEN_TO_ID, VOCAB, QuestionRecord,
                   token_concept_id)

# words that can never be grounded to a region
STOPLIST: frozenset[str] = frozenset(FILLER_WORDS) | {PAD_TOKEN, MASK_TOKEN}


@dataclass
class ConceptEntry:
    word: str
    frequency: int
    groundable: bool
    supercategory: str | None


@dataclass
class ConceptLexicon:
    entries: list[ConceptEntry]          # ranked by descending frequency
    stoplist: frozenset[str] = STOPLIST
    _ids: set[int] = field(default_factory=set, repr=False)

    def __post_init__(self):
        self._ids = {TOKEN_TO_ID[e.word] for e in self.entries if e.groundable}

    def __contains__(self, token_id: int) -> bool:
        return token_id in self._ids

    def words(self) -> list[str]:
        return [e.word for e in self.entries]

    def to_json(self) -> dict:
        return {
            "concepts": [{"word": e.word, "frequency": e.frequency,
                          "groundable": e.groundable,
                          "supercategory": e.supercategory}
                         for e in self.entries],
            "stoplist": sorted(self.stoplist),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ConceptLexicon":
        entries = [ConceptEntry(c["word"], c["frequency"], c["groundable"],
                                c["supercategory"]) for c in obj["concepts"]]
        return cls(entries=entries, stoplist=frozenset(obj["stoplist"]))


def discover_concepts(questions: Iterable[QuestionRecord],
                      top_k: int = 400) -> ConceptLexicon:
    """Frequency-ranked groundable nouns; stoplisted words never qualify.

    Frequency ties break lexicographically for determinism.
    """
    counts: Counter[str] = Counter()
    n = 0
    for q in questions:
        n += 1
        for t in q.tokens:
            word = VOCAB[t]
            if word not in STOPLIST:
                counts[word] += 1
    if n == 0:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    entries = [ConceptEntry(word=w, frequency=c, groundable=True,
                            supercategory=SUPERCAT_OF.get(w))
               for w, c in ranked]
    return ConceptLexicon(entries=entries)


def label_skill(question: QuestionRecord) -> str | None:
    """Template match: fixed prefix/suffix around a single concept slot.

    Returns None ("unlabeled") when no template matches; never guesses.
    """
    words = question.words()
    for skill, (prefix, suffix) in TEMPLATES.items():
        if len(words) != len(prefix) + 1 + len(suffix):
            continue
        if words[:len(prefix)] != prefix:
            continue
        if suffix and words[len(prefix) + 1:] != suffix:
            continue
        slot = words[len(prefix)]
        if slot in STOPLIST and slot != MASK_TOKEN:
            continue
        return skill
    return None


def find_concept_mentions(question: QuestionRecord,
                          lexicon: ConceptLexicon) -> list[tuple[int, int]]:
    """All (token index, concept id) hits of groundable lexicon words, in order."""
    return [(i, token_concept_id(t)) for i, t in enumerate(question.tokens)
            if t in lexicon]


@dataclass
class MaskedQuestion:
    tokens: list[int]
    masked_position: int
    masked_concept: int


def mask_concept(question: QuestionRecord, mention_index: int) -> MaskedQuestion:
    """Replace the mention at token position `mention_index` with MASK."""
    hits = dict(question.concept_mentions)
    if mention_index not in hits:
        raise ValueError(f"token {mention_index} is not a concept mention")
    tokens = list(question.tokens)
    tokens[mention_index] = MASK_ID
    return MaskedQuestion(tokens=tokens, masked_position=mention_index,
                          masked_concept=hits[mention_index])


def mask_all_concepts(tokens: Sequence[int], lexicon: ConceptLexicon) -> list[int]:
    """Every groundable lexicon word replaced by MASK (skill-matching view)."""
    return [MASK_ID if t in lexicon else t for t in tokens]
