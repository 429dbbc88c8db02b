"""Training objectives: supervised VQA cross-entropy, the grounding NCE loss,
the skill-matching NCE loss, and the MLM ablation baseline.

Both NCE losses softmax one positive against every reference entry (the
positive included in the denominator, exactly as written). Grounding
similarity is dot/sqrt(d) on the linear head; skill similarity is
cosine/tau_s on the two-layer head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import project_ground, project_skill


@dataclass
class LossValue:
    value: Tensor                 # scalar graph node
    positive_sim: float = float("nan")
    mean_negative_sim: float = float("nan")
    denominator_terms: int = 0

    def item(self) -> float:
        return float(self.value.data.reshape(())[()])


def _detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


def vqa_loss(logits: Tensor, gold_answer: int | None) -> LossValue:
    """Softmax cross-entropy against the single synthetic gold label."""
    if gold_answer is None:
        raise ValueError("vqa_loss needs a labeled example")
    n = logits.shape[-1]
    if not 0 <= gold_answer < n:
        raise ValueError(f"answer id {gold_answer} outside vocabulary of {n}")
    logp = ad.log_softmax(logits, axis=-1)
    loss = -logp[gold_answer]
    return LossValue(value=ad.reshape(loss, (1,)),
                     denominator_terms=n)


def vqa_loss_batch(logits: Tensor, gold_answers: Sequence[int]) -> LossValue:
    """Mean cross-entropy over a batch; every example must be labeled."""
    gold = list(gold_answers)
    if any(a is None for a in gold):
        raise ValueError("vqa_loss_batch received an unlabeled example")
    B = logits.shape[0]
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[np.arange(B), np.asarray(gold)]
    loss = ad.mul(ad.reduce_sum(picked), -1.0 / B)
    return LossValue(value=ad.reshape(loss, (1,)),
                     denominator_terms=logits.shape[-1])


def grounding_loss(params: dict[str, Tensor], h_masked: Tensor,
                   reference_tokens: Tensor,
                   positive_flags: Sequence[bool],
                   stop_reference_grad: bool = False) -> LossValue:
    """NCE over every token of every reference question.

    `reference_tokens` is the (T, d) stack of all reference-question token
    representations; exactly one flag marks the positive concept mention.
    """
    flags = np.asarray(positive_flags, dtype=bool)
    if reference_tokens.shape[0] != flags.size:
        raise ValueError("one flag per reference token required")
    if flags.sum() != 1:
        raise ValueError(f"exactly one positive required, got {flags.sum()}")
    if stop_reference_grad:
        reference_tokens = _detach(reference_tokens)
    d = h_masked.shape[-1]
    target = project_ground(params, h_masked)             # (d,)
    refs = project_ground(params, reference_tokens)       # (T, d)
    sims = ad.mul(ad.matmul(refs, target), 1.0 / np.sqrt(d))
    pos_idx = int(np.flatnonzero(flags)[0])
    logp = ad.log_softmax(sims, axis=-1)
    loss = ad.reshape(-logp[pos_idx], (1,))
    sim_vals = sims.data
    neg = np.delete(sim_vals, pos_idx)
    return LossValue(value=loss,
                     positive_sim=float(sim_vals[pos_idx]),
                     mean_negative_sim=float(neg.mean()) if neg.size else float("nan"),
                     denominator_terms=int(flags.size))


def skill_loss(params: dict[str, Tensor], h_summary: Tensor,
               reference_summaries: Tensor,
               positive_flags: Sequence[bool], tau_s: float = 0.5,
               stop_reference_grad: bool = False) -> LossValue:
    """NCE over reference summary representations, cosine/tau similarity."""
    flags = np.asarray(positive_flags, dtype=bool)
    if reference_summaries.shape[0] != flags.size:
        raise ValueError("one flag per reference summary required")
    if flags.sum() != 1:
        raise ValueError(f"exactly one positive required, got {flags.sum()}")
    if stop_reference_grad:
        reference_summaries = _detach(reference_summaries)
    target = project_skill(params, h_summary)             # (d,)
    refs = project_skill(params, reference_summaries)     # (L, d)
    t_norm = ad.sqrt(ad.reduce_sum(ad.mul(target, target)))
    r_norm = ad.sqrt(ad.reduce_sum(ad.mul(refs, refs), axis=1))
    if float(t_norm.data) == 0.0 or np.any(r_norm.data == 0.0):
        raise ValueError("zero-norm projected vector; cosine undefined")
    cos = ad.div(ad.matmul(refs, target), ad.mul(r_norm, t_norm))
    sims = ad.mul(cos, 1.0 / tau_s)
    pos_idx = int(np.flatnonzero(flags)[0])
    logp = ad.log_softmax(sims, axis=-1)
    loss = ad.reshape(-logp[pos_idx], (1,))
    sim_vals = sims.data
    neg = np.delete(sim_vals, pos_idx)
    return LossValue(value=loss,
                     positive_sim=float(sim_vals[pos_idx]),
                     mean_negative_sim=float(neg.mean()) if neg.size else float("nan"),
                     denominator_terms=int(flags.size))


def mlm_loss(params: dict[str, Tensor], h_masked: Tensor,
             gold_token_id: int) -> LossValue:
    """Cross-entropy of the vocabulary projection of the masked token."""
    logits = ad.add(ad.matmul(h_masked, params["mlm_w"]), params["mlm_b"])
    n = logits.shape[-1]
    if not 0 <= gold_token_id < n:
        raise ValueError(f"token id {gold_token_id} outside vocabulary of {n}")
    logp = ad.log_softmax(logits, axis=-1)
    loss = ad.reshape(-logp[gold_token_id], (1,))
    return LossValue(value=loss, denominator_terms=n)
