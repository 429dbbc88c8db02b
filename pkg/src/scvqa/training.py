"""Multi-task training loop.

Every step takes a supervised VQA update from the labeled pool; with
probability p_sep it additionally draws one target from the labeled+unlabeled
pool, samples a grounding reference set (1 positive, 1 negative from each
setting) and a skill reference set (1 positive, 2 negatives), and takes a
second optimizer step minimizing the sum of the active contrastive losses.
The two updates share one Adam state.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradients
from .checkpoint import load_tensors, save_tensors, CheckpointError
from .data import Dataset, Example, MASK_ID, PAD_ID, derive_seed
from .encoder import (EncoderConfig, EncodedBatch, desk_config, encode_batch,
                      answer_logits, init_params, summary_batch)
from .losses import grounding_loss, mlm_loss, skill_loss, vqa_loss_batch
from .mining import ReferenceCache, sample_reference_set
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # paper-preset optimization settings; desk runs override via desk_train_config
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 13
    lr_decay: float = 0.2
    decay_epochs: tuple[int, ...] = (10,)
    p_sep: float = 0.1
    n_ref_pos: int = 1
    n_ref_neg: int = 2
    seed: int = 0
    use_grounding: bool = True
    use_skill: bool = True
    use_mlm: bool = False
    stop_reference_grad: bool = False
    # draw separate targets for the grounding and skill objectives; with a
    # shared target the two gradients collide on the same question context
    # and the combined step underperforms either loss alone
    independent_targets: bool = False
    max_ref_retries: int = 10
    encoder: EncoderConfig = field(default_factory=desk_config)

    def __post_init__(self):
        if not 0.0 <= self.p_sep <= 1.0:
            raise ValueError("p_sep must be in [0, 1]")
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig.from_json(self.encoder)
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size and epochs must be positive")
        self.decay_epochs = tuple(self.decay_epochs)

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["decay_epochs"] = list(self.decay_epochs)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


def paper_train_config(**overrides) -> TrainConfig:
    from .encoder import paper_config
    return TrainConfig(encoder=paper_config(), **overrides)


def desk_train_config(**overrides) -> TrainConfig:
    """CPU-scale settings: small encoder, few epochs, larger learning rate."""
    defaults = dict(lr=1e-3, epochs=8, decay_epochs=(6,), p_sep=0.3,
                    independent_targets=True, stop_reference_grad=True,
                    encoder=desk_config())
    defaults.update(overrides)
    return TrainConfig(**defaults)


@dataclass
class TrainState:
    params: dict[str, Tensor]
    adam: AdamState
    config: TrainConfig
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    counters: dict[str, int] = field(default_factory=lambda: {
        "vqa_steps": 0, "contrastive_steps": 0, "skipped_targets": 0,
        "labeled_examples_seen": 0, "unlabeled_in_vqa": 0})


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

def collate(examples: Sequence[Example],
            mask_positions: Sequence[int | None] | None = None):
    """Pad a list of examples into batch arrays; returns
    (regions, region_mask, tokens, token_mask, lengths)."""
    B = len(examples)
    if mask_positions is None:
        mask_positions = [None] * B
    m_max = max(ex.scene.regions.shape[0] for ex in examples)
    n_max = max(len(ex.question.tokens) for ex in examples)
    d_v = examples[0].scene.regions.shape[1]
    regions = np.zeros((B, m_max, d_v))
    region_mask = np.zeros((B, m_max))
    tokens = np.full((B, n_max), PAD_ID, dtype=np.int64)
    token_mask = np.zeros((B, n_max))
    lengths = np.zeros(B, dtype=np.int64)
    for i, ex in enumerate(examples):
        m = ex.scene.regions.shape[0]
        n = len(ex.question.tokens)
        regions[i, :m] = ex.scene.regions
        region_mask[i, :m] = 1.0
        toks = list(ex.question.tokens)
        if mask_positions[i] is not None:
            toks[mask_positions[i]] = MASK_ID
        tokens[i, :n] = toks
        token_mask[i, :n] = 1.0
        lengths[i] = n
    return regions, region_mask, tokens, token_mask, lengths


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------

def vqa_update(state: TrainState, dataset: Dataset,
               batch_ids: Sequence[int],
               labeled_set: frozenset[int]) -> float:
    """Supervised cross-entropy step on a labeled batch."""
    examples = [dataset.examples[i] for i in batch_ids]
    for i in batch_ids:
        if i not in labeled_set:
            state.counters["unlabeled_in_vqa"] += 1
            raise ValueError(f"unlabeled example {i} reached the VQA loss")
    regions, rmask, tokens, tmask, _ = collate(examples)
    batch = encode_batch(state.params, state.config.encoder,
                         regions, rmask, tokens, tmask)
    logits = answer_logits(state.params, batch.cls)
    loss = vqa_loss_batch(logits, [ex.question.answer for ex in examples])
    grads = gradients(loss.value, state.params)
    adam_step(state.adam, state.params, grads)
    state.counters["vqa_steps"] += 1
    state.counters["labeled_examples_seen"] += len(batch_ids)
    return loss.item()


def _mention_position(ex: Example, concept: int) -> int:
    for pos, c in ex.question.concept_mentions:
        if c == concept:
            return pos
    raise ValueError(f"example {ex.scene.scene_id} does not mention "
                     f"concept {concept}")


def contrastive_update(state: TrainState, dataset: Dataset,
                       ref_cache: ReferenceCache,
                       pool_ids: np.ndarray) -> dict[str, float] | None:
    """One combined step on the active separation objectives.

    Returns per-loss values, or None if no cached target could be found
    within the retry budget.
    """
    cfg = state.config
    rng = state.rng

    def sample_target():
        for _ in range(cfg.max_ref_retries):
            cand = int(rng.choice(pool_ids))
            if cand in ref_cache:
                return cand
        return None

    target_id = sample_target()
    if target_id is None:
        state.counters["skipped_targets"] += 1
        log.info("no cached reference target found; step skipped")
        return None
    entry = ref_cache.entries[target_id]
    target = dataset.examples[target_id]
    mention_pos = _mention_position(target, entry.concept)

    s_target_id = target_id
    if cfg.independent_targets and cfg.use_skill and (cfg.use_grounding
                                                      or cfg.use_mlm):
        drawn = sample_target()
        if drawn is not None:
            s_target_id = drawn
    s_entry = ref_cache.entries[s_target_id]
    s_target = dataset.examples[s_target_id]

    # assemble one forward batch: [masked target?, target, grounding refs,
    # skill refs], then slice the encoded outputs per objective
    examples: list[Example] = []
    mask_positions: list[int | None] = []

    need_masked = cfg.use_grounding or cfg.use_mlm
    idx_masked = idx_target = None
    g_ref_idx: list[int] = []
    s_ref_idx: list[int] = []
    g_ids: list[int] = []
    s_ids: list[int] = []

    if need_masked:
        idx_masked = len(examples)
        examples.append(target)
        mask_positions.append(mention_pos)
    if cfg.use_grounding:
        g_pos, g_negs = sample_reference_set(entry, "grounding", rng)
        g_ids = [g_pos] + g_negs
        for rid in g_ids:
            g_ref_idx.append(len(examples))
            examples.append(dataset.examples[rid])
            mask_positions.append(None)
    if cfg.use_skill:
        idx_target = len(examples)
        examples.append(s_target)
        mask_positions.append(None)
        s_pos, s_negs = sample_reference_set(s_entry, "skill", rng)
        s_ids = [s_pos] + s_negs
        for rid in s_ids:
            s_ref_idx.append(len(examples))
            examples.append(dataset.examples[rid])
            mask_positions.append(None)

    regions, rmask, tokens, tmask, lengths = collate(examples, mask_positions)
    batch = encode_batch(state.params, cfg.encoder, regions, rmask, tokens,
                         tmask)

    values: dict[str, float] = {}
    total = None

    if cfg.use_grounding:
        h_masked = batch.h[idx_masked, mention_pos, :]
        ref_slices = [batch.h[i, :int(lengths[i]), :] for i in g_ref_idx]
        ref_tokens = ad.concatenate(ref_slices, axis=0)
        flags = []
        pos_example = dataset.examples[g_ids[0]]
        pos_mention = _mention_position(pos_example, entry.concept)
        for j, i in enumerate(g_ref_idx):
            n = int(lengths[i])
            row = [False] * n
            if j == 0:
                row[pos_mention] = True
            flags.extend(row)
        lv = grounding_loss(state.params, h_masked, ref_tokens, flags,
                            stop_reference_grad=cfg.stop_reference_grad)
        values["grounding"] = lv.item()
        total = lv.value if total is None else ad.add(total, lv.value)

    if cfg.use_skill:
        summaries = summary_batch(batch)
        h_target = summaries[idx_target]
        ref_sums = summaries[np.array(s_ref_idx)]
        flags = [True] + [False] * (len(s_ref_idx) - 1)
        lv = skill_loss(state.params, h_target, ref_sums, flags,
                        tau_s=cfg.encoder.tau_s,
                        stop_reference_grad=cfg.stop_reference_grad)
        values["skill"] = lv.item()
        total = lv.value if total is None else ad.add(total, lv.value)

    if cfg.use_mlm:
        h_masked = batch.h[idx_masked, mention_pos, :]
        gold_token = target.question.tokens[mention_pos]
        lv = mlm_loss(state.params, h_masked, gold_token)
        values["mlm"] = lv.item()
        total = lv.value if total is None else ad.add(total, lv.value)

    if total is None:
        return None
    grads = gradients(total, state.params)
    adam_step(state.adam, state.params, grads)
    state.counters["contrastive_steps"] += 1
    return values


def train_step(state: TrainState, dataset: Dataset,
               batch_ids: Sequence[int], labeled_set: frozenset[int],
               ref_cache: ReferenceCache | None,
               pool_ids: np.ndarray) -> dict[str, float]:
    """One schedule step: the VQA update, plus (with probability p_sep) the
    separation update on a freshly sampled target."""
    out = {"vqa": vqa_update(state, dataset, batch_ids, labeled_set)}
    if state.rng.random() < state.config.p_sep:
        if ref_cache is None:
            raise ValueError("p_sep > 0 requires a reference cache")
        extra = contrastive_update(state, dataset, ref_cache, pool_ids)
        if extra:
            out.update(extra)
    state.step += 1
    return out


# --------------------------------------------------------------------------
# full loop
# --------------------------------------------------------------------------

def init_state(config: TrainConfig) -> TrainState:
    params = init_params(config.encoder, seed=derive_seed(config.seed, "init"))
    return TrainState(
        params=params,
        adam=AdamState(lr=config.lr),
        config=config,
        rng=np.random.default_rng(derive_seed(config.seed, "train")))


def train(config: TrainConfig, dataset: Dataset,
          labeled_ids: Sequence[int], pool_ids: Sequence[int],
          ref_cache: ReferenceCache | None = None,
          state: TrainState | None = None,
          log_path: str | Path | None = None,
          epoch_callback: Callable[[TrainState, int], None] | None = None,
          ) -> tuple[TrainState, list[dict]]:
    """Train for config.epochs over shuffled labeled batches.

    `pool_ids` is the labeled+unlabeled pool the contrastive targets are
    drawn from. Pass a checkpointed `state` to resume bit-identically.
    """
    if len(labeled_ids) == 0:
        raise ValueError("empty labeled split")
    if state is None:
        state = init_state(config)
    labeled_ids = np.asarray(labeled_ids, dtype=np.int64)
    pool_ids = np.asarray(pool_ids, dtype=np.int64)
    labeled_set = frozenset(int(i) for i in labeled_ids)
    history: list[dict] = []
    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        while state.epoch < config.epochs:
            if state.epoch in config.decay_epochs:
                state.adam.lr *= config.lr_decay
            order = state.rng.permutation(labeled_ids)
            epoch_losses: list[float] = []
            for start in range(0, len(order), config.batch_size):
                batch_ids = order[start:start + config.batch_size]
                step_vals = train_step(state, dataset, batch_ids, labeled_set,
                                       ref_cache, pool_ids)
                epoch_losses.append(step_vals["vqa"])
                if log_f is not None:
                    for kind, value in step_vals.items():
                        log_f.write(json.dumps(
                            {"step": state.step, "loss": kind,
                             "value": value}) + "\n")
            state.epoch += 1
            record = {"epoch": state.epoch,
                      "mean_vqa_loss": float(np.mean(epoch_losses)),
                      "lr": state.adam.lr,
                      **{k: v for k, v in state.counters.items()}}
            history.append(record)
            if epoch_callback is not None:
                epoch_callback(state, state.epoch)
    finally:
        if log_f is not None:
            log_f.close()
    return state, history


# --------------------------------------------------------------------------
# checkpointing (numcore binary format + JSON sidecar)
# --------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str | Path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        tensors[f"param/{name}"] = p.data
    for name, arr in state.adam.m.items():
        tensors[f"adam.m/{name}"] = arr
    for name, arr in state.adam.v.items():
        tensors[f"adam.v/{name}"] = arr
    save_tensors(path, tensors)
    sidecar = {
        "config": state.config.to_json(),
        "adam": {"lr": state.adam.lr, "beta1": state.adam.beta1,
                 "beta2": state.adam.beta2, "eps": state.adam.eps,
                 "step_count": state.adam.step_count},
        "epoch": state.epoch,
        "step": state.step,
        "counters": state.counters,
        "rng_state": state.rng.bit_generator.state,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_checkpoint(path: str | Path) -> TrainState:
    tensors = load_tensors(path)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise CheckpointError(f"missing checkpoint sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    config = TrainConfig.from_json(sidecar["config"])
    params = {name[len("param/"):]: Tensor(arr, requires_grad=True)
              for name, arr in tensors.items() if name.startswith("param/")}
    adam = AdamState(lr=sidecar["adam"]["lr"], beta1=sidecar["adam"]["beta1"],
                     beta2=sidecar["adam"]["beta2"], eps=sidecar["adam"]["eps"],
                     step_count=sidecar["adam"]["step_count"])
    for name, arr in tensors.items():
        if name.startswith("adam.m/"):
            adam.m[name[len("adam.m/"):]] = arr.copy()
        elif name.startswith("adam.v/"):
            adam.v[name[len("adam.v/"):]] = arr.copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = sidecar["rng_state"]
    return TrainState(params=params, adam=adam, config=config, rng=rng,
                      epoch=sidecar["epoch"], step=sidecar["step"],
                      counters=dict(sidecar["counters"]))
