"""Multi-modal transformer encoder.

Input sequence: [CLS, region features, question tokens]. Question tokens are
pre-encoded with a bi-directional LSTM (instead of positional embeddings) and
under the restricted attention mask they attend only to question tokens and
the CLS token, while CLS and regions attend to everything. The CLS token is
the bottleneck through which text reaches vision and feeds the answer head.

Forward passes are batched over padded examples; the single-example API wraps
a batch of one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ANSWERS, MASK_ID, PAD_ID, VOCAB

NEG_BIG = -1e9


@dataclass
class EncoderConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = len(VOCAB)
    answer_size: int = len(ANSWERS)
    d_v: int = 48
    tau_s: float = 0.5
    ffn_mult: int = 4
    # plural reading of the restricted mask: question tokens attend to all
    # question tokens plus CLS. False restricts each token to itself + CLS.
    tokens_attend_each_other: bool = True

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ValueError("hidden size must be divisible by head count")
        if self.d % 2 != 0:
            raise ValueError("hidden size must be even (BiLSTM halves)")
        if self.tau_s <= 0:
            raise ValueError("tau_s must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderConfig":
        return cls(**obj)


def paper_config() -> EncoderConfig:
    return EncoderConfig(d=512, n_layers=6, n_heads=8)


def desk_config() -> EncoderConfig:
    return EncoderConfig(d=64, n_layers=2, n_heads=4)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def init_params(config: EncoderConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    d, dh = config.d, config.d // 2
    bound = 1.0 / np.sqrt(d)

    def w(*shape):
        return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    # the embedding table starts at zero, like the biases: a token only
    # acquires a nonzero row once some objective actually trains it, so a
    # word never seen during training behaves as a neutral unknown instead
    # of a random vector that steers the answer head arbitrarily
    p: dict[str, Tensor] = {
        "tok_emb": zeros(config.vocab_size, d),
        "cls": w(d),
        "region_w": w(config.d_v, d),
        "region_b": zeros(d),
        "ans_w": w(d, config.answer_size),
        "ans_b": zeros(config.answer_size),
        "ground_w": w(d, d),
        "ground_b": zeros(d),
        "skill_w1": w(d, d),
        "skill_b1": zeros(d),
        "skill_w2": w(d, d),
        "skill_b2": zeros(d),
        "mlm_w": w(d, config.vocab_size),
        "mlm_b": zeros(config.vocab_size),
    }
    for direction in ("fw", "bw"):
        p[f"lstm_{direction}_wx"] = w(d, 4 * dh)
        p[f"lstm_{direction}_wh"] = w(dh, 4 * dh)
        p[f"lstm_{direction}_b"] = zeros(4 * dh)
    for i in range(config.n_layers):
        for name in ("wq", "wk", "wv", "wo"):
            p[f"l{i}_attn_{name}"] = w(d, d)
            p[f"l{i}_attn_{name[1]}b"] = zeros(d)
        p[f"l{i}_ln1_g"] = ones(d)
        p[f"l{i}_ln1_b"] = zeros(d)
        p[f"l{i}_ffn_w1"] = w(d, config.ffn_mult * d)
        p[f"l{i}_ffn_b1"] = zeros(config.ffn_mult * d)
        p[f"l{i}_ffn_w2"] = w(config.ffn_mult * d, d)
        p[f"l{i}_ffn_b2"] = zeros(d)
        p[f"l{i}_ln2_g"] = ones(d)
        p[f"l{i}_ln2_b"] = zeros(d)
    return p


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------

@dataclass
class EncodedBatch:
    cls: Tensor        # (B, d)
    z: Tensor          # (B, M, d)
    h: Tensor          # (B, N, d)
    region_mask: np.ndarray
    token_mask: np.ndarray


@dataclass
class EncodedExample:
    cls: Tensor        # (d,)
    z: Tensor          # (M, d)
    h: Tensor          # (N, d)


def _bilstm(params: dict[str, Tensor], x: Tensor,
            token_mask: np.ndarray, dh: int) -> Tensor:
    """Bi-directional LSTM over axis 1; padded steps carry state through."""
    B, N, _ = x.shape

    def run(direction: str, steps: Sequence[int]) -> list[Tensor]:
        wx = params[f"lstm_{direction}_wx"]
        wh = params[f"lstm_{direction}_wh"]
        b = params[f"lstm_{direction}_b"]
        h = Tensor(np.zeros((B, dh)))
        c = Tensor(np.zeros((B, dh)))
        outs: dict[int, Tensor] = {}
        for t in steps:
            xt = x[:, t, :]
            gates = ad.add(ad.add(ad.matmul(xt, wx), ad.matmul(h, wh)), b)
            i = ad.sigmoid(gates[:, 0 * dh:1 * dh])
            f = ad.sigmoid(gates[:, 1 * dh:2 * dh])
            g = ad.tanh(gates[:, 2 * dh:3 * dh])
            o = ad.sigmoid(gates[:, 3 * dh:4 * dh])
            c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
            h_new = ad.mul(o, ad.tanh(c_new))
            m = token_mask[:, t:t + 1]
            c = ad.add(ad.mul(c_new, m), ad.mul(c, 1.0 - m))
            h = ad.add(ad.mul(h_new, m), ad.mul(h, 1.0 - m))
            outs[t] = h
        return [outs[t] for t in range(N)]

    fw = run("fw", list(range(N)))
    bw = run("bw", list(range(N - 1, -1, -1)))
    return ad.concatenate([ad.stack(fw, axis=1), ad.stack(bw, axis=1)],
                          axis=2)   # (B, N, 2*dh)


def _attention_bias(config: EncoderConfig, region_mask: np.ndarray,
                    token_mask: np.ndarray) -> np.ndarray:
    """(B, 1, L, L) additive mask. Sequence order: [CLS | regions | tokens]."""
    B, M = region_mask.shape
    N = token_mask.shape[1]
    L = 1 + M + N
    allowed = np.zeros((B, L, L), dtype=bool)
    valid = np.concatenate([np.ones((B, 1), dtype=bool),
                            region_mask.astype(bool),
                            token_mask.astype(bool)], axis=1)
    # CLS and regions: attend to every valid position
    allowed[:, 0, :] = valid
    allowed[:, 1:1 + M, :] = valid[:, None, :]
    # question tokens: CLS plus question positions
    tok_rows = np.zeros((B, L), dtype=bool)
    tok_rows[:, 0] = True
    if config.tokens_attend_each_other:
        tok_rows[:, 1 + M:] = token_mask.astype(bool)
        allowed[:, 1 + M:, :] = tok_rows[:, None, :]
    else:
        allowed[:, 1 + M:, :] = tok_rows[:, None, :]
        idx = np.arange(N)
        allowed[:, 1 + M + idx, 1 + M + idx] = True
    # padded rows attend CLS so softmax stays finite; outputs are masked out
    allowed[:, :, 0] = True
    bias = np.where(allowed, 0.0, NEG_BIG)
    return bias[:, None, :, :]


def _mha(params: dict[str, Tensor], config: EncoderConfig, x: Tensor,
         bias: np.ndarray, layer: int) -> Tensor:
    B, L, d = x.shape
    H = config.n_heads
    dh = d // H

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

    q = heads(ad.add(ad.matmul(x, params[f"l{layer}_attn_wq"]),
                     params[f"l{layer}_attn_qb"]))
    k = heads(ad.add(ad.matmul(x, params[f"l{layer}_attn_wk"]),
                     params[f"l{layer}_attn_kb"]))
    v = heads(ad.add(ad.matmul(x, params[f"l{layer}_attn_wv"]),
                     params[f"l{layer}_attn_vb"]))
    scores = ad.add(ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)),
                           1.0 / np.sqrt(dh)), bias)
    attn = ad.softmax(scores, axis=-1)
    ctxt = ad.matmul(attn, v)                       # (B, H, L, dh)
    merged = ad.reshape(ad.transpose(ctxt, (0, 2, 1, 3)), (B, L, d))
    return ad.add(ad.matmul(merged, params[f"l{layer}_attn_wo"]),
                  params[f"l{layer}_attn_ob"])


def _layernorm_affine(params, x: Tensor, g_name: str, b_name: str) -> Tensor:
    return ad.add(ad.mul(ad.layernorm(x), params[g_name]), params[b_name])


def encode_batch(params: dict[str, Tensor], config: EncoderConfig,
                 regions: np.ndarray, region_mask: np.ndarray,
                 tokens: np.ndarray, token_mask: np.ndarray) -> EncodedBatch:
    """Forward pass over a padded batch.

    regions (B, M, d_v) float; tokens (B, N) int ids (PAD at padding);
    masks are 1.0 at valid positions.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError("empty question")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token id out of vocabulary "
                         f"(max {config.vocab_size - 1})")
    if regions.shape[1] < 1:
        raise ValueError("need at least one region")
    B, M = region_mask.shape
    N = token_mask.shape[1]
    d = config.d

    tok_emb = params["tok_emb"][tokens]             # (B, N, d)
    tok_h = _bilstm(params, tok_emb, np.asarray(token_mask, dtype=np.float64),
                    d // 2)
    reg_h = ad.add(ad.matmul(Tensor(regions), params["region_w"]),
                   params["region_b"])              # (B, M, d)
    cls = ad.add(ad.reshape(params["cls"], (1, 1, d)),
                 Tensor(np.zeros((B, 1, d))))       # broadcast to batch
    x = ad.concatenate([cls, reg_h, tok_h], axis=1)

    bias = _attention_bias(config, region_mask, token_mask)
    for layer in range(config.n_layers):
        x = _layernorm_affine(params, ad.add(x, _mha(params, config, x, bias,
                                                     layer)),
                              f"l{layer}_ln1_g", f"l{layer}_ln1_b")
        ff = ad.matmul(ad.relu(ad.add(ad.matmul(x, params[f"l{layer}_ffn_w1"]),
                                      params[f"l{layer}_ffn_b1"])),
                       params[f"l{layer}_ffn_w2"])
        ff = ad.add(ff, params[f"l{layer}_ffn_b2"])
        x = _layernorm_affine(params, ad.add(x, ff),
                              f"l{layer}_ln2_g", f"l{layer}_ln2_b")

    return EncodedBatch(cls=x[:, 0, :], z=x[:, 1:1 + M, :],
                        h=x[:, 1 + M:, :],
                        region_mask=np.asarray(region_mask, dtype=np.float64),
                        token_mask=np.asarray(token_mask, dtype=np.float64))


def encode(params: dict[str, Tensor], config: EncoderConfig,
           regions: np.ndarray, tokens: Sequence[int],
           mask_position: int | None = None) -> EncodedExample:
    """Single-example forward; optionally MASK the token at `mask_position`."""
    toks = list(tokens)
    if mask_position is not None:
        toks[mask_position] = MASK_ID
    regions = np.asarray(regions, dtype=np.float64)
    batch = encode_batch(
        params, config,
        regions[None, :, :], np.ones((1, regions.shape[0])),
        np.array([toks]), np.ones((1, len(toks))))
    return EncodedExample(cls=batch.cls[0], z=batch.z[0], h=batch.h[0])


# --------------------------------------------------------------------------
# heads
# --------------------------------------------------------------------------

def summary(encoded: EncodedExample) -> Tensor:
    """Mean pooling over question-token representations."""
    if encoded.h.shape[0] == 0:
        raise ValueError("empty question representation")
    return encoded.h.mean(axis=0)


def summary_batch(batch: EncodedBatch) -> Tensor:
    mask = batch.token_mask[:, :, None]
    total = ad.reduce_sum(ad.mul(batch.h, mask), axis=1)
    counts = batch.token_mask.sum(axis=1, keepdims=True)
    return ad.mul(total, 1.0 / counts)


def project_ground(params: dict[str, Tensor], x: Tensor) -> Tensor:
    """Linear grounding head: W_g x + b_g (applied to last axis)."""
    return ad.add(ad.matmul(x, params["ground_w"]), params["ground_b"])


def project_skill(params: dict[str, Tensor], x: Tensor) -> Tensor:
    """Two-layer skill head with ReLU nonlinearity."""
    hidden = ad.relu(ad.add(ad.matmul(x, params["skill_w1"]),
                            params["skill_b1"]))
    return ad.add(ad.matmul(hidden, params["skill_w2"]), params["skill_b2"])


def answer_logits(params: dict[str, Tensor], cls: Tensor) -> Tensor:
    """Affine map from CLS representation to answer-vocabulary logits."""
    return ad.add(ad.matmul(cls, params["ans_w"]), params["ans_b"])


def save_config(config: EncoderConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_json(), sort_keys=True))


def load_config(path: str | Path) -> EncoderConfig:
    return EncoderConfig.from_json(json.loads(Path(path).read_text()))
