"""Acceptance suite: one criterion per test, one PASS/FAIL line each.

Criteria 5-7 share a single ablation run (6 configs x 5 seeds) through a
session fixture; expect roughly an hour of CPU for the full suite. Run with
`pytest tests/test_acceptance.py -v -s` to see the per-criterion lines.
"""

import time

import numpy as np
import pytest

from scvqa import autodiff as ad
from scvqa import data, evaluation, mining, training
from scvqa.autodiff import Tensor, grad_check
from scvqa.data import DatasetConfig, build_dataset
from scvqa.encoder import (EncoderConfig, answer_logits, encode, init_params)
from scvqa.losses import (grounding_loss, mlm_loss, skill_loss, vqa_loss,
                          vqa_loss_batch)
from scvqa.training import desk_train_config, train

import test_mining as oracles


def report(criterion: int, description: str, ok: bool, detail: str = ""):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {description}"
    if detail:
        line += f" ({detail})"
    print("\n" + line, flush=True)
    assert ok, line


# --------------------------------------------------------------------------
# shared corpora
# --------------------------------------------------------------------------

@pytest.fixture(scope="session")
def default_corpus():
    ds = build_dataset(DatasetConfig(n_questions=20000, seed=0))
    split = evaluation.build_novel_splits(ds, seed=0)
    stripped = evaluation.apply_split(ds, split)
    return ds, split, stripped


@pytest.fixture(scope="session")
def ablation(default_corpus):
    """The 6-config x 5-seed ablation shared by criteria 5, 6, and 7."""
    ds, split, stripped = default_corpus
    t0 = time.time()
    cache_ccc = mining.mine_reference_cache(stripped, seed=0)
    cache_random = mining.mine_reference_cache(stripped, seed=0, mode="random")
    result = evaluation.run_ablation(
        ds, split, seeds=[0, 1, 2, 3, 4], template=desk_train_config(),
        cache_ccc=cache_ccc, cache_random=cache_random, log_progress=True)
    return result, time.time() - t0


def macro(result, name):
    """Mean over seeds of the per-run mean novel-slice accuracy."""
    per_run = [np.mean(list(r.slice_accuracy.values()))
               for r in result.runs if r.config_name == name]
    return float(np.mean(per_run))


# --------------------------------------------------------------------------
# criterion 1: gradient correctness
# --------------------------------------------------------------------------

OP_CASES = [
    ("add", lambda x, y: ad.add(x, y)),
    ("mul", lambda x, y: ad.mul(x, y)),
    ("div", lambda x, y: ad.div(x, ad.add(ad.mul(y, y), 0.5))),
    ("power", lambda x, y: ad.power(ad.add(ad.mul(x, x), 1.0), 1.7)),
    ("sqrt", lambda x, y: ad.sqrt(ad.add(ad.mul(x, x), 1.0))),
    ("matmul", lambda x, y: ad.matmul(x, ad.transpose(y))),
    ("relu", lambda x, y: ad.relu(x)),
    ("exp", lambda x, y: ad.exp(x)),
    ("log", lambda x, y: ad.log(ad.add(ad.mul(x, x), 1.0))),
    ("tanh", lambda x, y: ad.tanh(x)),
    ("sigmoid", lambda x, y: ad.sigmoid(x)),
    ("softmax", lambda x, y: ad.mul(ad.softmax(x, axis=-1), y)),
    ("log_softmax", lambda x, y: ad.mul(ad.log_softmax(x, axis=-1), y)),
    ("layernorm", lambda x, y: ad.layernorm(x)),
    ("take", lambda x, y: take_case(x)),
    ("concatenate", lambda x, y: ad.concatenate([x, y], axis=0)),
    ("stack", lambda x, y: ad.stack([x, y], axis=1)),
    ("reshape", lambda x, y: ad.reshape(x, (12,))),
    ("transpose", lambda x, y: ad.transpose(x)),
    ("swapaxes", lambda x, y: ad.swapaxes(x, 0, 1)),
    ("reduce_mean", lambda x, y: ad.reduce_mean(x, axis=0, keepdims=True)),
    ("broadcast add", lambda x, y: ad.add(x, ad.reduce_sum(y, axis=0,
                                                           keepdims=True))),
]


def take_case(x):
    return ad.take(x, np.array([0, 2, 2, 1]))


def _loss_closures(rng):
    """The four training losses as zero-argument closures over parameters."""
    d = 8
    enc = EncoderConfig(d=d, n_layers=1, n_heads=2, d_v=48)
    p = init_params(enc, seed=int(rng.integers(1 << 30)))
    h = Tensor(rng.standard_normal(d), requires_grad=True)
    refs = Tensor(rng.standard_normal((4, d)), requires_grad=True)
    flags = [False, True, False, False]
    logits = Tensor(rng.standard_normal((3, enc.answer_size)),
                    requires_grad=True)
    gold = [int(g) for g in rng.integers(enc.answer_size, size=3)]
    shared = {"h": h, "refs": refs, "ground_w": p["ground_w"],
              "skill_w1": p["skill_w1"], "skill_w2": p["skill_w2"],
              "mlm_w": p["mlm_w"]}
    return [
        ("vqa", lambda: vqa_loss_batch(logits, gold).value, {"logits": logits}),
        ("grounding", lambda: grounding_loss(p, h, refs, flags).value, shared),
        ("skill", lambda: skill_loss(p, h, refs, flags).value, shared),
        ("mlm", lambda: mlm_loss(p, h, 3).value, {"h": h, "mlm_w": p["mlm_w"]}),
    ]


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    enc = EncoderConfig(d=8, n_layers=1, n_heads=2, d_v=48)
    words = [0, 1, 2, 3, 4]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        y = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        for name, fn in OP_CASES:
            def closure():
                return ad.reshape(ad.reduce_sum(ad.mul(fn(x, y), 1.0)), (1,))
            rep = grad_check(closure, {"x": x, "y": y}, max_entries=3,
                             rng=np.random.default_rng(seed))
            assert rep.passed, f"op {name} seed {seed}: {rep.worst}"
            worst = max(worst, rep.max_rel_error)
        # full encoder through the answer head
        p = init_params(enc, seed=seed)
        regions = rng.standard_normal((3, enc.d_v))

        def enc_loss():
            e = encode(p, enc, regions, words)
            lg = answer_logits(p, e.cls)
            return ad.reshape(-ad.log_softmax(lg, axis=-1)[2], (1,))

        rep = grad_check(enc_loss, p, max_entries=2,
                         rng=np.random.default_rng(seed))
        assert rep.passed, f"encoder seed {seed}: {rep.worst}"
        worst = max(worst, rep.max_rel_error)
        for name, closure, params in _loss_closures(rng):
            rep = grad_check(closure, params, max_entries=2,
                             rng=np.random.default_rng(seed))
            assert rep.passed, f"loss {name} seed {seed}: {rep.worst}"
            worst = max(worst, rep.max_rel_error)
    elapsed = time.time() - t0
    report(1, "finite-difference gradient checks, 100 seeds",
           worst < 1e-4 and elapsed < 300,
           f"max rel error {worst:.2e}, {elapsed:.0f}s")


# --------------------------------------------------------------------------
# criterion 2: loss identities
# --------------------------------------------------------------------------

def test_criterion_2_loss_identities():
    d = 8
    enc = EncoderConfig(d=d, n_layers=1, n_heads=2, d_v=48)
    rng = np.random.default_rng(0)
    ok = True

    # uniform grounding: collapsed head makes every similarity equal
    p = init_params(enc, seed=0)
    p["ground_w"].data[:] = 0.0
    p["ground_b"].data[:] = 1.0
    for T in (4, 9):
        flags = [False] * T
        flags[2] = True
        lv = grounding_loss(p, Tensor(rng.standard_normal(d)),
                            Tensor(rng.standard_normal((T, d))), flags)
        ok &= abs(lv.item() - np.log(T)) < 1e-9

    # uniform skill: identical references share one cosine
    for L in (3, 7):
        row = rng.standard_normal(d)
        lv = skill_loss(p, Tensor(rng.standard_normal(d)),
                        Tensor(np.tile(row, (L, 1))), [True] + [False] * (L - 1))
        ok &= abs(lv.item() - np.log(L)) < 1e-9

    # hand-computed 3-reference oracles with identity heads
    p["ground_w"].data[:] = np.eye(d)
    p["ground_b"].data[:] = 0.0
    h = np.zeros(d); h[0] = 1.0
    refs = np.zeros((3, d))
    refs[0, 0], refs[1, 0], refs[2, 1] = 2.0, -1.0, 5.0
    sims = np.array([2.0, -1.0, 0.0]) / np.sqrt(d)
    want_g = -np.log(np.exp(sims[0]) / np.exp(sims).sum())
    got_g = grounding_loss(p, Tensor(h), Tensor(refs),
                           [True, False, False]).item()
    ok &= abs(got_g - want_g) < 1e-9

    for name in ("skill_w1", "skill_w2"):
        p[name].data[:] = np.eye(d)
    p["skill_b1"].data[:] = 0.0
    p["skill_b2"].data[:] = 0.0
    refs = np.zeros((3, d))
    refs[0, 0] = 3.0
    refs[1, 0] = refs[1, 1] = 1.0
    refs[2, 1] = 1.0
    sims = np.array([1.0, 1 / np.sqrt(2), 0.0]) / 0.5
    want_s = -np.log(np.exp(sims[0]) / np.exp(sims).sum())
    got_s = skill_loss(p, Tensor(h), Tensor(refs), [True, False, False],
                       tau_s=0.5).item()
    ok &= abs(got_s - want_s) < 1e-9
    report(2, "uniform-similarity and 3-reference loss identities", ok,
           f"grounding err {abs(got_g - want_g):.1e}, "
           f"skill err {abs(got_s - want_s):.1e}")


# --------------------------------------------------------------------------
# criterion 3: mining oracle equivalence and pool invariants
# --------------------------------------------------------------------------

def test_criterion_3_mining_oracles(default_corpus):
    checked = 0
    for corpus_seed in (13, 47):
        ds = build_dataset(DatasetConfig(n_questions=50, seed=corpus_seed))
        ctx = mining.MiningContext(ds, seed=corpus_seed)
        rng = np.random.default_rng(corpus_seed)
        targets = rng.choice(50, size=25, replace=False)
        for tid in targets:
            tid = int(tid)
            got = mining.build_grounding_candidates(ctx, tid, n_pos=5, n_neg=6)
            want = oracles.brute_force_grounding(ds, corpus_seed, tid,
                                                 n_pos=5, n_neg=6)
            if got is None:
                assert want[0] == []
            else:
                assert (got.positives, got.negatives_text,
                        got.negatives_visual) == want
            s = mining.build_skill_candidates(ctx, tid, n_pos=8, n_neg=10)
            assert s.positives == oracles.brute_force_skill_positives(
                ds, corpus_seed, tid, 8)
            checked += 2

    # pool invariants on 1000 targets of the default corpus
    ds, _, _ = default_corpus
    ctx = mining.MiningContext(ds, seed=0)
    rng = np.random.default_rng(0)
    n_checked = 0
    for tid in rng.choice(len(ds.examples), size=1000, replace=False):
        tid = int(tid)
        g = mining.build_grounding_candidates(ctx, tid)
        if g is None:
            continue
        t_concepts = {c for _, c in ds.examples[tid].question.concept_mentions}
        for i in g.positives:
            mentions = {c for _, c in ds.examples[i].question.concept_mentions}
            assert g.concept in mentions
            assert mining.presence_filter(ds.examples[i].question.skill,
                                          ds.examples[i].question.answer)
        for i in g.negatives_text + g.negatives_visual:
            mentions = {c for _, c in ds.examples[i].question.concept_mentions}
            assert not (mentions & t_concepts)
        cq = ctx.cos_q_ground(tid)
        cv = ctx.cos_v(tid)
        pool = [int(i) for i in ctx.pos_pool[g.concept] if i != tid]
        scores = {i: mining.BETA_POSITIVE * cq[i]
                  + (1 - mining.BETA_POSITIVE) * cv[i] for i in pool}
        worst_in = max(scores[i] for i in g.positives)
        best_out = min((scores[i] for i in pool if i not in g.positives),
                       default=np.inf)
        assert worst_in <= best_out + 0.5 * 10 ** -mining.SCORE_DECIMALS
        n_checked += 1
    report(3, "mining matches brute-force oracles; pool invariants hold",
           checked == 100 and n_checked > 900,
           f"{checked} oracle instances, {n_checked} invariant targets")


# --------------------------------------------------------------------------
# criterion 4: split integrity
# --------------------------------------------------------------------------

def test_criterion_4_split_integrity(default_corpus):
    ds, split, stripped = default_corpus
    leaks = sum(1 for i in split.labeled_ids
                for spec in split.slices if spec.matches(ds.examples[i]))
    groups = [split.labeled_ids, split.unlabeled_ids, split.test_ids]
    exact = sorted(i for g in groups for i in g) == list(range(len(ds)))
    disjoint = all(not set(groups[a]) & set(groups[b])
                   for a in range(3) for b in range(a + 1, 3))
    stripped_ok = all(stripped.examples[i].question.answer is None
                      for i in split.unlabeled_ids + split.test_ids)
    report(4, "zero labeled leakage; exact labeled/unlabeled/test partition",
           leaks == 0 and exact and disjoint and stripped_ok,
           f"{leaks} leaks over {len(split.labeled_ids)} labeled questions")


# --------------------------------------------------------------------------
# criteria 5-7: directional reproduction on the desk benchmark
# --------------------------------------------------------------------------

def test_criterion_5_full_beats_base(ablation):
    result, elapsed = ablation
    gap = macro(result, "full") - macro(result, "base")
    slices = result.runs[0].slice_accuracy.keys()
    wins = sum(
        np.mean(result.slice_accuracies("full", s))
        >= np.mean(result.slice_accuracies("base", s)) for s in slices)
    report(5, "full framework vs base on novel slices (5 seeds)",
           gap >= 2.0 and wins >= 5 and elapsed <= 90 * 60,
           f"gap {gap:+.2f} pts, {wins}/6 slices, {elapsed / 60:.0f} min")


def test_criterion_6_loss_ablation_ordering(ablation):
    result, _ = ablation
    base = macro(result, "base")
    ground = macro(result, "base+ground")
    skill = macro(result, "base+skill")
    full = macro(result, "full")
    ok = (full > ground and ground >= base - 0.3
          and full > skill and skill >= base - 0.3)
    report(6, "ablation ordering full > single-loss variants >= base", ok,
           f"full {full:.2f}, +ground {ground:.2f}, +skill {skill:.2f}, "
           f"base {base:.2f}")


def test_criterion_7_grounding_and_reference_quality(ablation):
    result, _ = ablation
    rec_gap = (np.mean(result.recalls("full"))
               - np.mean(result.recalls("base")))
    concept_slices = [s for s in result.runs[0].slice_accuracy
                      if s.startswith("concept/")]
    ccc = np.mean([np.mean(result.slice_accuracies("full", s))
                   for s in concept_slices])
    rand = np.mean([np.mean(result.slice_accuracies("full-random-refs", s))
                    for s in concept_slices])
    report(7, "recall@5 gap >= 5 and mined refs beat random refs",
           rec_gap >= 5.0 and ccc > rand,
           f"recall gap {rec_gap:+.2f}, novel-concept acc {ccc:.2f} vs "
           f"{rand:.2f}")


# --------------------------------------------------------------------------
# criterion 8: byte-identical artifacts
# --------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    ok = True
    detail = []
    cfg = DatasetConfig(n_questions=640, seed=7)
    ds_paths, cache_paths, ckpt_paths, report_paths = [], [], [], []
    for tag in ("a", "b"):
        ds = build_dataset(cfg)
        p = tmp_path / f"ds_{tag}.jsonl"
        data.write_jsonl(ds, p)
        ds_paths.append(p)
        cache = mining.mine_reference_cache(ds, seed=7, n_pos=5, n_neg=6,
                                            n_skill_pos=20, n_skill_neg=20)
        cp = tmp_path / f"cache_{tag}.jsonl"
        cache.write_jsonl(cp)
        cache_paths.append(cp)
        split = evaluation.build_novel_splits(ds, seed=7, min_train=5,
                                              min_test=2)
        tc = desk_train_config(epochs=1, batch_size=32, p_sep=0.5, seed=7)
        stripped = evaluation.apply_split(ds, split)
        pool = split.labeled_ids + split.unlabeled_ids
        state, _ = train(tc, stripped, split.labeled_ids, pool, cache)
        kp = tmp_path / f"ckpt_{tag}.bin"
        training.save_checkpoint(state, kp)
        ckpt_paths.append(kp)
        gold = evaluation.gold_answers(ds, split.test_ids)
        run = evaluation.evaluate_run(state, ds, split, gold, "full", 7)
        rp = tmp_path / f"report_{tag}.json"
        res = evaluation.AblationResult(runs=[run])
        res.write_json(rp)
        report_paths.append(rp)
    for label, (pa, pb) in zip(("dataset", "cache", "checkpoint", "report"),
                               (ds_paths, cache_paths, ckpt_paths,
                                report_paths)):
        same = pa.read_bytes() == pb.read_bytes()
        ok &= same
        detail.append(f"{label} {'==' if same else '!='}")
    report(8, "byte-identical dataset, cache, checkpoint, report",
           ok, ", ".join(detail))
