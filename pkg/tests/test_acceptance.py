"""Acceptance criteria 1-10.

Each test records one line (criterion, PASS/FAIL, measured values, runtime)
before asserting; conftest prints the collected lines at the end of the run.
Criteria 4 and 5 share the seed chains built by ``_chain``, so running the
file as a whole costs roughly 14 minutes on one core.
"""

import functools
import itertools
import statistics
import time

import numpy as np
import pytest

from vlmatch import encoders as E
from vlmatch import finetune as F
from vlmatch import harness as H
from vlmatch import index as ix
from vlmatch import metrics as M
from vlmatch import pipeline as PL
from vlmatch import pretrain as P
from vlmatch import synthdata as S
from vlmatch import tensor as T
from vlmatch import trainer as TR
from vlmatch.cli import main
from vlmatch.tensor import Tensor

from conftest import SMALL, artifact_bytes, cli_chain, jittered

pytestmark = pytest.mark.slow

RESULTS = {}

NAMES = {
    1: "gradient fidelity",
    2: "closed-form losses",
    3: "training sanity",
    4: "relevance model",
    5: "ablation direction",
    6: "ANN quality",
    7: "pipeline equivalence",
    8: "metric oracles",
    9: "freeze/isolation",
    10: "reproducibility",
}


def record(n, ok, detail, secs):
    RESULTS[n] = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {NAMES[n]}: {detail}  [{secs:.1f}s]"
    assert ok, RESULTS[n]


# -- 1 ------------------------------------------------------------------------------------

# at width 2 a small-eps layer norm is a sign function; eps=1 keeps it smooth enough to difference
GC_CFG = E.EncoderConfig(dim=2, layers=1, heads=1, vocab_size=5, max_text_len=2, patch_grid=1, patch_dim=2,
                         proj_dim=2, mlp_ratio=1, ln_eps=1.0)
DUAL = ["vision", "text", "projection_vision", "projection_text"]


def test_1_gradient_fidelity():
    t0 = time.perf_counter()
    cfg = GC_CFG
    p = E.init_params(cfg, np.random.default_rng(0))
    r = np.random.default_rng(1)
    for _, t in p.named():
        t.data = t.data + r.normal(0.0, 1.0, t.shape)
    tok = np.array([[3, 4], [4, 0], [3, 3]])
    pat = r.normal(size=(3, 1, 2))
    mom = E.MomentumState.from_online(p.copy())
    for g in mom.shadow.groups:
        for t in mom.shadow[g].values():
            t.data = t.data + r.normal(0.0, 0.2, t.shape)
    queue = P.NegativeQueue.random(4, 2, np.random.default_rng(5))
    batch = P.PretrainBatch(np.arange(3), (tok, tok[[1, 2, 0]]), (pat, pat + 0.1),
                            np.array([[2, 4], [4, 0], [3, 2]]), np.array([[3, -1], [-1, -1], [-1, 3]]))
    tp = np.array([0.2, 0.7, 0.9])

    def itc():
        enc = P.encode_views(batch, p, cfg)
        return P.itc_multiview(batch, enc, P.momentum_features(batch, mom, cfg), queue, 0.5)[0]

    def mlm():
        return P.mlm_loss(batch, P.encode_views(batch, p, cfg).img_seq, p, cfg)[0]

    def itm():
        return P.itm_loss(P.encode_views(batch, p, cfg), np.array([1, 2, 0]), np.array([2, 0, 1]), p, cfg)

    def rel():
        logits = F.relevance_logits_from_emb(E.embed_text(tok, p, cfg), E.embed_image(pat, p, cfg),
                                             p["relevance_head"])
        return F.relevance_loss(logits, [0, 1, 2])

    def click():
        return F.click_contrastive_loss(E.embed_text(tok, p, cfg), E.embed_image(pat, p, cfg), 0.07)

    def kd():
        return F.kd_loss(T.sum(T.mul(E.embed_text(tok, p, cfg), E.embed_image(pat, p, cfg)), axis=1), tp)

    def mt():
        return F.multitask_loss(E.embed_text(tok, p, cfg), E.embed_image(pat, p, cfg), tp, 0.07, 1.0)[0]

    # the cross-attention losses need 215/221 parameters even at the smallest width, so they are
    # checked twice: on a <=200 subset with vision held constant, and on everything they touch
    cases = [
        ("itc", itc, DUAL), ("mlm", mlm, ["text", "fusion"]), ("mlm_full", mlm, ["vision", "text", "fusion"]),
        ("itm", itm, ["text", "fusion", "itm_head"]), ("itm_full", itm, ["vision", "text", "fusion", "itm_head"]),
        ("rel", rel, DUAL + ["relevance_head"]), ("click", click, DUAL), ("kd", kd, DUAL), ("multitask", mt, DUAL),
    ]
    errs, sizes = {}, {}
    for name, fn, groups in cases:
        ts = [p[g][n] for g in groups for n in sorted(p[g])]
        sizes[name] = sum(t.size for t in ts)
        errs[name] = T.gradient_check(fn, ts)
    secs = time.perf_counter() - t0
    small = all(v <= 200 for k, v in sizes.items() if not k.endswith("_full"))
    ok = max(errs.values()) < 1e-5 and small and secs < 60
    detail = ", ".join(f"{k}={errs[k]:.1e}/{sizes[k]}p" for k, _, _ in cases)
    record(1, ok, f"max rel err {max(errs.values()):.1e} (<1e-5); {detail}", secs)


# -- 2 ------------------------------------------------------------------------------------

def test_2_closed_forms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    a = rng.normal(size=6)
    a /= np.linalg.norm(a)
    # every key at cosine 0.3 to the anchor
    def at_cos(c):
        v = rng.normal(size=6)
        v -= (v @ a) * a
        return c * a + np.sqrt(1 - c * c) * v / np.linalg.norm(v)
    n = 7
    nce = P.info_nce(a, at_cos(0.3), np.array([at_cos(0.3) for _ in range(n)]), 0.07).item()
    ce = F.relevance_loss(Tensor(np.zeros((5, 2))), [0, 1, 2, 1, 0]).item()
    cos = np.array([0.4, -0.2, 0.9])
    kd = F.kd_loss(cos, (cos + 1) / 2).item()
    online = E.init_params(E.EncoderConfig(dim=2, layers=1, heads=1, vocab_size=5, max_text_len=2, patch_grid=1,
                                           patch_dim=2, proj_dim=2, mlp_ratio=1), np.random.default_rng(0))
    state = E.MomentumState.from_online(online)
    for g in E.MOMENTUM_GROUPS:
        for name in online[g]:
            online[g][name].data = np.ones_like(online[g][name].data)
            state.shadow[g][name].data = np.zeros_like(online[g][name].data)
    for _ in range(3):
        E.momentum_update(online, state, 0.99)
    ema = np.concatenate([t.data.ravel() for g in E.MOMENTUM_GROUPS for t in state.shadow[g].values()])
    errs = {"infonce": abs(nce - np.log(n + 1)), "ce": abs(ce - np.log(2)), "kd": abs(kd),
            "ema": float(np.abs(ema - 0.029701).max())}
    ok = errs["infonce"] < 1e-9 and errs["ce"] < 1e-12 and errs["kd"] == 0.0 and errs["ema"] < 1e-12
    record(2, ok, ", ".join(f"{k} err {v:.1e}" for k, v in errs.items()), time.perf_counter() - t0)


# -- 3 ------------------------------------------------------------------------------------

def test_3_training_sanity():
    t0 = time.perf_counter()
    corpus = S.generate_corpus(S.GenConfig())
    runs = [TR.run_pretrain(TR.TrainConfig(steps=300), corpus) for _ in range(2)]
    totals = [[row["losses"]["total"] for row in r.log] for r in runs]
    s = TR.smoothed(totals[0])
    drop = 1 - s[-1] / s[0]
    same = totals[0] == totals[1] and all(
        np.array_equal(a.data, b.data) for (_, a), (_, b) in zip(runs[0].params.named(), runs[1].params.named()))
    secs = time.perf_counter() - t0
    record(3, drop >= 0.30 and same and secs < 300,
           f"smoothed loss {s[0]:.3f} -> {s[-1]:.3f} ({drop:.1%} drop, need >=30%); deterministic={same}", secs)


# -- 4, 5 ---------------------------------------------------------------------------------

CHAIN = {"n_items": 2048, "pretrain": 1000, "relevance": 3000, "retrieval": 2000}


@functools.lru_cache(maxsize=None)
def _chain(seed):
    t0 = time.perf_counter()
    corpus = S.generate_corpus(S.GenConfig(n_items=CHAIN["n_items"], seed=seed))
    base = TR.run_pretrain(TR.TrainConfig(steps=CHAIN["pretrain"], seed=seed), corpus).params
    rcfg = TR.TrainConfig(stage="finetune_relevance", steps=CHAIN["relevance"], seed=seed)
    pairs = TR.relevance_dataset(rcfg, corpus, base)
    teacher = TR.run_finetune_relevance(rcfg, corpus, base, pairs=pairs).params
    rel = H.evaluate_relevance(teacher, base, corpus, rcfg, pairs)
    t1 = time.perf_counter()
    ablation = H.run_ablation(TR.TrainConfig(stage="finetune_retrieval", steps=CHAIN["retrieval"], seed=seed),
                              corpus, base, teacher)
    return {"rel": rel, "table": ablation.table(), "t_relevance": t1 - t0, "t_total": time.perf_counter() - t0,
            "corpus": corpus, "base": base, "teacher": teacher, "ablation": ablation}


def test_4_relevance_model():
    out = _chain(0)
    auc, base = out["rel"]["auc"], out["rel"]["base_auc"]
    gain = 100 * (auc - base)
    secs = out["t_relevance"]
    record(4, auc >= 0.85 and gain >= 5 and secs < 300,
           f"seed 0: AUC {auc:.4f} (>=0.85), base {base:.4f}, +{gain:.2f} pts (>=5)", secs)


def test_5_ablation_direction():
    runs = [_chain(s) for s in (0, 1, 2)]
    secs = sum(r["t_total"] for r in runs)
    tabs = [r["table"] for r in runs]
    rel_gap = statistics.median(t["lambda=1"]["relscore@10"] - t["lambda=0"]["relscore@10"] for t in tabs)
    rec_gap = statistics.median(t["lambda=1"]["recall@10"] - t["lambda=0"]["recall@10"] for t in tabs)
    beat = [statistics.median(t[arm]["recall@10"] - t["base"]["recall@10"] for t in tabs)
            for arm in ("lambda=0", "lambda=1")]
    med = {arm: {m: statistics.median(t[arm][m] for t in tabs) for m in ("recall@10", "relscore@10")}
           for arm in ("base", "lambda=0", "lambda=1")}
    ok = rel_gap > 0 and rec_gap >= -0.02 and min(beat) > 0 and secs < 900
    rows = "; ".join(f"{a} R@10 {v['recall@10']:.4f} Rel@10 {v['relscore@10']:.4f}" for a, v in med.items())
    record(5, ok, f"median over seeds 0-2: {rows}; Rel gap {rel_gap:+.4f}, R@10 gap {rec_gap:+.4f}", secs)


# -- 6 ------------------------------------------------------------------------------------

def test_6_ann_quality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5000, 16))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    idx = ix.build(np.arange(5000), x, ann=True)
    qs = rng.normal(size=(100, 16))
    truth = [set(ix.search_exact(idx, q, 10)[0].tolist()) for q in qs]
    rec = {ef: float(np.mean([len(set(ix.search_ann(idx, q, 10, ef)[0].tolist()) & t) / 10
                              for q, t in zip(qs, truth)])) for ef in (16, 32, 64)}
    secs = time.perf_counter() - t0
    mono = rec[16] <= rec[32] <= rec[64]
    record(6, rec[64] >= 0.9 and mono and secs < 30,
           f"backend {idx.backend}; recall@10 " + ", ".join(f"ef{k}={v:.3f}" for k, v in rec.items()), secs)


# -- 7 ------------------------------------------------------------------------------------

def test_7_pipeline_equivalence():
    t0 = time.perf_counter()
    corpus = S.generate_corpus(S.GenConfig(n_items=200, vocab_size=32, text_len=8, patch_grid=2, patch_dim=4,
                                           latent_dim=4, quant_levels=4, seed=11))
    retrieval, relevance = jittered(SMALL, 1, 0.5), jittered(SMALL, 2, 0.5)
    ids, vecs = PL.embed_catalog(corpus.ids, corpus.patches(), retrieval, SMALL)
    m = PL.build_matcher(ix.build(ids, vecs), dict(zip(corpus.ids.tolist(), corpus.patches())), retrieval,
                         relevance, SMALL)
    tokens = corpus.tokens()
    mismatches = 0
    queries = range(0, 200, 10)
    for q in queries:
        got = PL.match(m, q, tokens[q], k_retrieve=200, k_final=200, search_mode="exact")
        q_ret = PL.query_embedding(tokens[q], retrieval, SMALL)
        q_rel = PL.query_embedding(tokens[q], relevance, SMALL)
        # global rerank: every image scored on its own, sorted by (relevance desc, retrieval desc, id)
        rows = sorted((-float(F.teacher_pair_scores(q_rel[None], m.rel_images[r][None], relevance)[0]),
                       -float(vecs[r] @ q_ret), int(i)) for r, i in enumerate(ids))
        mismatches += list(got.image_ids) != [i for *_, i in rows]
    secs = time.perf_counter() - t0
    record(7, mismatches == 0 and secs < 30, f"{len(queries)} queries x 200 items, {mismatches} order mismatches",
           secs)


# -- 8 ------------------------------------------------------------------------------------

def test_8_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = {"auc": 0, "recall": 0, "relscore": 0, "diversity": 0, "irrelevant": 0}
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        s = np.round(rng.normal(size=n), 1)
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        pos, neg = s[y == 1], s[y == 0]
        want = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
        bad["auc"] += abs(M.auc(s, y) - want / (len(pos) * len(neg))) > 1e-12
    for _ in range(200):
        nq, cat = int(rng.integers(1, 8)), int(rng.integers(5, 30))
        ranked = [rng.permutation(cat)[: int(rng.integers(1, cat))].tolist() for _ in range(nq)]
        truths = rng.integers(0, cat, nq).tolist()
        deg = {(q, i): int(rng.integers(0, 3)) for q in range(nq) for i in range(cat)}
        k = int(rng.integers(1, 12))
        hits = sum(t in r[:k] for r, t in zip(ranked, truths)) / nq
        bad["recall"] += M.recall_at_k(ranked, truths, k) != pytest.approx(hits, abs=1e-12)
        rel = np.mean([np.mean([deg[q, i] for i in r[:k]]) for q, r in enumerate(ranked)])
        bad["relscore"] += M.relscore_at_k(dict(enumerate(ranked)), deg, k) != pytest.approx(rel, abs=1e-12)
        top = [r[:15] for r in ranked]
        bad["diversity"] += M.diversity_ratio(top, cat) != len(set().union(*map(set, top))) / cat
        pairs = [(q, i) for q, r in enumerate(top) for i in r]
        bad["irrelevant"] += M.irrelevant_ratio(pairs, deg) != sum(deg[p] == 0 for p in pairs) / len(pairs)
    secs = time.perf_counter() - t0
    record(8, not any(bad.values()) and secs < 30,
           "1000 AUC sets, 200 ranking sets; mismatches " + ", ".join(f"{k}={v}" for k, v in bad.items()), secs)


# -- 9 ------------------------------------------------------------------------------------

def test_9_freeze_isolation(small_corpus):
    t0 = time.perf_counter()
    enc = SMALL.to_dict()
    base = TR.run_pretrain(TR.TrainConfig(steps=3, batch_size=8, queue_size=16, encoder=enc), small_corpus).params
    rel = TR.run_finetune_relevance(TR.TrainConfig(stage="finetune_relevance", steps=20, batch_size=8,
                                                   candidate_pool=16, candidate_per_query=4, encoder=enc),
                                    small_corpus, base).params
    teacher_before = {k: t.data.copy() for k, t in rel.named()}
    for _, t in rel.named():
        t.grad = None  # left over from the teacher's own training
    ret = TR.run_finetune_retrieval(TR.TrainConfig(stage="finetune_retrieval", steps=20, batch_size=8, lam=1.0,
                                                   encoder=enc), small_corpus, base, rel).params
    frozen = all(np.array_equal(out["vision"][n].data, t.data) for out in (rel, ret) for n, t in base["vision"].items())
    moved = not np.array_equal(ret["projection_text"]["w"].data, base["projection_text"]["w"].data)
    teacher_same = all(np.array_equal(t.data, teacher_before[k]) for k, t in rel.named())
    teacher_grad = all(t.grad is None or not np.any(t.grad) for _, t in rel.named())
    # and in a single multitask backward pass
    student, teacher = jittered(SMALL, 0), jittered(SMALL, 5)
    rng = np.random.default_rng(3)
    tok, pat = rng.integers(3, 32, size=(4, 8)), rng.normal(size=(4, 4, 4))
    loss, _ = F.multitask_loss(E.embed_text(tok, student, SMALL), E.embed_image(pat, student, SMALL),
                               F.teacher_score(tok, pat, teacher, SMALL))
    T.backward(loss)
    step_grad = all(t.grad is None or not np.any(t.grad) for _, t in teacher.named())
    ok = frozen and moved and teacher_same and teacher_grad and step_grad
    record(9, ok, f"vision bitwise constant={frozen}, text tower trained={moved}, teacher unchanged={teacher_same}, "
                  f"teacher grad zero={teacher_grad and step_grad}", time.perf_counter() - t0)


# -- 10 -----------------------------------------------------------------------------------

def test_10_reproducibility(tmp_path):
    t0 = time.perf_counter()
    outs = cli_chain(tmp_path)
    diff = []
    for cmd, out in outs.items():
        before = artifact_bytes(out)
        status = main(["replay", str(out) + ".manifest.json"])
        if status != 0 or artifact_bytes(out) != before:
            diff.append(cmd)
    record(10, not diff, f"{len(outs)} commands replayed from their manifests; differing: {diff or 'none'}",
           time.perf_counter() - t0)
