"""Offline evaluation: relevance AUC, retrieval Recall/Relscore, match-report metrics, the KD ablation.

Ground-truth degrees come from the generator's latents (the synthetic stand-in
for human annotation).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, ModelParams, init_params
from .errors import StateError, ValidationError
from .finetune import positive_probability, relevance_logits_from_emb
from .metrics import EvalConfig, auc, diversity_ratio, irrelevant_ratio, recall_at_k, relscore_at_k
from .seeding import substream
from .synthdata import Corpus, RelevancePair, split_queries
from .tensor import Tensor
from .trainer import TrainConfig, dual_embeddings, relevance_dataset, run_finetune_retrieval


def heldout_queries(corpus: Corpus, holdout: float, seed: int) -> set[int]:
    _, held = split_queries(corpus.ids, holdout, seed)
    return set(held.tolist())


# -- relevance model ------------------------------------------------------------------

def _pair_rows(corpus: Corpus, pairs):
    row = {int(i): r for r, i in enumerate(corpus.ids)}
    return (np.array([row[p.query_id] for p in pairs]), np.array([row[p.image_id] for p in pairs]))


def relevance_pair_scores(params: ModelParams, corpus: Corpus, pairs, ecfg: EncoderConfig,
                          head: bool = True) -> np.ndarray:
    """Relevance-head probability (``head=True``) or plain dual-encoder cosine for each pair."""
    txt, img = dual_embeddings(params, corpus, ecfg)
    qr, ir = _pair_rows(corpus, pairs)
    if not head:
        return np.sum(txt[qr] * img[ir], axis=1)
    if "relevance_head" not in params.groups:
        raise StateError("params have no relevance_head group")
    with T.no_grad():
        logits = relevance_logits_from_emb(Tensor(txt[qr]), Tensor(img[ir]), params["relevance_head"])
    return positive_probability(logits.data)


def evaluate_relevance(finetuned: ModelParams, base: ModelParams, corpus: Corpus,
                       cfg: TrainConfig, pairs: list[RelevancePair] | None = None) -> dict:
    """AUC on pairs of held-out queries; the base model is scored by its cosine on the same pairs."""
    ecfg = cfg.encoder_config()
    if pairs is None:
        pairs = relevance_dataset(cfg, corpus, base)
    held = heldout_queries(corpus, cfg.holdout, cfg.seed)
    test = [p for p in pairs if p.query_id in held]
    if not test:
        raise ValidationError("no relevance pairs for held-out queries")
    labels = np.array([p.label for p in test])
    return {
        "auc": auc(relevance_pair_scores(finetuned, corpus, test, ecfg), labels),
        "base_auc": auc(relevance_pair_scores(base, corpus, test, ecfg, head=False), labels),
        "n_pairs": len(test),
        "n_positive": int(labels.sum()),
    }


# -- retrieval model ------------------------------------------------------------------

def rank_catalog(q_emb: np.ndarray, img_emb: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Top-k catalog ids per query row by cosine, ties by ascending id."""
    sims = q_emb @ img_emb.T
    out = np.empty((len(q_emb), min(k, len(ids))), dtype=np.int64)
    for r in range(len(q_emb)):
        out[r] = ids[np.lexsort((ids, -sims[r]))[:out.shape[1]]]
    return out


def evaluate_retrieval(params: ModelParams, corpus: Corpus, ecfg: EncoderConfig, holdout: float = 0.2,
                       split_seed: int = 0, eval_cfg: EvalConfig | None = None) -> dict:
    """Text-to-image retrieval over the full catalog for held-out click pairs.

    Recall@K counts each held-out click pair once; Relscore@10, diversity and
    irrelevant ratio are taken per held-out query over its exact ranking.
    """
    ec = eval_cfg or EvalConfig()
    held = heldout_queries(corpus, holdout, split_seed)
    clicks = [p for p in corpus.clicks if p.query_id in held]
    if not clicks:
        raise ValidationError("no click pairs for held-out queries")
    queries = sorted({p.query_id for p in clicks})
    if ec.query_sample is not None and ec.query_sample < len(queries):
        pick = substream(ec.seed, "eval.sample").choice(len(queries), ec.query_sample, replace=False)
        queries = sorted(queries[i] for i in pick)
        clicks = [p for p in clicks if p.query_id in set(queries)]
    txt, img = dual_embeddings(params, corpus, ecfg)
    row = {int(i): r for r, i in enumerate(corpus.ids)}
    depth = max(max(ec.ks), ec.top_m, 10)
    ranked = rank_catalog(txt[[row[q] for q in queries]], img, corpus.ids, depth)
    by_q = dict(zip(queries, ranked))
    out = {f"recall@{k}": recall_at_k([by_q[p.query_id] for p in clicks], [p.image_id for p in clicks], k)
           for k in ec.ks}
    out["relscore@10"] = relscore_at_k(by_q, corpus.degree, 10)
    top_m = {q: r[:ec.top_m] for q, r in by_q.items()}
    out["diversity_ratio"] = diversity_ratio(top_m.values(), corpus.ids)
    out["irrelevant_ratio"] = irrelevant_ratio([(q, i) for q, r in top_m.items() for i in r],
                                               corpus.degree, ec.irrelevant_degree)
    out["mean_attractiveness@10"] = float(np.mean(
        [[corpus.item(int(i)).attractiveness for i in r[:10]] for r in by_q.values()]))
    out["n_click_pairs"] = len(clicks)
    out["n_queries"] = len(queries)
    return out


def evaluate_report(rows: list[dict], corpus: Corpus, eval_cfg: EvalConfig | None = None) -> dict:
    """Metrics of a match report; recall uses every click pair whose query appears in the report."""
    ec = eval_cfg or EvalConfig()
    if not rows:
        raise ValidationError("match report is empty")
    ranked = {int(r["query_id"]): [int(x["image_id"]) for x in r["results"]] for r in rows}
    out = {
        "diversity_ratio": diversity_ratio([v[:ec.top_m] for v in ranked.values()], corpus.ids),
        "irrelevant_ratio": irrelevant_ratio([(q, i) for q, v in ranked.items() for i in v[:ec.top_m]],
                                             corpus.degree, ec.irrelevant_degree),
        "relscore@10": relscore_at_k(ranked, corpus.degree, 10),
        "n_queries": len(ranked),
    }
    clicks = [p for p in corpus.clicks if p.query_id in ranked]
    for k in ec.ks:
        out[f"recall@{k}"] = (recall_at_k([ranked[p.query_id] for p in clicks], [p.image_id for p in clicks], k)
                              if clicks else None)
    return out


def write_eval_report(metrics: dict, eval_cfg: EvalConfig, seed: int, path, extra: dict | None = None) -> Path:
    doc = {"metrics": metrics, "config": eval_cfg.to_dict(), "seed": seed}
    if extra:
        doc.update(extra)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


# -- ablation -------------------------------------------------------------------------

@dataclass
class AblationResult:
    base: dict
    arms: dict          # lambda -> metrics
    params: dict        # lambda -> ModelParams

    def table(self) -> dict:
        keys = ("recall@10", "relscore@10")
        rows = {"base": {k: self.base[k] for k in keys}}
        rows.update({f"lambda={lam:g}": {k: m[k] for k in keys} for lam, m in self.arms.items()})
        return rows


def run_ablation(cfg: TrainConfig, corpus: Corpus, base: ModelParams, teacher: ModelParams,
                 lams=(0.0, 1.0), eval_cfg: EvalConfig | None = None) -> AblationResult:
    """finetune_retrieval once per lambda from the same base, each evaluated on the held-out split."""
    ecfg = cfg.encoder_config()
    ev = lambda p: evaluate_retrieval(p, corpus, ecfg, cfg.holdout, cfg.seed, eval_cfg)  # noqa: E731
    arms, params = {}, {}
    for lam in lams:
        res = run_finetune_retrieval(replace(cfg, stage="finetune_retrieval", lam=float(lam)), corpus, base, teacher)
        arms[float(lam)] = ev(res.params)
        params[float(lam)] = res.params
    return AblationResult(ev(base), arms, params)


def previous_retrieval_baseline(cfg: TrainConfig, corpus: Corpus, teacher: ModelParams) -> ModelParams:
    """Click-contrastive-only retrieval model from random initialisation (no pre-training)."""
    ecfg = cfg.encoder_config()
    scratch = init_params(ecfg, substream(cfg.seed, "init.baseline"))
    scratch.meta = {"encoder": ecfg.to_dict()}
    return run_finetune_retrieval(replace(cfg, stage="finetune_retrieval", lam=0.0), corpus, scratch, teacher).params
