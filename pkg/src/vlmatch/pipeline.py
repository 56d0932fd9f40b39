"""Two-stage matching: retrieve candidates with the retrieval tower, rerank with the relevance model."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import index as ix
from . import tensor as T
from .encoders import EncoderConfig, ModelParams, embed_text
from .errors import ParameterError, StateError
from .finetune import image_embeddings, positive_probability, vision_cls_cache
from .tensor import Tensor


def check_encoder(params: ModelParams, cfg: EncoderConfig, what: str) -> None:
    enc = params.meta.get("encoder") if params.meta else None
    if enc is not None and EncoderConfig.from_dict(enc) != cfg:
        raise StateError(f"{what} was trained with a different encoder config")


def embed_catalog(ids, patches, params: ModelParams, cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unit image embeddings from ``params`` for each catalog id (order preserved)."""
    check_encoder(params, cfg, "retrieval checkpoint")
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        return ids, np.zeros((0, cfg.proj_dim))
    with T.no_grad():
        vecs = image_embeddings(vision_cls_cache(np.asarray(patches), params, cfg), params).data
    return ids, vecs


def query_embedding(tokens, params: ModelParams, cfg: EncoderConfig) -> np.ndarray:
    with T.no_grad():
        return embed_text(np.asarray(tokens)[None, :], params, cfg).data[0]


def _rowwise_affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # elementwise product + per-row reduction: each row's value is independent of the batch
    return (x[:, :, None] * w[None, :, :]).sum(axis=1) + b


def relevance_scores(q_emb: np.ndarray, img_emb: np.ndarray, head) -> np.ndarray:
    """Positive-class probability of the relevance head for one query against many images.

    Same function as ``finetune.relevance_logits_from_emb`` but batch
    invariant, so a candidate's score does not depend on its neighbours.
    """
    img_emb = np.atleast_2d(img_emb)
    d = img_emb.shape[1]
    q = np.broadcast_to(q_emb, img_emb.shape)
    x = np.concatenate([q * d ** 0.5, img_emb * d ** 0.5, (q * img_emb) * float(d)], axis=1)
    pre = _rowwise_affine(x, head["w1"].data, head["b1"].data)
    with T.no_grad():
        h = T.gelu(Tensor(pre)).data
    return positive_probability(_rowwise_affine(h, head["w2"].data, head["b2"].data))


@dataclass
class Matcher:
    index: ix.EmbeddingIndex
    retrieval: ModelParams
    relevance: ModelParams
    cfg: EncoderConfig
    rel_images: np.ndarray          # relevance-model image embeddings, rows aligned with index.ids
    _row: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._row = {int(i): r for r, i in enumerate(self.index.ids)}


def build_matcher(index: ix.EmbeddingIndex, patches_by_id, retrieval: ModelParams,
                  relevance: ModelParams, cfg: EncoderConfig) -> Matcher:
    """``patches_by_id`` maps image id -> patch grid for every indexed id."""
    check_encoder(relevance, cfg, "relevance checkpoint")
    if "relevance_head" not in relevance.groups:
        raise StateError("relevance checkpoint has no relevance_head")
    patches = np.stack([patches_by_id[int(i)] for i in index.ids]) if len(index) else None
    _, rel = embed_catalog(index.ids, patches, relevance, cfg)
    return Matcher(index, retrieval, relevance, cfg, rel)


@dataclass(frozen=True)
class MatchResult:
    query_id: int
    image_ids: tuple
    retrieval_scores: tuple
    relevance_scores: tuple
    timings_us: dict

    def to_json(self) -> dict:
        return {
            "query_id": int(self.query_id),
            "results": [
                {"image_id": int(i), "retrieval_score": float(r), "relevance_score": float(s)}
                for i, r, s in zip(self.image_ids, self.retrieval_scores, self.relevance_scores)
            ],
            "timings_us": dict(self.timings_us),
        }


def rank_candidates(ids, retrieval, relevance) -> np.ndarray:
    """Order: relevance desc, then retrieval cosine desc, then id asc."""
    ids = np.asarray(ids)
    return np.lexsort((ids, -np.asarray(retrieval), -np.asarray(relevance)))


def match(matcher: Matcher, query_id: int, query_tokens, k_retrieve: int = 15, k_final: int = 5,
          ef_search: int = 32, search_mode: str = "auto", record_timings: bool = False) -> MatchResult:
    if k_retrieve < 1 or k_final < 1:
        raise ParameterError("k_retrieve and k_final must be >= 1")
    if k_final > k_retrieve:
        raise ParameterError(f"k_final ({k_final}) must not exceed k_retrieve ({k_retrieve})")
    if len(matcher.index) == 0:
        raise StateError("cannot match against an empty index")
    if search_mode == "auto":
        search_mode = "ann" if matcher.index.has_graph else "exact"
    t0 = time.perf_counter_ns()
    q_ret = query_embedding(query_tokens, matcher.retrieval, matcher.cfg)
    if search_mode == "ann":
        cand, cos = ix.search_ann(matcher.index, q_ret, k_retrieve, max(ef_search, k_retrieve))
    else:
        cand, cos = ix.search(matcher.index, q_ret, k_retrieve, mode=search_mode)
    t1 = time.perf_counter_ns()
    q_rel = query_embedding(query_tokens, matcher.relevance, matcher.cfg)
    rows = np.array([matcher._row[int(i)] for i in cand])
    rel = relevance_scores(q_rel, matcher.rel_images[rows], matcher.relevance["relevance_head"])
    order = rank_candidates(cand, cos, rel)[:k_final]
    t2 = time.perf_counter_ns()
    timings = ({"retrieve": (t1 - t0) // 1000, "rerank": (t2 - t1) // 1000} if record_timings
               else {"retrieve": None, "rerank": None})
    return MatchResult(int(query_id), tuple(int(i) for i in cand[order]), tuple(cos[order].tolist()),
                       tuple(rel[order].tolist()), timings)


def write_report(results, path) -> Path:
    """JSON lines, one MatchResult per query, in the order given."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def read_report(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
