"""Optimisation loop for the three training stages.

A stage run is a pure function of ``(TrainConfig, corpus, input checkpoints)``:
every random draw comes from a named sub-stream of ``TrainConfig.seed``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .encoders import (
    GROUPS,
    EncoderConfig,
    ModelParams,
    MomentumState,
    init_params,
    init_relevance_head,
    momentum_update,
)
from .errors import ParameterError, StateError, ValidationError
from .finetune import (
    image_embeddings,
    text_embeddings,
    multitask_loss,
    relevance_logits_from_emb,
    relevance_loss,
    teacher_pair_scores,
    vision_cls_cache,
)
from .encoders import embed_text
from .pretrain import LossWeights, NegativeQueue, enqueue, make_pretrain_batch, pretrain_loss
from .seeding import substream
from .synthdata import Corpus, RelevancePair, generate_candidate_pairs, split_queries

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune_relevance", "finetune_retrieval")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    tau: float = 0.07
    momentum: float = 0.99
    queue_size: int = 1024
    lam: float = 1.0
    holdout: float = 0.2
    loss_weights: dict = field(default_factory=lambda: {"itc": 1.0, "mlm": 1.0, "itm": 1.0})
    freeze_image_projection: bool = False
    relevance_source: str = "candidates"
    candidate_pool: int = 384
    candidate_per_query: int = 16
    encoder: dict = field(default_factory=dict)
    base_checkpoint: str | None = None
    teacher_checkpoint: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.tau <= 0 or self.lam < 0:
            raise ValidationError("tau must be > 0 and lam >= 0")
        if not 0.0 < self.holdout < 1.0:
            raise ValidationError("holdout must lie in (0, 1)")
        if self.relevance_source not in ("candidates", "corpus"):
            raise ValidationError(f"relevance_source must be 'candidates' or 'corpus', got {self.relevance_source!r}")
        if self.candidate_pool < 1 or self.candidate_per_query < 1:
            raise ValidationError("candidate_pool and candidate_per_query must be >= 1")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.from_dict(self.encoder)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# -- optimisers -------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update of every non-frozen parameter."""
    trainable = params.trainable()
    for name, p in trainable:
        if p.grad is None:
            raise StateError(f"no gradient for {name}; call backward() first")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in trainable:
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def sgd_step(params: ModelParams, lr: float) -> None:
    for name, p in params.trainable():
        if p.grad is None:
            raise StateError(f"no gradient for {name}; call backward() first")
        p.data = p.data - lr * p.grad


class Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state = AdamState()

    def step(self, params: ModelParams) -> None:
        c = self.cfg
        if c.optimizer == "adam":
            adam_step(params, self.state, c.lr, c.beta1, c.beta2, c.adam_eps)
        else:
            sgd_step(params, c.lr)


def _zero_trainable(params: ModelParams) -> None:
    for _, p in params.trainable():
        p.zero_grad()


# -- stage results ----------------------------------------------------------------------

@dataclass
class StageResult:
    params: ModelParams
    log: list[dict]
    config: TrainConfig
    momentum: MomentumState | None = None

    def checkpoint_meta(self) -> dict:
        cfg = self.config.encoder_config()
        return {
            "stage": self.config.stage,
            "encoder": cfg.to_dict(),
            "fingerprint": cfg.fingerprint(),
            "seed": self.config.seed,
            "steps": self.config.steps,
        }

    def save(self, path) -> Path:
        return save_checkpoint(self.params, path, self.checkpoint_meta())


def write_metrics(log_rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in log_rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def _require(params, what: str):
    if params is None:
        raise StateError(f"missing required checkpoint: {what}")
    return params


def _resolve(params, path, what):
    if params is None and path:
        if not Path(path).exists():
            raise StateError(f"missing required checkpoint: {what} ({path})")
        params = load_checkpoint(path)
    return _require(params, what)


def _check_encoder(params: ModelParams, cfg: EncoderConfig, what: str) -> None:
    enc = params.meta.get("encoder") if params.meta else None
    if enc is not None and EncoderConfig.from_dict(enc) != cfg:
        raise StateError(f"{what} was trained with a different encoder config")


# -- stages -----------------------------------------------------------------------------

def run_pretrain(cfg: TrainConfig, corpus: Corpus, callback=None) -> StageResult:
    ecfg = cfg.encoder_config()
    params = init_params(ecfg, substream(cfg.seed, "init"))
    params.freeze("relevance_head")
    state = MomentumState.from_online(params, cfg.momentum)
    queues = NegativeQueue.random(cfg.queue_size, ecfg.proj_dim, substream(cfg.seed, "init.queue"))
    data_rng = substream(cfg.seed, "data")
    aug_rng = substream(cfg.seed, "augment")
    mask_rng = substream(cfg.seed, "masking")
    sample_rng = substream(cfg.seed, "sampling")
    weights = LossWeights(**cfg.loss_weights)
    opt = Optimizer(cfg)
    ids_all = corpus.ids
    tokens_all = corpus.tokens()
    patches_all = corpus.patches()
    b = min(cfg.batch_size, len(ids_all))
    rows = []
    for step in range(cfg.steps):
        pick = np.sort(data_rng.choice(len(ids_all), size=b, replace=False))
        batch = make_pretrain_batch(ids_all[pick], tokens_all[pick], patches_all[pick],
                                    aug_rng, mask_rng, ecfg)
        _zero_trainable(params)
        loss, parts, mom = pretrain_loss(batch, params, state, queues, ecfg, sample_rng,
                                         cfg.tau, weights)
        T.backward(loss)
        opt.step(params)
        momentum_update(params, state)
        enqueue(queues.image, mom.image[0], batch.ids)
        enqueue(queues.text, mom.text[0], batch.ids)
        row = {"step": step, "losses": {"total": float(loss.data), **parts}}
        rows.append(row)
        if callback:
            callback(row)
    params.unfreeze("relevance_head")
    return StageResult(params, rows, cfg, state)


def _init_from_base(cfg: TrainConfig, base: ModelParams) -> ModelParams:
    ecfg = cfg.encoder_config()
    _check_encoder(base, ecfg, "base checkpoint")
    params = init_params(ecfg, substream(cfg.seed, "init"))
    load_into(params, base, [g for g in GROUPS if g != "relevance_head"])
    params.groups["relevance_head"] = init_relevance_head(ecfg, substream(cfg.seed, "init.relevance_head"))
    params.frozen = set()
    return params


def dual_embeddings(params: ModelParams, corpus: Corpus, ecfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Projected text and image embeddings of every corpus item (corpus order)."""
    txt = text_embeddings(corpus.tokens(), params, ecfg)
    with T.no_grad():
        img = image_embeddings(vision_cls_cache(corpus.patches(), params, ecfg), params).data
    return txt, img


def relevance_dataset(cfg: TrainConfig, corpus: Corpus, base: ModelParams) -> list[RelevancePair]:
    """Labelled pairs for the relevance stage.

    With ``relevance_source="candidates"`` the base model plays the retrieval
    system: each query's pairs are drawn from its top ``candidate_pool``
    images by base cosine, then labelled from the latents.
    """
    if cfg.relevance_source == "corpus":
        return list(corpus.relevance)
    txt, img = dual_embeddings(base, corpus, cfg.encoder_config())
    return generate_candidate_pairs(corpus, txt @ img.T, cfg.candidate_pool,
                                    cfg.candidate_per_query, cfg.seed)


def run_finetune_relevance(cfg: TrainConfig, corpus: Corpus, base: ModelParams | None = None,
                           callback=None, pairs: list[RelevancePair] | None = None) -> StageResult:
    base = _resolve(base, cfg.base_checkpoint, "base checkpoint")
    ecfg = cfg.encoder_config()
    params = _init_from_base(cfg, base)
    params.freeze("vision", "fusion", "itm_head")
    train_q, _ = split_queries(corpus.ids, cfg.holdout, cfg.seed)
    train_q = set(train_q.tolist())
    if pairs is None:
        pairs = relevance_dataset(cfg, corpus, base)
    pairs = [p for p in pairs if p.query_id in train_q]
    if not pairs:
        raise StateError("no relevance pairs for training queries")
    q_ids = np.array([p.query_id for p in pairs])
    i_ids = np.array([p.image_id for p in pairs])
    degrees = np.array([p.degree for p in pairs])
    id_to_row = {int(i): r for r, i in enumerate(corpus.ids)}
    cls_cache = vision_cls_cache(corpus.patches(), params, ecfg)
    tokens_all = corpus.tokens()
    data_rng = substream(cfg.seed, "data")
    opt = Optimizer(cfg)
    b = min(cfg.batch_size, len(pairs))
    rows = []
    for step in range(cfg.steps):
        pick = np.sort(data_rng.choice(len(pairs), size=b, replace=False))
        qrow = np.array([id_to_row[int(i)] for i in q_ids[pick]])
        irow = np.array([id_to_row[int(i)] for i in i_ids[pick]])
        _zero_trainable(params)
        q = embed_text(tokens_all[qrow], params, ecfg)
        i = image_embeddings(cls_cache[irow], params)
        logits = relevance_logits_from_emb(q, i, params["relevance_head"])
        loss = relevance_loss(logits, degrees[pick])
        T.backward(loss)
        opt.step(params)
        row = {"step": step, "losses": {"total": float(loss.data), "relevance": float(loss.data)}}
        rows.append(row)
        if callback:
            callback(row)
    return StageResult(params, rows, cfg)


def _distinct_batch(rng, q_ids, i_ids, b):
    """Sample up to ``b`` pair indices with no repeated query or image."""
    order = rng.permutation(len(q_ids))
    seen_q, seen_i, out = set(), set(), []
    for k in order:
        q, i = int(q_ids[k]), int(i_ids[k])
        if q in seen_q or i in seen_i:
            continue
        seen_q.add(q)
        seen_i.add(i)
        out.append(k)
        if len(out) == b:
            break
    return np.sort(np.array(out, dtype=np.int64))


def run_finetune_retrieval(cfg: TrainConfig, corpus: Corpus, base: ModelParams | None = None,
                           teacher: ModelParams | None = None, callback=None) -> StageResult:
    base = _resolve(base, cfg.base_checkpoint, "base checkpoint")
    teacher = _resolve(teacher, cfg.teacher_checkpoint, "teacher checkpoint")
    ecfg = cfg.encoder_config()
    _check_encoder(teacher, ecfg, "teacher checkpoint")
    params = _init_from_base(cfg, base)
    params.freeze("vision", "fusion", "itm_head", "relevance_head")
    if cfg.freeze_image_projection:
        params.freeze("projection_vision")
    train_q, _ = split_queries(corpus.ids, cfg.holdout, cfg.seed)
    train_q = set(train_q.tolist())
    pairs = [p for p in corpus.clicks if p.query_id in train_q]
    if len(pairs) < 2:
        raise StateError("fewer than 2 click pairs for training queries")
    q_ids = np.array([p.query_id for p in pairs])
    i_ids = np.array([p.image_id for p in pairs])
    id_to_row = {int(i): r for r, i in enumerate(corpus.ids)}
    tokens_all = corpus.tokens()
    cls_cache = vision_cls_cache(corpus.patches(), params, ecfg)
    # teacher embeddings are fixed for the whole run
    t_txt, t_img = dual_embeddings(teacher, corpus, ecfg)
    data_rng = substream(cfg.seed, "data")
    opt = Optimizer(cfg)
    rows = []
    for step in range(cfg.steps):
        pick = _distinct_batch(data_rng, q_ids, i_ids, cfg.batch_size)
        qrow = np.array([id_to_row[int(i)] for i in q_ids[pick]])
        irow = np.array([id_to_row[int(i)] for i in i_ids[pick]])
        _zero_trainable(params)
        q = embed_text(tokens_all[qrow], params, ecfg)
        i = image_embeddings(cls_cache[irow], params)
        tp = teacher_pair_scores(t_txt[qrow], t_img[irow], teacher) if cfg.lam > 0 else None
        loss, parts = multitask_loss(q, i, tp, cfg.tau, cfg.lam)
        T.backward(loss)
        opt.step(params)
        row = {"step": step, "losses": {"total": float(loss.data), **parts}}
        rows.append(row)
        if callback:
            callback(row)
    return StageResult(params, rows, cfg)


def run_stage(cfg: TrainConfig, corpus: Corpus, base: ModelParams | None = None,
              teacher: ModelParams | None = None, callback=None) -> StageResult:
    if cfg.stage == "pretrain":
        return run_pretrain(cfg, corpus, callback)
    if cfg.stage == "finetune_relevance":
        return run_finetune_relevance(cfg, corpus, base, callback)
    if cfg.stage == "finetune_retrieval":
        return run_finetune_retrieval(cfg, corpus, base, teacher, callback)
    raise ParameterError(f"unknown stage {cfg.stage!r}")


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (valid windows only)."""
    v = np.asarray(values, dtype=np.float64)
    w = min(window, len(v))
    return np.convolve(v, np.ones(w) / w, mode="valid")
