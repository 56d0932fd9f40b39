"""Pre-training losses: multi-view momentum ITC, image-conditioned MLM, ITM.

Contrastive negatives come from FIFO queues filled with momentum-encoder
features. Queue entries carry the item id they were computed from so that
stale copies of the anchor's own item are never used as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import (
    MASK_ID,
    N_SPECIAL,
    PAD_ID,
    EncoderConfig,
    ModelParams,
    MomentumState,
    encode_image,
    encode_text,
    fuse,
    project,
    text_inputs,
)
from .errors import DegenerateInputError, DimensionError, ParameterError, StateError
from .tensor import Tensor


# -- queues -----------------------------------------------------------------------

@dataclass
class FeatureQueue:
    """Ring buffer of unit vectors with the id of the item each came from."""

    capacity: int
    dim: int
    vectors: np.ndarray = field(init=False)
    ids: np.ndarray = field(init=False)
    cursor: int = 0
    size: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ParameterError(f"queue capacity must be >= 1, got {self.capacity}")
        self.vectors = np.zeros((self.capacity, self.dim))
        self.ids = np.full(self.capacity, -1, dtype=np.int64)

    def contents(self) -> tuple[np.ndarray, np.ndarray]:
        """Entries oldest first."""
        if self.size < self.capacity:
            return self.vectors[: self.size].copy(), self.ids[: self.size].copy()
        order = np.r_[self.cursor:self.capacity, 0:self.cursor]
        return self.vectors[order], self.ids[order]

    def active(self) -> tuple[np.ndarray, np.ndarray]:
        """Entries in storage order (cheaper; order is irrelevant to the loss)."""
        return self.vectors[: self.size], self.ids[: self.size]


def enqueue(queue: FeatureQueue, features, ids=None) -> FeatureQueue:
    """FIFO append; entries past capacity evict the oldest."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if feats.shape[1] != queue.dim:
        raise DimensionError(f"queue width {queue.dim} != feature width {feats.shape[1]}")
    ids = np.full(len(feats), -1, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    for vec, i in zip(feats, ids):
        queue.vectors[queue.cursor] = vec
        queue.ids[queue.cursor] = i
        queue.cursor = (queue.cursor + 1) % queue.capacity
        queue.size = min(queue.size + 1, queue.capacity)
    return queue


@dataclass
class NegativeQueue:
    image: FeatureQueue
    text: FeatureQueue

    @classmethod
    def empty(cls, capacity: int, dim: int) -> "NegativeQueue":
        return cls(FeatureQueue(capacity, dim), FeatureQueue(capacity, dim))

    @classmethod
    def random(cls, capacity: int, dim: int, rng: np.random.Generator) -> "NegativeQueue":
        """Queue pre-filled with random unit vectors (id -1)."""
        q = cls.empty(capacity, dim)
        for fq in (q.image, q.text):
            v = rng.normal(size=(capacity, dim))
            enqueue(fq, v / np.linalg.norm(v, axis=1, keepdims=True))
        return q


# -- InfoNCE ------------------------------------------------------------------------

def info_nce(anchor, positive, negatives, tau: float = 0.07, neg_mask=None) -> Tensor:
    """-log softmax of the positive among {positive} + negatives at temperature ``tau``.

    ``anchor`` is a unit vector ``[d]`` or a batch ``[B, d]`` (differentiable);
    ``positive`` matches its shape; ``negatives`` is a shared ``[N, d]`` set.
    ``neg_mask`` (``[B, N]`` bool) removes negatives per row. Batched
    inputs return the mean over rows.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    anchor = anchor if isinstance(anchor, Tensor) else Tensor(anchor)
    positive = positive if isinstance(positive, Tensor) else Tensor(positive)
    negatives = negatives if isinstance(negatives, Tensor) else Tensor(np.asarray(negatives, dtype=np.float64))
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise ParameterError("info_nce needs at least one negative")
    single = anchor.ndim == 1
    if single:
        anchor = T.reshape(anchor, (1, anchor.shape[0]))
        positive = T.reshape(positive, (1, positive.shape[0]))
    if anchor.shape != positive.shape or negatives.shape[1] != anchor.shape[1]:
        raise DimensionError(
            f"info_nce: anchor {anchor.shape}, positive {positive.shape}, negatives {negatives.shape}"
        )
    pos = T.sum(T.mul(anchor, positive), axis=1, keepdims=True)
    neg = anchor @ T.transpose(negatives)
    if neg_mask is not None:
        neg = T.masked_fill(neg, neg_mask)
    logits = T.mul(T.concat([pos, neg], axis=1), 1.0 / tau)
    return T.cross_entropy(logits, np.zeros(anchor.shape[0], dtype=np.int64))


def in_batch_info_nce(anchor: Tensor, keys: Tensor, tau: float) -> Tensor:
    """Row i's positive is keys[i]; every other row of ``keys`` is a negative."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    logits = T.mul(anchor @ T.transpose(keys), 1.0 / tau)
    return T.cross_entropy(logits, np.arange(anchor.shape[0]))


# -- batches and augmentation -----------------------------------------------------

@dataclass
class PretrainBatch:
    """Two augmented views per modality plus the MLM plan for text view 1."""

    ids: np.ndarray
    text_views: tuple[np.ndarray, np.ndarray]
    image_views: tuple[np.ndarray, np.ndarray]
    mlm_tokens: np.ndarray
    mlm_labels: np.ndarray  # original id at masked positions, -1 elsewhere

    def __post_init__(self):
        if len(self.ids) < 2:
            raise ParameterError("a pre-training batch needs at least 2 items")

    @property
    def size(self) -> int:
        return len(self.ids)


def augment_text(tokens: np.ndarray, rng: np.random.Generator, drop: float = 0.1) -> np.ndarray:
    """Token dropout: replace random non-pad tokens with padding, keeping at least one."""
    out = np.array(tokens, dtype=np.int64, copy=True)
    real = out != PAD_ID
    drop_mask = (rng.random(out.shape) < drop) & real
    # never drop a whole sequence
    emptied = real.any(axis=-1) & ~(real & ~drop_mask).any(axis=-1)
    drop_mask[emptied] = False
    out[drop_mask] = PAD_ID
    return out


def augment_image(patches: np.ndarray, rng: np.random.Generator, sigma: float = 0.05,
                  drop: float = 0.1) -> np.ndarray:
    """Gaussian value jitter plus whole-patch dropout (zeroed patches)."""
    out = patches + rng.normal(0.0, sigma, size=patches.shape)
    keep = rng.random(patches.shape[:-1]) >= drop
    return out * keep[..., None]


def mask_tokens(tokens, rng: np.random.Generator, mask_rate: float = 0.15,
                vocab_size: int = 128, mix=(0.8, 0.1, 0.1)):
    """BERT-style masking over non-pad positions.

    Returns ``(masked, labels)`` where ``labels`` holds the original id at
    selected positions and -1 elsewhere. ``mix`` gives the share of selected
    positions turned into ``[MASK]``, a random token, or left unchanged.
    """
    tok = np.array(tokens, dtype=np.int64, copy=True)
    real = tok != PAD_ID
    if not real.any():
        raise DegenerateInputError("no maskable (non-pad) tokens")
    selected = (rng.random(tok.shape) < mask_rate) & real
    r = rng.random(tok.shape)
    random_ids = rng.integers(N_SPECIAL, vocab_size, size=tok.shape)
    labels = np.where(selected, tok, -1)
    to_mask = selected & (r < mix[0])
    to_rand = selected & (r >= mix[0]) & (r < mix[0] + mix[1])
    tok[to_mask] = MASK_ID
    tok[to_rand] = random_ids[to_rand]
    return tok, labels


def make_pretrain_batch(ids, tokens, patches, aug_rng, mask_rng, cfg: EncoderConfig,
                        text_drop=0.1, jitter=0.05, patch_drop=0.1, mask_rate=0.15):
    t1 = augment_text(tokens, aug_rng, text_drop)
    t2 = augment_text(tokens, aug_rng, text_drop)
    i1 = augment_image(patches, aug_rng, jitter, patch_drop)
    i2 = augment_image(patches, aug_rng, jitter, patch_drop)
    mlm_tokens, mlm_labels = mask_tokens(t1, mask_rng, mask_rate, cfg.vocab_size)
    return PretrainBatch(np.asarray(ids), (t1, t2), (i1, i2), mlm_tokens, mlm_labels)


# -- ITC ----------------------------------------------------------------------------

@dataclass
class Encoded:
    """Online encodings of view 1 reused by ITC, MLM and ITM."""

    img_cls: Tensor
    img_seq: Tensor
    txt_cls: Tensor
    txt_seq: Tensor
    txt_pad: np.ndarray
    img_feat: Tensor
    txt_feat: Tensor


def encode_views(batch: PretrainBatch, params: ModelParams, cfg: EncoderConfig) -> Encoded:
    img_cls, img_seq = encode_image(batch.image_views[0], params, cfg)
    txt_cls, txt_seq = encode_text(batch.text_views[0], params, cfg)
    _, pad = text_inputs(batch.text_views[0], cfg)
    return Encoded(
        img_cls, img_seq, txt_cls, txt_seq, pad,
        project(img_cls, params["projection_vision"]),
        project(txt_cls, params["projection_text"]),
    )


@dataclass
class MomentumFeatures:
    image: tuple[np.ndarray, np.ndarray]
    text: tuple[np.ndarray, np.ndarray]


def momentum_features(batch: PretrainBatch, state: MomentumState, cfg: EncoderConfig) -> MomentumFeatures:
    """Momentum-encoder features of both views; never part of the graph."""
    sh = state.shadow
    with T.no_grad():
        imgs = tuple(
            project(encode_image(v, sh, cfg)[0], sh["projection_vision"]).data for v in batch.image_views
        )
        txts = tuple(
            project(encode_text(v, sh, cfg)[0], sh["projection_text"]).data for v in batch.text_views
        )
    return MomentumFeatures(imgs, txts)


def _contrast(anchor: Tensor, positive: np.ndarray, all_pos: np.ndarray, queue: FeatureQueue,
              ids: np.ndarray, tau: float) -> Tensor:
    if queue is None or queue.size == 0:
        return in_batch_info_nce(anchor, Tensor(all_pos), tau)
    negs, neg_ids = queue.active()
    mask = neg_ids[None, :] == ids[:, None]
    return info_nce(anchor, Tensor(positive), Tensor(negs), tau, neg_mask=mask if mask.any() else None)


def itc_multiview(batch: PretrainBatch, enc: Encoded, mom: MomentumFeatures,
                  queues: NegativeQueue | None, tau: float = 0.07) -> tuple[Tensor, dict]:
    """Mean of image->text, text->image, image->image and text->text InfoNCE.

    Cross-modal positives are the paired item's momentum feature (view 1);
    single-modal positives are the momentum feature of the second view.
    Negatives come from the momentum queue of the key modality; with an
    empty queue the other items of the batch serve as negatives.
    """
    if (queues is None or queues.image.size == 0 or queues.text.size == 0) and batch.size < 2:
        raise StateError("empty negative queue and fewer than 2 items in batch")
    iq = None if queues is None else queues.image
    tq = None if queues is None else queues.text
    mi1, mi2 = mom.image
    mt1, mt2 = mom.text
    terms = {
        "i2t": _contrast(enc.img_feat, mt1, mt1, tq, batch.ids, tau),
        "t2i": _contrast(enc.txt_feat, mi1, mi1, iq, batch.ids, tau),
        "i2i": _contrast(enc.img_feat, mi2, mi2, iq, batch.ids, tau),
        "t2t": _contrast(enc.txt_feat, mt2, mt2, tq, batch.ids, tau),
    }
    loss = T.mul(T.add(T.add(terms["i2t"], terms["t2i"]), T.add(terms["i2i"], terms["t2t"])), 0.25)
    return loss, {k: float(v.data) for k, v in terms.items()}


# -- MLM ----------------------------------------------------------------------------

def mlm_logits(masked_tokens, image_seq: Tensor, params: ModelParams, cfg: EncoderConfig,
               positions) -> Tensor:
    """Vocabulary logits at ``positions`` (tuple of row/col arrays into the token grid)."""
    _, txt_seq = encode_text(masked_tokens, params, cfg)
    _, pad = text_inputs(masked_tokens, cfg)
    fused = fuse(txt_seq, image_seq, params, cfg, pad)
    rows, cols = positions
    h = fused[rows, cols + 1]  # +1 skips the CLS slot
    f = params["fusion"]
    return T.add(h @ f["mlm.w"], f["mlm.b"])


def mlm_loss(batch: PretrainBatch, image_seq: Tensor, params: ModelParams,
             cfg: EncoderConfig) -> tuple[Tensor, bool]:
    """Cross-entropy over masked positions; returns ``(loss, skipped)``.

    A batch with no masked position contributes 0 and is flagged as skipped.
    """
    rows, cols = np.nonzero(batch.mlm_labels >= 0)
    if rows.size == 0:
        return Tensor(0.0), True
    logits = mlm_logits(batch.mlm_tokens, image_seq, params, cfg, (rows, cols))
    return T.cross_entropy(logits, batch.mlm_labels[rows, cols]), False


# -- ITM ----------------------------------------------------------------------------

def itm_hard_negatives(sim_i2t: np.ndarray, rng: np.random.Generator, tau: float = 0.07):
    """Sample one in-batch negative text per image and one negative image per text.

    Sampling weights are softmax(similarity / tau) over the other items.
    Returns ``(neg_text_for_image, neg_image_for_text)`` index arrays.
    """
    sim = np.asarray(sim_i2t, dtype=np.float64)
    b = sim.shape[0]
    if b < 2:
        raise ParameterError("hard negative mining needs at least 2 items")

    def draw(s):
        z = s / tau
        np.fill_diagonal(z, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        w = np.exp(z)
        w /= w.sum(axis=1, keepdims=True)
        u = rng.random(b)
        cdf = np.cumsum(w, axis=1)
        idx = (cdf < u[:, None]).sum(axis=1)
        idx = np.minimum(idx, b - 1)
        # rounding at the top of the cdf must not land on the diagonal
        bad = idx == np.arange(b)
        for i in np.nonzero(bad)[0]:
            idx[i] = int(np.argmax(w[i]))
        return idx

    neg_text = draw(sim)
    neg_image = draw(sim.T)
    return neg_text, neg_image


def itm_logits(txt_seq: Tensor, img_seq: Tensor, txt_pad, params: ModelParams, cfg: EncoderConfig) -> Tensor:
    fused = fuse(txt_seq, img_seq, params, cfg, txt_pad)
    head = params["itm_head"]
    return T.add(fused[:, 0, :] @ head["w"], head["b"])


def itm_loss(enc: Encoded, neg_text: np.ndarray, neg_image: np.ndarray, params: ModelParams,
             cfg: EncoderConfig) -> Tensor:
    """2-way cross-entropy: B matched pairs vs 2B mined pairs, weighted 1:1."""
    b = enc.txt_seq.shape[0]
    ar = np.arange(b)
    t_idx = np.concatenate([ar, neg_text, ar])
    i_idx = np.concatenate([ar, ar, neg_image])
    txt = enc.txt_seq[t_idx]
    img = enc.img_seq[i_idx]
    logits = itm_logits(txt, img, enc.txt_pad[t_idx], params, cfg)
    labels = np.concatenate([np.ones(b), np.zeros(2 * b)]).astype(np.int64)
    weights = np.concatenate([np.full(b, 2.0), np.ones(2 * b)])
    return T.cross_entropy(logits, labels, weights)


# -- combined -------------------------------------------------------------------

@dataclass
class LossWeights:
    itc: float = 1.0
    mlm: float = 1.0
    itm: float = 1.0


def pretrain_loss(batch: PretrainBatch, params: ModelParams, state: MomentumState,
                  queues: NegativeQueue | None, cfg: EncoderConfig, rng: np.random.Generator,
                  tau: float = 0.07, weights: LossWeights | None = None, pairing=None):
    """Weighted ITC + MLM + ITM. Returns ``(loss, parts, momentum features)``.

    ``pairing`` overrides hard-negative sampling with fixed index arrays.
    """
    weights = weights or LossWeights()
    enc = encode_views(batch, params, cfg)
    mom = momentum_features(batch, state, cfg)
    l_itc, parts = itc_multiview(batch, enc, mom, queues, tau)
    l_mlm, skipped = mlm_loss(batch, enc.img_seq, params, cfg)
    if pairing is None:
        sim = enc.img_feat.data @ enc.txt_feat.data.T
        pairing = itm_hard_negatives(sim, rng, tau)
    l_itm = itm_loss(enc, pairing[0], pairing[1], params, cfg)
    total = T.add(T.add(T.mul(l_itc, weights.itc), T.mul(l_mlm, weights.mlm)), T.mul(l_itm, weights.itm))
    parts = {
        "itc": float(l_itc.data),
        "mlm": float(l_mlm.data),
        "itm": float(l_itm.data),
        "mlm_skipped": bool(skipped),
        **{f"itc_{k}": v for k, v in parts.items()},
    }
    return total, parts, mom
