"""Fine-tuning heads: relevance classifier and multitask retrieval (clicks + KD)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import EncoderConfig, ModelParams, embed_image, embed_text, encode_image, project
from .errors import ParameterError, StateError, ValidationError
from .tensor import Tensor

NEGATIVE, POSITIVE = 0, 1


def degree_to_label(degree: int) -> int:
    """Relevance degree 0 is negative; 1 and 2 are positive."""
    if degree not in (0, 1, 2):
        raise ValidationError(f"relevance degree must be 0, 1 or 2, got {degree}")
    return POSITIVE if degree >= 1 else NEGATIVE


# -- relevance model ------------------------------------------------------------

def relevance_logits_from_emb(q: Tensor, i: Tensor, head) -> Tensor:
    """MLP over [q; i; q*i] of projected query and image embeddings -> 2 logits.

    Unit embeddings have entries of order d**-0.5 (and products of order
    1/d), so the blocks are rescaled by sqrt(d) and d to keep features O(1).
    """
    single = q.ndim == 1
    if single:
        q = T.reshape(q, (1, q.shape[0]))
        i = T.reshape(i, (1, i.shape[0]))
    d = q.shape[1]
    x = T.concat([T.mul(q, d ** 0.5), T.mul(i, d ** 0.5), T.mul(T.mul(q, i), float(d))], axis=1)
    h = T.gelu(T.add(x @ head["w1"], head["b1"]))
    out = T.add(h @ head["w2"], head["b2"])
    return T.reshape(out, (2,)) if single else out


def relevance_logits(query_tokens, image_patches, params: ModelParams, cfg: EncoderConfig) -> Tensor:
    if "relevance_head" not in params.groups:
        raise StateError("params have no relevance_head group")
    q = embed_text(query_tokens, params, cfg)
    i = embed_image(image_patches, params, cfg)
    return relevance_logits_from_emb(q, i, params["relevance_head"])


def relevance_loss(logits: Tensor, degrees) -> Tensor:
    """Mean 2-class cross-entropy against binarised degrees."""
    degrees = np.atleast_1d(np.asarray(degrees, dtype=np.int64))
    if degrees.size == 0:
        raise ParameterError("relevance_loss needs a non-empty batch")
    labels = np.array([degree_to_label(int(d)) for d in degrees])
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, 2))
    return T.cross_entropy(logits, labels)


def positive_probability(logits: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, POSITIVE] / e.sum(axis=1)


def teacher_score(query_tokens, image_patches, teacher: ModelParams | None, cfg: EncoderConfig) -> np.ndarray:
    """Positive-class probability of the relevance model; no gradient reaches the teacher."""
    if teacher is None:
        raise StateError("teacher checkpoint not loaded")
    with T.no_grad():
        logits = relevance_logits(query_tokens, image_patches, teacher, cfg)
    p = positive_probability(logits.data)
    return p if np.asarray(query_tokens).ndim > 1 else p[:1]


def teacher_pair_scores(q_emb: np.ndarray, i_emb: np.ndarray, teacher: ModelParams) -> np.ndarray:
    """Teacher probability for row-aligned (query, image) embedding pairs -> [B]."""
    if q_emb.shape != i_emb.shape:
        raise ValidationError(f"query embeddings {q_emb.shape} vs image embeddings {i_emb.shape}")
    with T.no_grad():
        logits = relevance_logits_from_emb(Tensor(q_emb), Tensor(i_emb), teacher["relevance_head"])
    return positive_probability(logits.data)


# -- retrieval model ----------------------------------------------------------------

def click_contrastive_loss(q: Tensor, i: Tensor, tau: float = 0.07) -> Tensor:
    """Bidirectional in-batch InfoNCE: row k's positive is column k."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    b = q.shape[0]
    if b < 2:
        raise ParameterError("click contrastive loss needs a batch of at least 2")
    sim = T.mul(q @ T.transpose(i), 1.0 / tau)
    target = np.arange(b)
    q2i = T.cross_entropy(sim, target)
    i2q = T.cross_entropy(T.transpose(sim), target)
    return T.mul(T.add(q2i, i2q), 0.5)


def kd_loss(student_cos, teacher_p) -> Tensor:
    """Mean squared gap between (cos + 1) / 2 and the teacher probability."""
    s = student_cos if isinstance(student_cos, Tensor) else Tensor(student_cos)
    p = np.asarray(teacher_p, dtype=np.float64)
    if p.shape != s.shape:
        raise ValidationError(f"kd_loss: student shape {s.shape} vs teacher shape {p.shape}")
    tol = 1e-9
    if np.any(s.data < -1 - tol) or np.any(s.data > 1 + tol):
        raise ValidationError("student cosine outside [-1, 1]")
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError("teacher score outside [0, 1]")
    gap = T.add(T.mul(T.add(s, 1.0), 0.5), Tensor(-p))
    return T.mean(T.square(gap))


def multitask_loss(q: Tensor, i: Tensor, teacher_p: np.ndarray | None, tau: float = 0.07,
                   lam: float = 1.0) -> tuple[Tensor, dict]:
    """Click contrastive + lam * KD on the clicked pairs of the batch.

    Row k of ``q`` and ``i`` is a clicked pair and ``teacher_p[k]`` the
    teacher's probability that it is relevant.
    """
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    l_click = click_contrastive_loss(q, i, tau)
    if lam == 0:
        return l_click, {"click": float(l_click.data), "kd": 0.0}
    cos = T.sum(T.mul(q, i), axis=1)
    l_kd = kd_loss(cos, teacher_p)
    total = T.add(l_click, T.mul(l_kd, lam))
    return total, {"click": float(l_click.data), "kd": float(l_kd.data)}


# -- frozen-vision helpers ------------------------------------------------------------

def vision_cls_cache(patches: np.ndarray, params: ModelParams, cfg: EncoderConfig,
                     chunk: int = 128) -> np.ndarray:
    """CLS outputs of the (frozen) vision tower for a stack of images."""
    out = []
    with T.no_grad():
        for s in range(0, len(patches), chunk):
            out.append(encode_image(patches[s:s + chunk], params, cfg)[0].data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.dim))


def image_embeddings(cls_cache: np.ndarray, params: ModelParams) -> Tensor:
    return project(Tensor(cls_cache), params["projection_vision"])


def text_embeddings(tokens, params: ModelParams, cfg: EncoderConfig, chunk: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(tokens), chunk):
            out.append(embed_text(tokens[s:s + chunk], params, cfg).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.proj_dim))
