"""Toy transformer towers: vision, text, cross-attention fusion, projections.

All encoders accept a single example or a batch. Text token id 0 is padding,
1 is the CLS token prepended by :func:`encode_text`, 2 is ``[MASK]``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError, ValidationError
from .tensor import Tensor

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
N_SPECIAL = 3

GROUPS = (
    "vision",
    "text",
    "fusion",
    "projection_vision",
    "projection_text",
    "itm_head",
    "relevance_head",
)
MOMENTUM_GROUPS = ("vision", "text", "projection_vision", "projection_text")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 32
    layers: int = 2
    heads: int = 2
    vocab_size: int = 128
    max_text_len: int = 16
    patch_grid: int = 4
    patch_dim: int = 8
    proj_dim: int = 16
    mlp_ratio: int = 4
    fusion_layers: int = 1
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValidationError(f"EncoderConfig.{f.name} must be positive")
        if self.dim % self.heads:
            raise ValidationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.vocab_size <= N_SPECIAL:
            raise ValidationError("vocab_size must exceed the special-token count")

    @property
    def n_patches(self) -> int:
        return self.patch_grid * self.patch_grid

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelParams:
    """Named parameter groups plus the set of frozen group names."""

    groups: dict[str, dict[str, Tensor]]
    frozen: set[str] = field(default_factory=set)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, group: str) -> dict[str, Tensor]:
        return self.groups[group]

    def named(self) -> list[tuple[str, Tensor]]:
        out = []
        for g in sorted(self.groups):
            for name in sorted(self.groups[g]):
                out.append((f"{g}.{name}", self.groups[g][name]))
        return out

    def tensors(self, groups=None) -> list[Tensor]:
        keys = sorted(self.groups) if groups is None else groups
        return [self.groups[g][n] for g in keys if g in self.groups for n in sorted(self.groups[g])]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named() if n.split(".", 1)[0] not in self.frozen]

    def freeze(self, *groups: str) -> None:
        self.frozen.update(groups)
        self._sync_flags()

    def unfreeze(self, *groups: str) -> None:
        self.frozen.difference_update(groups)
        self._sync_flags()

    def _sync_flags(self) -> None:
        for g, params in self.groups.items():
            for t in params.values():
                t.requires_grad = g not in self.frozen

    def copy(self) -> "ModelParams":
        groups = {
            g: {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in ps.items()}
            for g, ps in self.groups.items()
        }
        return ModelParams(groups, set(self.frozen), dict(self.meta))

    def n_params(self, groups=None) -> int:
        return int(np.sum([t.size for t in self.tensors(groups)]))


# -- initialisation -------------------------------------------------------------

def _normal(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def _attn_params(p, prefix, d, rng):
    for w in ("q", "k", "v", "o"):
        p[f"{prefix}.w{w}"] = _normal(rng, (d, d), d ** -0.5)
        p[f"{prefix}.b{w}"] = _zeros(d)


def _block_params(p, prefix, cfg, rng, cross=False):
    d = cfg.dim
    h = cfg.dim * cfg.mlp_ratio
    p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"] = _ones(d), _zeros(d)
    _attn_params(p, f"{prefix}.attn", d, rng)
    if cross:
        p[f"{prefix}.lnx.g"], p[f"{prefix}.lnx.b"] = _ones(d), _zeros(d)
        _attn_params(p, f"{prefix}.xattn", d, rng)
    p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"] = _ones(d), _zeros(d)
    p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"] = _normal(rng, (d, h), d ** -0.5), _zeros(h)
    p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"] = _normal(rng, (h, d), h ** -0.5), _zeros(d)


def init_vision(cfg: EncoderConfig, rng) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    p["patch.w"] = _normal(rng, (cfg.patch_dim, cfg.dim), cfg.patch_dim ** -0.5)
    p["patch.b"] = _zeros(cfg.dim)
    p["cls"] = _normal(rng, (cfg.dim,), cfg.init_std)
    p["pos"] = _normal(rng, (cfg.n_patches + 1, cfg.dim), cfg.init_std)
    for i in range(cfg.layers):
        _block_params(p, f"block{i}", cfg, rng)
    p["ln_f.g"], p["ln_f.b"] = _ones(cfg.dim), _zeros(cfg.dim)
    return p


def init_text(cfg: EncoderConfig, rng) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    p["tok"] = _normal(rng, (cfg.vocab_size, cfg.dim), cfg.init_std)
    p["pos"] = _normal(rng, (cfg.max_text_len + 1, cfg.dim), cfg.init_std)
    for i in range(cfg.layers):
        _block_params(p, f"block{i}", cfg, rng)
    p["ln_f.g"], p["ln_f.b"] = _ones(cfg.dim), _zeros(cfg.dim)
    return p


def init_fusion(cfg: EncoderConfig, rng) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    for i in range(cfg.fusion_layers):
        _block_params(p, f"block{i}", cfg, rng, cross=True)
    p["ln_f.g"], p["ln_f.b"] = _ones(cfg.dim), _zeros(cfg.dim)
    p["mlm.w"] = _normal(rng, (cfg.dim, cfg.vocab_size), cfg.init_std)
    p["mlm.b"] = _zeros(cfg.vocab_size)
    return p


def init_projection(cfg: EncoderConfig, rng) -> dict[str, Tensor]:
    return {"w": _normal(rng, (cfg.dim, cfg.proj_dim), cfg.dim ** -0.5), "b": _zeros(cfg.proj_dim)}


def init_relevance_head(cfg: EncoderConfig, rng) -> dict[str, Tensor]:
    d_in = 3 * cfg.proj_dim
    hidden = cfg.proj_dim * 2
    return {
        "w1": _normal(rng, (d_in, hidden), d_in ** -0.5),
        "b1": _zeros(hidden),
        "w2": _normal(rng, (hidden, 2), cfg.init_std),
        "b2": _zeros(2),
    }


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> ModelParams:
    """Linear maps draw from N(0, 1/fan_in); embeddings, positions and output
    heads use ``cfg.init_std``. Biases start at zero, layer-norm gains at one."""
    groups = {
        "vision": init_vision(cfg, rng),
        "text": init_text(cfg, rng),
        "fusion": init_fusion(cfg, rng),
        "projection_vision": init_projection(cfg, rng),
        "projection_text": init_projection(cfg, rng),
        "itm_head": {"w": _normal(rng, (cfg.dim, 2), cfg.init_std), "b": _zeros(2)},
        "relevance_head": init_relevance_head(cfg, rng),
    }
    return ModelParams(groups)


# -- building blocks ------------------------------------------------------------

def attention(xq: Tensor, xkv: Tensor, p, prefix: str, heads: int, key_pad=None) -> Tensor:
    """Multi-head scaled dot-product attention, batched as [B, L, D].

    ``key_pad`` is a boolean [B, Lk] array, true where the key is padding.
    """
    b, lq, d = xq.shape
    lk = xkv.shape[1]
    dh = d // heads
    q = T.add(xq @ p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = T.add(xkv @ p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = T.add(xkv @ p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    q = T.transpose(T.reshape(q, (b, lq, heads, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (b, lk, heads, dh)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(v, (b, lk, heads, dh)), (0, 2, 1, 3))
    scores = T.mul(q @ k, 1.0 / math.sqrt(dh))
    if key_pad is not None and np.any(key_pad):
        scores = T.masked_fill(scores, np.asarray(key_pad)[:, None, None, :])
    ctx = T.softmax(scores, axis=-1) @ v
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
    return T.add(ctx @ p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _mlp(x, p, prefix):
    h = T.gelu(T.add(x @ p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return T.add(h @ p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _ln(x, p, prefix, eps):
    return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], eps)


def encoder_block(x, p, prefix, cfg, key_pad=None):
    h = _ln(x, p, f"{prefix}.ln1", cfg.ln_eps)
    x = T.add(x, attention(h, h, p, f"{prefix}.attn", cfg.heads, key_pad))
    x = T.add(x, _mlp(_ln(x, p, f"{prefix}.ln2", cfg.ln_eps), p, f"{prefix}.mlp"))
    return x


def fusion_block(x, img, p, prefix, cfg, key_pad=None):
    h = _ln(x, p, f"{prefix}.ln1", cfg.ln_eps)
    x = T.add(x, attention(h, h, p, f"{prefix}.attn", cfg.heads, key_pad))
    h = _ln(x, p, f"{prefix}.lnx", cfg.ln_eps)
    x = T.add(x, attention(h, img, p, f"{prefix}.xattn", cfg.heads))
    x = T.add(x, _mlp(_ln(x, p, f"{prefix}.ln2", cfg.ln_eps), p, f"{prefix}.mlp"))
    return x


# -- towers -----------------------------------------------------------------------

def _params_group(params, group):
    return params[group] if isinstance(params, ModelParams) else params


def encode_image(patches, params, cfg: EncoderConfig):
    """Encode a patch grid ``[P, patch_dim]`` or a batch ``[B, P, patch_dim]``.

    Returns ``(cls, seq)``; ``seq`` has ``P + 1`` rows with the CLS summary first.
    """
    p = _params_group(params, "vision")
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != (cfg.n_patches, cfg.patch_dim):
        raise DimensionError(
            f"image patches must be [{cfg.n_patches}, {cfg.patch_dim}], got {patches.shape}"
        )
    b = x.shape[0]
    h = T.add(x @ p["patch.w"], p["patch.b"])
    h = T.concat([Tensor(np.zeros((b, 1, cfg.dim))), h], axis=1)
    lead = T.concat([T.reshape(p["cls"], (1, cfg.dim)), Tensor(np.zeros((cfg.n_patches, cfg.dim)))])
    h = _add_pos(h, T.add(p["pos"], lead))
    for i in range(cfg.layers):
        h = encoder_block(h, p, f"block{i}", cfg)
    h = _ln(h, p, "ln_f", cfg.ln_eps)
    cls_out = h[:, 0, :]
    if single:
        return cls_out[0], h[0]
    return cls_out, h


def _add_pos(h: Tensor, pos: Tensor) -> Tensor:
    """Add the first ``L`` rows of ``pos`` to every sequence in the batch."""
    b, length, d = h.shape
    rows = pos[:length] if length != pos.shape[0] else pos
    flat = T.add(T.reshape(h, (b, length * d)), T.reshape(rows, (length * d,)))
    return T.reshape(flat, (b, length, d))


def text_inputs(tokens, cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Validate tokens and return ``(ids with CLS prepended, padding mask)``."""
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"tokens must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[1] > cfg.max_text_len:
        raise DimensionError(f"text length {arr.shape[1]} exceeds max_text_len {cfg.max_text_len}")
    if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    ids = np.concatenate([np.full((arr.shape[0], 1), CLS_ID, dtype=np.int64), arr], axis=1)
    return ids, ids == PAD_ID


def encode_text(tokens, params, cfg: EncoderConfig):
    """Encode token ids (CLS is prepended here). Padding keys are masked."""
    p = _params_group(params, "text")
    single = np.asarray(tokens).ndim == 1
    ids, pad = text_inputs(tokens, cfg)
    h = _add_pos(T.embedding(p["tok"], ids), p["pos"])
    for i in range(cfg.layers):
        h = encoder_block(h, p, f"block{i}", cfg, pad)
    h = _ln(h, p, "ln_f", cfg.ln_eps)
    cls_out = h[:, 0, :]
    if single:
        return cls_out[0], h[0]
    return cls_out, h


def fuse(text_seq: Tensor, image_seq: Tensor, params, cfg: EncoderConfig, text_pad=None) -> Tensor:
    """Cross-attend text positions (queries) over image positions (keys/values)."""
    p = _params_group(params, "fusion")
    single = text_seq.ndim == 2
    if single:
        text_seq = T.reshape(text_seq, (1,) + text_seq.shape)
        image_seq = T.reshape(image_seq, (1,) + image_seq.shape)
        if text_pad is not None:
            text_pad = np.asarray(text_pad)[None, :]
    if text_seq.shape[-1] != cfg.dim or image_seq.shape[-1] != cfg.dim:
        raise DimensionError(
            f"fuse: widths {text_seq.shape[-1]} / {image_seq.shape[-1]} must equal dim {cfg.dim}"
        )
    if text_seq.shape[0] != image_seq.shape[0]:
        raise DimensionError(f"fuse: batch sizes {text_seq.shape[0]} and {image_seq.shape[0]} differ")
    h = text_seq
    for i in range(cfg.fusion_layers):
        h = fusion_block(h, image_seq, p, f"block{i}", cfg, text_pad)
    h = _ln(h, p, "ln_f", cfg.ln_eps)
    return h[0] if single else h


def project(cls: Tensor, head) -> Tensor:
    """Linear map followed by L2 normalisation onto the unit sphere."""
    if cls.ndim == 1:
        row = T.reshape(cls, (1, cls.shape[0]))
        return T.reshape(project(row, head), (head["w"].shape[1],))
    return T.l2_normalize(T.add(cls @ head["w"], head["b"]))


def embed_text(tokens, params: ModelParams, cfg: EncoderConfig) -> Tensor:
    cls, _ = encode_text(tokens, params, cfg)
    return project(cls, params["projection_text"])


def embed_image(patches, params: ModelParams, cfg: EncoderConfig) -> Tensor:
    cls, _ = encode_image(patches, params, cfg)
    return project(cls, params["projection_vision"])


# -- momentum encoders ------------------------------------------------------------

@dataclass
class MomentumState:
    """EMA shadows of the vision and text towers and their projection heads."""

    shadow: ModelParams
    m: float = 0.99

    @classmethod
    def from_online(cls, online: ModelParams, m: float = 0.99) -> "MomentumState":
        if not 0.0 <= m < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {m}")
        groups = {
            g: {n: Tensor(t.data.copy()) for n, t in online[g].items()} for g in MOMENTUM_GROUPS
        }
        return cls(ModelParams(groups), m)


def momentum_update(online: ModelParams, state: MomentumState, m: float | None = None) -> MomentumState:
    """shadow <- m * shadow + (1 - m) * online, in place, for the momentum groups."""
    m = state.m if m is None else m
    if not 0.0 <= m < 1.0:
        raise ParameterError(f"momentum must lie in [0, 1), got {m}")
    for g in MOMENTUM_GROUPS:
        for name, sh in state.shadow[g].items():
            src = online[g][name]
            if src.shape != sh.shape:
                raise DimensionError(f"momentum shape mismatch for {g}.{name}: {src.shape} vs {sh.shape}")
            sh.data = m * sh.data + (1.0 - m) * src.data
    return state
