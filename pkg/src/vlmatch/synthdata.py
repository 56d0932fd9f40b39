"""Seeded synthetic multimodal corpus with known latent ground truth.

Every item has a unit latent ``z``. Its text is a fixed token code of the
quantised coordinates of ``z``; its image is a fixed linear map of ``z``
plus an appearance direction scaled by the item's attractiveness ``a`` and
Gaussian noise. Relevance degrees and click counts are computed from the
stored latents, so every metric can be recomputed without annotators.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import N_SPECIAL, PAD_ID
from .errors import ValidationError
from .seeding import substream


@dataclass(frozen=True)
class GenConfig:
    n_items: int = 512
    latent_dim: int = 8
    vocab_size: int = 128
    text_len: int = 8
    patch_grid: int = 4
    patch_dim: int = 8
    noise_sigma: float = 0.1
    text_noise: float = 0.05
    quant_levels: int = 8
    theta1: float = 0.4
    theta2: float = 0.8
    attract_gain: float = 1.0
    click_scale: float = 12.0
    click_candidates: int = 8
    impression_pool: int = 32
    relevance_per_query: int = 6
    seed: int = 0

    def __post_init__(self):
        if not self.theta2 > self.theta1:
            raise ValidationError(f"theta2 ({self.theta2}) must exceed theta1 ({self.theta1})")
        if self.noise_sigma < 0 or self.text_noise < 0:
            raise ValidationError("noise levels must be non-negative")
        for name in ("n_items", "latent_dim", "vocab_size", "text_len", "patch_grid", "patch_dim",
                     "quant_levels", "click_candidates", "impression_pool", "relevance_per_query"):
            if getattr(self, name) < 1:
                raise ValidationError(f"GenConfig.{name} must be >= 1")
        if self.text_len < self.latent_dim:
            raise ValidationError("text_len must be >= latent_dim (one token per latent coordinate)")
        if self.latent_dim * self.quant_levels > self.vocab_size - N_SPECIAL:
            raise ValidationError("vocab too small for latent_dim * quant_levels content tokens")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Item:
    id: int
    latent: np.ndarray
    tokens: np.ndarray
    patches: np.ndarray
    attractiveness: float


@dataclass
class RelevancePair:
    query_id: int
    image_id: int
    degree: int

    def __post_init__(self):
        if self.degree not in (0, 1, 2):
            raise ValidationError(f"relevance degree must be 0, 1 or 2, got {self.degree}")

    @property
    def label(self) -> int:
        return int(self.degree >= 1)


@dataclass
class ClickPair:
    query_id: int
    image_id: int
    clicks: int

    def __post_init__(self):
        if self.clicks < 2:
            raise ValidationError(f"click pairs need at least 2 clicks, got {self.clicks}")


@dataclass
class Corpus:
    config: GenConfig
    items: list[Item]
    relevance: list[RelevancePair]
    clicks: list[ClickPair]

    def __post_init__(self):
        self._by_id = {it.id: it for it in self.items}

    def item(self, i: int) -> Item:
        return self._by_id[i]

    @property
    def ids(self) -> np.ndarray:
        return np.array([it.id for it in self.items], dtype=np.int64)

    def latents(self) -> np.ndarray:
        return np.stack([it.latent for it in self.items])

    def tokens(self, ids=None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        return np.stack([self._by_id[int(i)].tokens for i in ids])

    def patches(self, ids=None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        return np.stack([self._by_id[int(i)].patches for i in ids])

    def degree(self, query_id: int, image_id: int) -> int:
        c = self.config
        return relevance_degree(self._by_id[query_id].latent, self._by_id[image_id].latent,
                                c.theta1, c.theta2)


# -- ground truth ---------------------------------------------------------------------

def relevance_degree(zq: np.ndarray, zi: np.ndarray, theta1: float, theta2: float) -> int:
    """2 if cos >= theta2, 1 if cos >= theta1, else 0 (closed lower bounds)."""
    c = float(np.dot(zq, zi) / (np.linalg.norm(zq) * np.linalg.norm(zi)))
    if c >= theta2:
        return 2
    if c >= theta1:
        return 1
    return 0


def degree_matrix(latents: np.ndarray, theta1: float, theta2: float) -> np.ndarray:
    z = latents / np.linalg.norm(latents, axis=1, keepdims=True)
    cos = z @ z.T
    return np.where(cos >= theta2, 2, np.where(cos >= theta1, 1, 0))


# -- generation ---------------------------------------------------------------------

def _token_code(cfg: GenConfig) -> np.ndarray:
    """Seeded bijection (coordinate, level) -> content token id."""
    rng = substream(cfg.seed, "gen.token_code")
    perm = rng.permutation(cfg.vocab_size - N_SPECIAL)[: cfg.latent_dim * cfg.quant_levels]
    return (perm + N_SPECIAL).reshape(cfg.latent_dim, cfg.quant_levels)


def quantize(z: np.ndarray, levels: int) -> np.ndarray:
    return np.clip(np.floor((z + 1.0) / 2.0 * levels), 0, levels - 1).astype(np.int64)


def text_for_latent(z: np.ndarray, cfg: GenConfig, code: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    q = quantize(z, cfg.quant_levels)
    toks = code[np.arange(cfg.latent_dim), q]
    out = np.full(cfg.text_len, PAD_ID, dtype=np.int64)
    out[: cfg.latent_dim] = toks
    drop = rng.random(cfg.latent_dim) < cfg.text_noise
    if drop.all():
        drop[0] = False
    out[: cfg.latent_dim][drop] = PAD_ID
    return out


def image_maps(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fixed latent->pixel map and the attractiveness appearance direction."""
    rng = substream(cfg.seed, "gen.image_map")
    n = cfg.patch_grid * cfg.patch_grid * cfg.patch_dim
    a_map = rng.normal(size=(n, cfg.latent_dim))
    appeal = rng.normal(size=n)
    return a_map, appeal


def image_for_latent(z, a, cfg: GenConfig, maps, rng) -> np.ndarray:
    a_map, appeal = maps
    flat = a_map @ z + cfg.attract_gain * (2.0 * a - 1.0) * appeal
    flat = flat + rng.normal(0.0, cfg.noise_sigma, size=flat.shape)
    return flat.reshape(cfg.patch_grid * cfg.patch_grid, cfg.patch_dim)


def generate_items(cfg: GenConfig) -> list[Item]:
    rng_z = substream(cfg.seed, "gen.latent")
    rng_a = substream(cfg.seed, "gen.attractiveness")
    rng_t = substream(cfg.seed, "gen.text_noise")
    rng_i = substream(cfg.seed, "gen.image_noise")
    z = rng_z.normal(size=(cfg.n_items, cfg.latent_dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    attract = rng_a.random(cfg.n_items)
    code = _token_code(cfg)
    maps = image_maps(cfg)
    items = []
    for i in range(cfg.n_items):
        items.append(Item(
            id=i,
            latent=z[i],
            tokens=text_for_latent(z[i], cfg, code, rng_t),
            patches=image_for_latent(z[i], attract[i], cfg, maps, rng_i),
            attractiveness=float(attract[i]),
        ))
    return items


def _round_robin(qi: int, cols: np.ndarray, deg_row: np.ndarray, ids: np.ndarray, k: int,
                 rng: np.random.Generator) -> list[RelevancePair]:
    """Draw up to ``k`` of ``cols`` for query row ``qi``, cycling through degrees 2, 1, 0."""
    buckets = [list(cols[deg_row[cols] == d]) for d in (2, 1, 0)]
    for b in buckets:
        rng.shuffle(b)
    out: list[RelevancePair] = []
    while len(out) < k and any(buckets):
        for b in buckets:
            if b and len(out) < k:
                j = b.pop()
                out.append(RelevancePair(int(ids[qi]), int(ids[j]), int(deg_row[j])))
    return out


def _check_buckets(pairs: list[RelevancePair]) -> None:
    counts = np.bincount([p.degree for p in pairs], minlength=3)
    if counts.sum() and (counts / counts.sum()).min() < 0.2:
        warnings.warn(f"relevance degree buckets below 20%: counts={counts.tolist()}", stacklevel=3)


def generate_relevance_pairs(items: list[Item], cfg: GenConfig) -> list[RelevancePair]:
    """Per query, draw pairs from each degree bucket in turn to balance labels."""
    if len(items) < 2:
        raise ValidationError("relevance pairs need at least 2 items")
    rng = substream(cfg.seed, "gen.relevance")
    ids = np.array([it.id for it in items])
    deg = degree_matrix(np.stack([it.latent for it in items]), cfg.theta1, cfg.theta2)
    cols = np.arange(len(items))
    pairs: list[RelevancePair] = []
    for qi in range(len(items)):
        pairs.extend(_round_robin(qi, cols, deg[qi], ids, cfg.relevance_per_query, rng))
    _check_buckets(pairs)
    pairs.sort(key=lambda p: (p.query_id, p.image_id))
    return pairs


def generate_candidate_pairs(corpus: "Corpus", sim: np.ndarray, pool: int, per_query: int,
                             seed: int) -> list[RelevancePair]:
    """Relevance pairs among each query's top-``pool`` images under a scoring model.

    ``sim[q, i]`` scores query item row q against image item row i (corpus
    order). Labels still come from the latents; only the candidate set
    depends on the model, the way annotated pairs come from a live system.
    """
    n = len(corpus.items)
    if sim.shape != (n, n):
        raise ValidationError(f"similarity matrix must be [{n}, {n}], got {sim.shape}")
    if pool < 1 or per_query < 1:
        raise ValidationError("pool and per_query must be >= 1")
    rng = substream(seed, "gen.candidates")
    ids = corpus.ids
    deg = degree_matrix(corpus.latents(), corpus.config.theta1, corpus.config.theta2)
    pool = min(pool, n)
    order = np.arange(n)
    pairs: list[RelevancePair] = []
    for qi in range(n):
        top = np.lexsort((order, -sim[qi]))[:pool]
        pairs.extend(_round_robin(qi, np.sort(top), deg[qi], ids, per_query, rng))
    _check_buckets(pairs)
    pairs.sort(key=lambda p: (p.query_id, p.image_id))
    return pairs


def truncated_poisson_mean(lam: float, floor: int = 2) -> float:
    """E[X | X >= floor] for X ~ Poisson(lam); only floor == 2 is used."""
    if floor != 2:
        raise ValueError("only floor=2 is supported")
    e = np.exp(-lam)
    return float((lam - lam * e) / (1.0 - e - lam * e))


def click_rate(zq, zi, a, scale: float) -> float:
    return scale * max(0.0, float(np.dot(zq, zi))) * a


def generate_clicks(items: list[Item], cfg: GenConfig) -> list[ClickPair]:
    """Poisson clicks on sampled (query, image) impressions; pairs below 2 clicks are dropped.

    Impressions for a query are drawn from its ``impression_pool`` nearest
    items by latent cosine, standing in for images an earlier matching
    system would have shown.
    """
    if len(items) < 2:
        raise ValidationError("click generation needs at least 2 items")
    rng = substream(cfg.seed, "gen.clicks")
    n = len(items)
    z = np.stack([it.latent for it in items])
    a = np.array([it.attractiveness for it in items])
    pool = min(cfg.impression_pool, n)
    k = min(cfg.click_candidates, pool)
    out: list[ClickPair] = []
    for qi in range(n):
        sims = z @ z[qi]
        near = np.lexsort((np.arange(n), -sims))[:pool]
        cand = near[np.sort(rng.choice(pool, size=k, replace=False))]
        lam = cfg.click_scale * np.maximum(0.0, z[cand] @ z[qi]) * a[cand]
        counts = rng.poisson(lam)
        for j, c in zip(cand, counts):
            if c >= 2:
                out.append(ClickPair(items[qi].id, items[j].id, int(c)))
    out.sort(key=lambda p: (p.query_id, p.image_id))
    return out


def generate_corpus(cfg: GenConfig) -> Corpus:
    items = generate_items(cfg)
    return Corpus(cfg, items, generate_relevance_pairs(items, cfg), generate_clicks(items, cfg))


# -- train/eval split -----------------------------------------------------------------

def split_queries(ids, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic query split into (train, held-out) id arrays."""
    ids = np.sort(np.asarray(ids, dtype=np.int64))
    rng = substream(seed, "data.split")
    perm = rng.permutation(len(ids))
    n_hold = max(1, int(round(holdout * len(ids))))
    return np.sort(ids[perm[n_hold:]]), np.sort(ids[perm[:n_hold]])


# -- JSON-lines IO ----------------------------------------------------------------------

def _dump_lines(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")


def _load_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_corpus(corpus: Corpus, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "items": d / "items.jsonl",
        "relevance": d / "relevance.jsonl",
        "clicks": d / "clicks.jsonl",
        "config": d / "gen_config.json",
    }
    _dump_lines(paths["items"], (
        {
            "id": it.id,
            "tokens": it.tokens.tolist(),
            "patches": it.patches.tolist(),
            "latent": it.latent.tolist(),
            "attractiveness": it.attractiveness,
        }
        for it in sorted(corpus.items, key=lambda it: it.id)
    ))
    _dump_lines(paths["relevance"], (
        {"query_id": p.query_id, "image_id": p.image_id, "degree": p.degree} for p in corpus.relevance
    ))
    _dump_lines(paths["clicks"], (
        {"query_id": p.query_id, "image_id": p.image_id, "clicks": p.clicks} for p in corpus.clicks
    ))
    paths["config"].write_text(json.dumps(corpus.config.to_dict(), sort_keys=True, indent=1) + "\n")
    return paths


def load_items(path) -> list[Item]:
    return [
        Item(
            id=int(r["id"]),
            latent=np.array(r["latent"], dtype=np.float64),
            tokens=np.array(r["tokens"], dtype=np.int64),
            patches=np.array(r["patches"], dtype=np.float64),
            attractiveness=float(r["attractiveness"]),
        )
        for r in _load_lines(path)
    ]


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    cfg_path = d / "gen_config.json"
    cfg = GenConfig.from_dict(json.loads(cfg_path.read_text())) if cfg_path.exists() else GenConfig()
    items = load_items(d / "items.jsonl")
    rel = [RelevancePair(r["query_id"], r["image_id"], r["degree"]) for r in _load_lines(d / "relevance.jsonl")]
    clicks = [ClickPair(r["query_id"], r["image_id"], r["clicks"]) for r in _load_lines(d / "clicks.jsonl")]
    return Corpus(cfg, items, rel, clicks)
