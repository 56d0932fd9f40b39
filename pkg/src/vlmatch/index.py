"""Immutable embedding index: exact k-NN plus a hierarchical graph (HNSW-style) search.

Items are stored sorted by id, so the internal row order doubles as the
ascending-id tie-break used by both search modes.

The graph kernels come from the compiled ``_ann_ext`` module when it is
importable and from ``_ann_py`` otherwise. ``VLMATCH_ANN_BACKEND=python``
(or ``compiled``) forces the choice; both produce identical graphs.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _ann_py
from .errors import DimensionError, FormatError, ParameterError, StateError, ValidationError, VersionError
from .seeding import substream

try:
    from . import _ann_ext
except ImportError:  # pragma: no cover - depends on the build
    _ann_ext = None

UNIT_TOL = 1e-9
INDEX_MAGIC = b"VLIX"
INDEX_VERSION = 1
EMB_MAGIC = b"VLEB"
_FLAG_GRAPH = 1


def available_backends() -> list[str]:
    return ["compiled", "python"] if _ann_ext is not None else ["python"]


def _default_backend() -> str:
    forced = os.environ.get("VLMATCH_ANN_BACKEND", "").strip().lower()
    if forced:
        if forced not in ("compiled", "python"):
            raise ParameterError(f"VLMATCH_ANN_BACKEND must be 'compiled' or 'python', got {forced!r}")
        if forced == "compiled" and _ann_ext is None:
            raise StateError("compiled ANN backend requested but vlmatch._ann_ext is not built")
        return forced
    return "compiled" if _ann_ext is not None else "python"


DEFAULT_BACKEND = _default_backend()


def _kernels(backend: str):
    if backend == "compiled":
        if _ann_ext is None:
            raise StateError("compiled ANN backend is not available")
        return _ann_ext
    if backend == "python":
        return _ann_py
    raise ParameterError(f"unknown ANN backend {backend!r}")


@dataclass(frozen=True)
class AnnGraph:
    levels: np.ndarray          # [n] top layer of each node
    adjacency: tuple            # per layer: [n, cap] int64 neighbour rows
    counts: tuple               # per layer: [n] int64 valid entries per row
    entry: int
    M: int
    ef_construction: int
    seed: int

    @property
    def n_layers(self) -> int:
        return len(self.adjacency)

    def neighbors(self, node: int, layer: int = 0) -> np.ndarray:
        return self.adjacency[layer][node, : self.counts[layer][node]].copy()


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: np.ndarray
    vectors: np.ndarray
    graph: AnnGraph | None = None
    backend: str = "python"

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def has_graph(self) -> bool:
        return self.graph is not None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _check_items(ids, vectors) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(ids)
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise DimensionError(f"vectors must be [n, dim], got shape {vectors.shape}")
    if ids.ndim != 1 or len(ids) != len(vectors):
        raise DimensionError(f"{len(ids)} ids for {len(vectors)} vectors")
    if len(ids) == 0:
        raise ValidationError("index needs at least one item")
    if not np.issubdtype(ids.dtype, np.integer) or np.any(ids < 0):
        raise ValidationError("ids must be non-negative integers")
    ids = ids.astype(np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ValidationError("duplicate id in index build")
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValidationError("index vectors must be unit-norm (within 1e-9)")
    return ids, vectors


def build(ids, vectors, ann: bool = False, M: int = 8, ef_construction: int = 64,
          seed: int = 0, backend: str | None = None) -> EmbeddingIndex:
    ids, vectors = _check_items(ids, vectors)
    order = np.argsort(ids, kind="stable")
    ids, vectors = _readonly(ids[order]), _readonly(vectors[order])
    backend = backend or DEFAULT_BACKEND
    if not ann:
        _kernels(backend)
        return EmbeddingIndex(ids, vectors, None, backend)
    if M < 2:
        raise ParameterError(f"M must be >= 2, got {M}")
    if ef_construction < 1:
        raise ParameterError(f"ef_construction must be >= 1, got {ef_construction}")
    if seed < 0:
        raise ParameterError(f"seed must be >= 0, got {seed}")
    graph = _build_graph(vectors, M, ef_construction, seed, _kernels(backend))
    return EmbeddingIndex(ids, vectors, graph, backend)


def _draw_levels(n: int, M: int, seed: int) -> np.ndarray:
    u = 1.0 - substream(seed, "index.levels").random(n)  # (0, 1]
    return np.floor(-np.log(u) / math.log(M)).astype(np.int64)


def _build_graph(vectors, M, ef_construction, seed, kern) -> AnnGraph:
    n = len(vectors)
    levels = _draw_levels(n, M, seed)
    top = int(levels.max())
    caps = [2 * M] + [M] * top
    adj = [np.full((n, cap), -1, dtype=np.int64) for cap in caps]
    counts = [np.zeros(n, dtype=np.int64) for _ in caps]
    entry, entry_level = 0, int(levels[0])

    def link(layer: int, a: int, b: int) -> None:
        cap = caps[layer]
        row, cnt = adj[layer][a], counts[layer][a]
        if cnt < cap:
            row[cnt] = b
            counts[layer][a] = cnt + 1
            return
        cand = np.append(row[:cnt], b)
        sims = vectors[cand] @ vectors[a]
        order = np.lexsort((cand, -sims))
        keep = kern.select_neighbors(vectors, cand[order], sims[order], cap)
        row[:] = -1
        row[: len(keep)] = keep
        counts[layer][a] = len(keep)

    for node in range(1, n):
        q = vectors[node]
        lvl = int(levels[node])
        eps = [entry]
        for layer in range(entry_level, lvl, -1):
            found, _ = kern.search_layer(vectors, adj[layer], counts[layer], q, eps, 1)
            eps = [int(found[0])]
        for layer in range(min(lvl, entry_level), -1, -1):
            found, sims = kern.search_layer(vectors, adj[layer], counts[layer], q, eps, ef_construction)
            chosen = kern.select_neighbors(vectors, found, sims, M)
            for nb in chosen:
                nb = int(nb)
                link(layer, node, nb)
                link(layer, nb, node)
            eps = [int(x) for x in found]
        if lvl > entry_level:
            entry, entry_level = node, lvl

    return AnnGraph(_readonly(levels), tuple(_readonly(a) for a in adj),
                    tuple(_readonly(c) for c in counts), entry, M, ef_construction, seed)


def _check_query(index: EmbeddingIndex, query, k: int) -> np.ndarray:
    q = np.ascontiguousarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise DimensionError(f"query shape {q.shape} does not match index width {index.dim}")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    return q


def search_exact(index: EmbeddingIndex, query, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k (ids, cosines): scores descending, ties by ascending id."""
    q = _check_query(index, query, k)
    sims = index.vectors @ q
    order = np.lexsort((index.ids, -sims))[:k]
    return index.ids[order].copy(), sims[order]


def search_ann(index: EmbeddingIndex, query, k: int, ef_search: int = 32) -> tuple[np.ndarray, np.ndarray]:
    q = _check_query(index, query, k)
    if index.graph is None:
        raise StateError("index was built without an ANN graph")
    if ef_search < k:
        raise ParameterError(f"ef_search ({ef_search}) must be >= k ({k})")
    g = index.graph
    kern = _kernels(index.backend)
    eps = [g.entry]
    for layer in range(g.n_layers - 1, 0, -1):
        found, _ = kern.search_layer(index.vectors, g.adjacency[layer], g.counts[layer], q, eps, 1)
        eps = [int(found[0])]
    found, _ = kern.search_layer(index.vectors, g.adjacency[0], g.counts[0], q, eps, ef_search)
    rows = found[:k]
    return index.ids[rows].copy(), index.vectors[rows] @ q


def search(index: EmbeddingIndex, query, k: int, mode: str = "exact", ef_search: int = 32):
    if mode == "exact":
        return search_exact(index, query, k)
    if mode == "ann":
        return search_ann(index, query, k, ef_search)
    raise ParameterError(f"search mode must be 'exact' or 'ann', got {mode!r}")


# -- binary formats -----------------------------------------------------------------

def encode_index(index: EmbeddingIndex) -> bytes:
    n, d = index.vectors.shape
    g = index.graph
    flags = _FLAG_GRAPH if g is not None else 0
    parts = [INDEX_MAGIC, struct.pack("<IQQI", INDEX_VERSION, n, d, flags),
             index.ids.astype("<u8").tobytes(), index.vectors.astype("<f8").tobytes()]
    if g is not None:
        parts.append(struct.pack("<IIQqI", g.M, g.ef_construction, g.seed, g.entry, g.n_layers))
        parts.append(g.levels.astype("<u4").tobytes())
        for layer in range(g.n_layers):
            parts.append(struct.pack("<I", g.adjacency[layer].shape[1]))
            cnt = g.counts[layer]
            for node in range(n):
                c = int(cnt[node])
                parts.append(struct.pack("<I", c))
                parts.append(g.adjacency[layer][node, :c].astype("<u8").tobytes())
    return b"".join(parts)


def save_index(index: EmbeddingIndex, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_index(index))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes in {self.what}")


def decode_index(buf: bytes, backend: str | None = None) -> EmbeddingIndex:
    r = _Reader(buf, "index file")
    if r.take(4) != INDEX_MAGIC:
        raise FormatError("bad index magic")
    version, n, d, flags = r.unpack("<IQQI")
    if version != INDEX_VERSION:
        raise VersionError(f"index version {version}, expected {INDEX_VERSION}")
    ids = r.array("<u8", n).astype(np.int64)
    vectors = r.array("<f8", n * d).astype(np.float64).reshape(n, d)
    graph = None
    if flags & _FLAG_GRAPH:
        M, efc, seed, entry, n_layers = r.unpack("<IIQqI")
        levels = r.array("<u4", n).astype(np.int64)
        adj, counts = [], []
        for _ in range(n_layers):
            (cap,) = r.unpack("<I")
            a = np.full((n, cap), -1, dtype=np.int64)
            c = np.zeros(n, dtype=np.int64)
            for node in range(n):
                (cnt,) = r.unpack("<I")
                if cnt > cap:
                    raise FormatError(f"node {node} lists {cnt} neighbours, capacity {cap}")
                row = r.array("<u8", cnt).astype(np.int64)
                if np.any(row >= n):
                    raise FormatError(f"node {node} references a missing neighbour")
                a[node, :cnt] = row
                c[node] = cnt
            adj.append(_readonly(a))
            counts.append(_readonly(c))
        if not 0 <= entry < max(n, 1):
            raise FormatError(f"entry point {entry} out of range")
        graph = AnnGraph(_readonly(levels), tuple(adj), tuple(counts), int(entry), M, efc, seed)
    r.done()
    ids, vectors = _check_items(ids, vectors)
    if np.any(np.diff(ids) <= 0):
        raise FormatError("index ids are not stored in ascending order")
    backend = backend or DEFAULT_BACKEND
    _kernels(backend)
    return EmbeddingIndex(_readonly(ids), _readonly(vectors), graph, backend)


def load_index(path, backend: str | None = None) -> EmbeddingIndex:
    return decode_index(Path(path).read_bytes(), backend)


def encode_embeddings(ids, vectors) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or len(ids) != len(vectors):
        raise DimensionError(f"{len(ids)} ids for vectors of shape {vectors.shape}")
    n, d = vectors.shape
    return b"".join([EMB_MAGIC, struct.pack("<QQ", n, d), ids.astype("<u8").tobytes(),
                     vectors.astype("<f8").tobytes()])


def save_embeddings(ids, vectors, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_embeddings(ids, vectors))
    os.replace(tmp, path)
    return path


def decode_embeddings(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    r = _Reader(buf, "embedding file")
    if r.take(4) != EMB_MAGIC:
        raise FormatError("bad embedding magic")
    n, d = r.unpack("<QQ")
    ids = r.array("<u8", n).astype(np.int64)
    vectors = r.array("<f8", n * d).astype(np.float64).reshape(n, d)
    r.done()
    return ids, vectors


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    return decode_embeddings(Path(path).read_bytes())
