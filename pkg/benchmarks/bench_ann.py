"""Compiled vs pure-Python HNSW kernels: build time, query latency, recall@10.

    python benchmarks/bench_ann.py --n 2000 --dim 16 --queries 200
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from vlmatch import index as ix


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def bench(backend, ids, vecs, queries, k, ef_list, M, efc):
    t = time.perf_counter()
    idx = ix.build(ids, vecs, ann=True, M=M, ef_construction=efc, seed=0, backend=backend)
    build_s = time.perf_counter() - t
    exact = [set(ix.search_exact(idx, q, k)[0].tolist()) for q in queries]
    rows = []
    for ef in ef_list:
        t = time.perf_counter()
        found = [ix.search_ann(idx, q, k, ef)[0] for q in queries]
        per_q = (time.perf_counter() - t) / len(queries)
        recall = np.mean([len(set(f.tolist()) & e) / k for f, e in zip(found, exact)])
        rows.append((ef, per_q * 1e6, recall))
    return build_s, rows, idx


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--M", type=int, default=8)
    ap.add_argument("--ef-construction", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    rng = np.random.default_rng(a.seed)
    vecs = unit_rows(rng, a.n, a.dim)
    queries = unit_rows(rng, a.queries, a.dim)
    ids = np.arange(a.n)
    backends = ix.available_backends()
    print(f"n={a.n} d={a.dim} queries={a.queries} M={a.M} ef_construction={a.ef_construction}")
    print(f"backends: {', '.join(backends)} (default {ix.DEFAULT_BACKEND})")
    print(f"{'backend':<10}{'build s':>10}{'ef':>6}{'us/query':>12}{'recall@10':>11}")
    graphs = {}
    for b in backends:
        build_s, rows, idx = bench(b, ids, vecs, queries, a.k, (16, 32, 64), a.M, a.ef_construction)
        graphs[b] = idx
        for j, (ef, us, rec) in enumerate(rows):
            head = f"{b:<10}{build_s:>10.2f}" if j == 0 else " " * 20
            print(f"{head}{ef:>6}{us:>12.1f}{rec:>11.3f}")
    if len(graphs) == 2:
        same = ix.encode_index(graphs["compiled"]) == ix.encode_index(graphs["python"])
        print(f"identical graphs across backends: {same}")


if __name__ == "__main__":
    main()
