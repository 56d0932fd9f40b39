# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled graph search kernels; same contract as ``_ann_py``."""

import numpy as np
cimport numpy as cnp
from libcpp.pair cimport pair
from libcpp.queue cimport priority_queue
from libcpp.vector cimport vector

cnp.import_array()


cdef inline double _dot(const double[:, ::1] v, Py_ssize_t row, const double* q, Py_ssize_t d) nogil:
    cdef double s = 0.0
    cdef Py_ssize_t j
    for j in range(d):
        s += v[row, j] * q[j]
    return s


def search_layer(const double[:, ::1] vectors, const cnp.int64_t[:, ::1] adj,
                 const cnp.int64_t[::1] counts, const double[::1] query,
                 entries, Py_ssize_t ef):
    cdef Py_ssize_t n = vectors.shape[0]
    cdef Py_ssize_t d = vectors.shape[1]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] visited_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] visited = visited_arr
    # cand: max-heap on (sim, -id) -> best first, lower id on ties
    cdef priority_queue[pair[double, cnp.int64_t]] cand
    # best: max-heap on (-sim, id) -> root is the worst kept (lowest sim, highest id)
    cdef priority_queue[pair[double, cnp.int64_t]] best
    cdef const double* q = &query[0]
    cdef cnp.int64_t e, c
    cdef double s, worst_s
    cdef cnp.int64_t worst_id
    cdef Py_ssize_t k, deg

    for py_e in entries:
        e = py_e
        if visited[e]:
            continue
        visited[e] = 1
        s = _dot(vectors, e, q, d)
        cand.push(pair[double, cnp.int64_t](s, -e))
        best.push(pair[double, cnp.int64_t](-s, e))
        if <Py_ssize_t>best.size() > ef:
            best.pop()

    with nogil:
        while not cand.empty():
            s = cand.top().first
            c = -cand.top().second
            cand.pop()
            if <Py_ssize_t>best.size() >= ef and s < -best.top().first:
                break
            deg = counts[c]
            for k in range(deg):
                e = adj[c, k]
                if visited[e]:
                    continue
                visited[e] = 1
                s = _dot(vectors, e, q, d)
                if <Py_ssize_t>best.size() < ef:
                    cand.push(pair[double, cnp.int64_t](s, -e))
                    best.push(pair[double, cnp.int64_t](-s, e))
                else:
                    worst_s = -best.top().first
                    worst_id = best.top().second
                    if s > worst_s or (s == worst_s and e < worst_id):
                        cand.push(pair[double, cnp.int64_t](s, -e))
                        best.push(pair[double, cnp.int64_t](-s, e))
                        if <Py_ssize_t>best.size() > ef:
                            best.pop()

    cdef Py_ssize_t m = best.size()
    ids = np.empty(m, dtype=np.int64)
    sims = np.empty(m, dtype=np.float64)
    cdef cnp.int64_t[::1] ids_v = ids
    cdef double[::1] sims_v = sims
    # pops come out worst first
    cdef Py_ssize_t i = m - 1
    while not best.empty():
        sims_v[i] = -best.top().first
        ids_v[i] = best.top().second
        best.pop()
        i -= 1
    return ids, sims


def select_neighbors(const double[:, ::1] vectors, cand_ids, cand_sims, Py_ssize_t m):
    cdef cnp.int64_t[::1] ids = np.ascontiguousarray(cand_ids, dtype=np.int64)
    cdef double[::1] sims = np.ascontiguousarray(cand_sims, dtype=np.float64)
    cdef Py_ssize_t n = ids.shape[0]
    cdef Py_ssize_t d = vectors.shape[1]
    if n <= m:
        return np.asarray(ids).copy()
    cdef vector[cnp.int64_t] kept
    cdef vector[cnp.int64_t] dropped
    cdef Py_ssize_t a, b
    cdef cnp.int64_t c
    cdef bint ok
    with nogil:
        for a in range(n):
            if <Py_ssize_t>kept.size() >= m:
                break
            c = ids[a]
            ok = True
            for b in range(<Py_ssize_t>kept.size()):
                if not (_dot(vectors, kept[b], &vectors[c, 0], d) < sims[a]):
                    ok = False
                    break
            if ok:
                kept.push_back(c)
            else:
                dropped.push_back(c)
        for a in range(<Py_ssize_t>dropped.size()):
            if <Py_ssize_t>kept.size() >= m:
                break
            kept.push_back(dropped[a])
    out = np.empty(kept.size(), dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    for a in range(<Py_ssize_t>kept.size()):
        ov[a] = kept[a]
    return out
