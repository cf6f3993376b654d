# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled backend for the hot kernels: token hashing, bag-of-embeddings
mean pooling, and exact top-k dot-product scans.

Contracts mirror ``_pyref``: integer hashing is bit-identical; floating
kernels accumulate in float64 and agree with the reference backend to
accumulation-order rounding.
"""
import numpy as np

cimport cython
cimport numpy as cnp
from libc.stdint cimport int64_t, uint8_t, uint64_t

cnp.import_array()

ctypedef fused floating:
    float
    double

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325UL
cdef uint64_t FNV_PRIME = 0x100000001B3UL


cdef inline uint64_t _fnv1a64_bytes(const uint8_t* data, Py_ssize_t n) nogil:
    cdef uint64_t h = FNV_OFFSET
    cdef Py_ssize_t i
    for i in range(n):
        h ^= data[i]
        h *= FNV_PRIME
    return h


def fnv1a64(str token):
    """FNV-1a 64-bit hash of a token's UTF-8 bytes."""
    cdef bytes raw = token.encode("utf-8")
    return int(_fnv1a64_bytes(<const uint8_t*> raw, len(raw)))


def hash_buckets(list tokens, n_buckets):
    """Map each token to its embedding bucket: fnv1a64(token) mod n_buckets."""
    cdef uint64_t nb = <uint64_t> n_buckets
    if nb < 1:
        raise ValueError("n_buckets must be >= 1")
    cdef Py_ssize_t n = len(tokens)
    out_arr = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    cdef Py_ssize_t i
    cdef bytes raw
    for i in range(n):
        raw = (<str> tokens[i]).encode("utf-8")
        out[i] = <int64_t> (_fnv1a64_bytes(<const uint8_t*> raw, len(raw)) % nb)
    return out_arr


def mean_pool(floating[:, ::1] table, bucket_ids, offsets):
    """Per-segment mean of table rows, accumulated in float64.

    Segment j pools table[bucket_ids[offsets[j]:offsets[j+1]]]; an empty
    segment yields a zero row.  Returns float64 (n_segments, dim).
    """
    cdef int64_t[::1] ids = np.ascontiguousarray(bucket_ids, dtype=np.int64)
    cdef int64_t[::1] offs = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef Py_ssize_t n_seg = offs.shape[0] - 1
    cdef Py_ssize_t dim = table.shape[1]
    out_arr = np.zeros((n_seg, dim), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t j, t, c
    cdef int64_t row
    cdef double inv
    with nogil:
        for j in range(n_seg):
            if offs[j + 1] == offs[j]:
                continue
            for t in range(offs[j], offs[j + 1]):
                row = ids[t]
                for c in range(dim):
                    out[j, c] += <double> table[row, c]
            inv = 1.0 / <double> (offs[j + 1] - offs[j])
            for c in range(dim):
                out[j, c] *= inv
    return out_arr


def topk_dot(floating[:, ::1] vectors, double[::1] query, k):
    """Exact top-k rows of ``vectors`` by dot product with ``query``.

    Scores accumulate in float64; ordering is score descending, ties broken
    by row id ascending.  Returns (ids int64, scores float64) of length
    min(k, n).

    Rows are scanned in id order against a bounded min-heap, so the heap
    root is the current worst kept hit; a later row displaces it only when
    strictly better (an equal score loses the id tie-break by construction).
    """
    cdef Py_ssize_t n = vectors.shape[0]
    cdef Py_ssize_t dim = vectors.shape[1]
    cdef Py_ssize_t kk = <Py_ssize_t> k
    if kk < 1:
        raise ValueError("k must be >= 1")
    if kk > n:
        kk = n

    heap_scores_arr = np.empty(kk, dtype=np.float64)
    heap_ids_arr = np.empty(kk, dtype=np.int64)
    cdef double[::1] hs = heap_scores_arr
    cdef int64_t[::1] hi = heap_ids_arr

    cdef Py_ssize_t i, j, size, pos, child, parent
    cdef double s, tmp_s
    cdef int64_t tmp_i
    size = 0
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(dim):
                s += (<double> vectors[i, j]) * query[j]
            if size < kk:
                # sift-up insert; "worse" = lower score, or equal score with
                # larger id
                pos = size
                hs[pos] = s
                hi[pos] = i
                size += 1
                while pos > 0:
                    parent = (pos - 1) >> 1
                    if hs[pos] < hs[parent] or (hs[pos] == hs[parent] and hi[pos] > hi[parent]):
                        tmp_s = hs[pos]; hs[pos] = hs[parent]; hs[parent] = tmp_s
                        tmp_i = hi[pos]; hi[pos] = hi[parent]; hi[parent] = tmp_i
                        pos = parent
                    else:
                        break
            elif s > hs[0]:
                hs[0] = s
                hi[0] = i
                pos = 0
                while True:
                    child = 2 * pos + 1
                    if child >= kk:
                        break
                    if child + 1 < kk and (
                        hs[child + 1] < hs[child]
                        or (hs[child + 1] == hs[child] and hi[child + 1] > hi[child])
                    ):
                        child += 1
                    if hs[child] < hs[pos] or (hs[child] == hs[pos] and hi[child] > hi[pos]):
                        tmp_s = hs[pos]; hs[pos] = hs[child]; hs[child] = tmp_s
                        tmp_i = hi[pos]; hi[pos] = hi[child]; hi[child] = tmp_i
                        pos = child
                    else:
                        break

    order = np.lexsort((heap_ids_arr, -heap_scores_arr))
    return heap_ids_arr[order], heap_scores_arr[order]
