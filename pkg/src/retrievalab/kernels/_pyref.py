"""Pure-numpy reference backend for the hot kernels.

Same contracts as the compiled backend in ``_core.pyx``; selected at import
time by ``retrievalab.kernels`` when the extension is unavailable.  Integer
results (token hashing) are bit-identical across backends; floating results
agree to accumulation-order rounding (both accumulate in float64).
"""
from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(token: str) -> int:
    """FNV-1a 64-bit hash of a token's UTF-8 bytes."""
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_buckets(tokens: list[str], n_buckets: int) -> np.ndarray:
    """Map each token to its embedding bucket: fnv1a64(token) mod n_buckets."""
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    out = np.empty(len(tokens), dtype=np.int64)
    for i, tok in enumerate(tokens):
        out[i] = fnv1a64(tok) % n_buckets
    return out


def mean_pool(table: np.ndarray, bucket_ids: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per-segment mean of table rows, accumulated in float64.

    Segment j pools ``table[bucket_ids[offsets[j]:offsets[j+1]]]``; an empty
    segment yields a zero row.  Returns a float64 (n_segments, dim) matrix.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    bucket_ids = np.asarray(bucket_ids, dtype=np.int64)
    n_seg = len(offsets) - 1
    dim = table.shape[1]
    out = np.zeros((n_seg, dim), dtype=np.float64)
    counts = np.diff(offsets)
    nonempty = counts > 0
    if bucket_ids.size and nonempty.any():
        gathered = table[bucket_ids].astype(np.float64, copy=False)
        starts = offsets[:-1][nonempty]
        # With empty segments removed, consecutive starts are strictly
        # increasing, so reduceat sums exactly the intended slices.
        sums = np.add.reduceat(gathered, starts, axis=0)
        out[nonempty] = sums / counts[nonempty, None]
    return out


def topk_dot(vectors: np.ndarray, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k rows of ``vectors`` by dot product with ``query``.

    Scores accumulate in float64; ordering is score descending with ties
    broken by row id ascending.  Returns (ids int64, scores float64) of
    length min(k, n).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = vectors.shape[0]
    scores = vectors.astype(np.float64, copy=False) @ np.asarray(query, dtype=np.float64)
    k = min(k, n)
    # Threshold prune keeps every row tied at the k-th score, so the id
    # tie-break below sees all candidates.
    thr = np.partition(scores, n - k)[n - k]
    cand = np.flatnonzero(scores >= thr)
    order = np.lexsort((cand, -scores[cand]))[:k]
    ids = cand[order].astype(np.int64)
    return ids, scores[ids]
