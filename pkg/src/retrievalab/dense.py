"""Exact dense retrieval over encoded passage vectors.

The index is a flat float32 matrix scored by dot product against a query
embedding; top-k is exact with ties broken by ascending passage id. Row i
is always passage id i, so ids never need a separate mapping.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from retrievalab import kernels
from retrievalab.biencoder import (
    ROLE_PASSAGE,
    EmbeddingVec,
    checksum_params,
    encode_batch,
)
from retrievalab.corpus import passage_display_text
from retrievalab.errors import DataError, FormatError
from retrievalab.io_binary import Cursor, pack_str, read_artifact, write_artifact

INDEX_MAGIC = b"DIX1"
INDEX_VERSION = 1
_ENCODE_BLOCK = 256


@dataclass
class DenseIndex:
    domain: str
    dim: int
    vectors: np.ndarray  # (n_passages, dim) float32
    encoder_checksum: int = 0

    @property
    def n_passages(self):
        return int(self.vectors.shape[0])


@dataclass
class SearchResult:
    """Ranked (passage_id, score) pairs, best first."""

    hits: list

    def ids(self, k=None):
        hits = self.hits if k is None else self.hits[:k]
        return [pid for pid, _ in hits]


def build_index(params, passages, use_title=False, threads=1):
    """Encode every passage with the given passage encoder.

    Blocks of passages are encoded independently and written to fixed row
    ranges, so the result is identical for any thread count.
    """
    if params.role != ROLE_PASSAGE:
        raise DataError(
            f"index must be built with a passage encoder, got role {params.role!r}"
        )
    if not passages:
        raise DataError("cannot build a dense index over an empty corpus")
    texts = [passage_display_text(p, use_title) for p in passages]
    vectors = np.empty((len(texts), params.dim), dtype=np.float32)

    def encode_block(start):
        block = texts[start:start + _ENCODE_BLOCK]
        vectors[start:start + len(block)] = encode_batch(params, block)

    starts = range(0, len(texts), _ENCODE_BLOCK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(encode_block, starts))
    else:
        for start in starts:
            encode_block(start)
    return DenseIndex(
        domain=params.domain,
        dim=params.dim,
        vectors=vectors,
        encoder_checksum=checksum_params(params),
    )


def search(index, query, k):
    """Exact top-k by dot product. Accepts an EmbeddingVec or a raw vector."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(query, EmbeddingVec):
        if query.dim != index.dim:
            raise ValueError(
                f"dimension mismatch: query dim {query.dim} "
                f"(domain {query.domain!r}) vs index dim {index.dim} "
                f"(domain {index.domain!r})"
            )
        values = query.values
    else:
        values = np.asarray(query)
        if values.shape != (index.dim,):
            raise ValueError(
                f"query shape {values.shape} does not match index dim {index.dim}"
            )
    ids, scores = kernels.topk_dot(index.vectors, values.astype(np.float64), k)
    return SearchResult(hits=[(int(i), float(s)) for i, s in zip(ids, scores)])


def search_batch(index, queries, k):
    """One SearchResult per row of a (n, dim) float query matrix."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != index.dim:
        raise ValueError(
            f"query matrix shape {queries.shape} does not match index dim {index.dim}"
        )
    return [search(index, queries[i], k) for i in range(queries.shape[0])]


def save_index(index, path):
    out = bytearray()
    out += struct.pack("<H", INDEX_VERSION)
    pack_str(out, index.domain)
    out += struct.pack("<IQI", index.dim, index.n_passages, index.encoder_checksum)
    out += index.vectors.astype("<f4").tobytes()
    write_artifact(path, INDEX_MAGIC, bytes(out))


def load_index(path):
    cur = Cursor(read_artifact(path, INDEX_MAGIC, "dense index"), "dense index")
    (version,) = cur.unpack("H")
    if version != INDEX_VERSION:
        raise FormatError(f"dense index: unsupported version {version}")
    domain = cur.read_str()
    dim, n, checksum = cur.unpack("IQI")
    vecs = np.frombuffer(cur.take(4 * n * dim), dtype="<f4")
    cur.expect_end()
    return DenseIndex(
        domain=domain,
        dim=dim,
        vectors=vecs.reshape(n, dim).copy(),
        encoder_checksum=checksum,
    )
