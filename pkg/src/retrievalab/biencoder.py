"""Hashed bag-of-embeddings encoders for questions and passages.

A text is tokenized, each token hashed into one of ``vocab_buckets`` rows of
an embedding table, the selected rows are mean-pooled, and the pooled vector
goes through a learned square projection with bias. Questions and passages
get independent parameter sets; similarity is a plain dot product, so the
question and passage sides only have to agree on the output dimension.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from retrievalab import kernels
from retrievalab.errors import FormatError
from retrievalab.io_binary import Cursor, pack_str, read_artifact, write_artifact
from retrievalab.text import tokenize

ROLE_QUESTION = "question"
ROLE_PASSAGE = "passage"
_ROLE_CODES = {ROLE_QUESTION: 0, ROLE_PASSAGE: 1}

DEFAULT_DIM = 64
DEFAULT_BUCKETS = 1 << 16
INIT_STD = 0.1

ENCODER_MAGIC = b"ENC1"
ENCODER_VERSION = 1


@dataclass(frozen=True)
class EncoderParams:
    """One tower's parameters. Role and domain are fixed at creation."""

    role: str
    domain: str
    dim: int
    vocab_buckets: int
    seed: int
    embeddings: np.ndarray   # (vocab_buckets, dim) float32
    projection: np.ndarray   # (dim, dim) float32
    proj_bias: np.ndarray    # (dim,) float32

    def __post_init__(self):
        if self.role not in _ROLE_CODES:
            raise ValueError(f"role must be question or passage, got {self.role!r}")
        if self.dim < 1 or self.vocab_buckets < 1:
            raise ValueError(
                f"bad encoder shape dim={self.dim} buckets={self.vocab_buckets}"
            )
        if self.embeddings.shape != (self.vocab_buckets, self.dim):
            raise ValueError(
                f"embedding table is {self.embeddings.shape}, expected "
                f"{(self.vocab_buckets, self.dim)}"
            )
        if self.projection.shape != (self.dim, self.dim):
            raise ValueError(f"projection is {self.projection.shape}, expected square")
        if self.proj_bias.shape != (self.dim,):
            raise ValueError(f"bias is {self.proj_bias.shape}, expected ({self.dim},)")


@dataclass(frozen=True)
class EmbeddingVec:
    values: np.ndarray
    domain: str = ""

    @property
    def dim(self):
        return int(self.values.shape[-1])


def init_params(role, domain, dim=DEFAULT_DIM, vocab_buckets=DEFAULT_BUCKETS, seed=0):
    """Fresh parameters: Gaussian embedding rows, identity projection.

    The random stream mixes the seed with the role but not the domain, so
    towers for different domains start from identical tables, the way
    separately fine-tuned models share one pretrained starting point.
    """
    if role not in _ROLE_CODES:
        raise ValueError(f"role must be question or passage, got {role!r}")
    rng = np.random.default_rng([int(seed), _ROLE_CODES[role]])
    emb = rng.normal(0.0, INIT_STD, size=(vocab_buckets, dim)).astype(np.float32)
    return EncoderParams(
        role=role,
        domain=domain,
        dim=dim,
        vocab_buckets=vocab_buckets,
        seed=int(seed),
        embeddings=emb,
        projection=np.eye(dim, dtype=np.float32),
        proj_bias=np.zeros(dim, dtype=np.float32),
    )


def hash_texts(texts, vocab_buckets):
    """Tokenize and hash a list of texts into one flat bucket-id array
    plus offsets, the layout the pooling kernel consumes."""
    offsets = np.zeros(len(texts) + 1, dtype=np.int64)
    chunks = []
    for i, text in enumerate(texts):
        ids = kernels.hash_buckets(tokenize(text), vocab_buckets)
        chunks.append(ids)
        offsets[i + 1] = offsets[i] + len(ids)
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return flat, offsets


def encode_pooled(embeddings, projection, proj_bias, bucket_ids, offsets):
    """Mean-pool hashed rows and apply the projection. Works on the float32
    stored tables and on float64 working copies during training."""
    pooled = kernels.mean_pool(np.ascontiguousarray(embeddings), bucket_ids, offsets)
    return pooled @ projection.T.astype(np.float64) + proj_bias.astype(np.float64)


def encode_batch(params, texts):
    """Encode texts to a (len(texts), dim) float64 matrix."""
    flat, offsets = hash_texts(texts, params.vocab_buckets)
    return encode_pooled(
        params.embeddings, params.projection, params.proj_bias, flat, offsets
    )


def encode(params, text):
    values = encode_batch(params, [text])[0]
    return EmbeddingVec(values=values, domain=params.domain)


def similarity(q_vec, p_vec):
    """Dot-product relevance score between two embedding vectors."""
    if q_vec.dim != p_vec.dim:
        raise ValueError(
            f"dimension mismatch: question dim {q_vec.dim} "
            f"(domain {q_vec.domain!r}) vs passage dim {p_vec.dim} "
            f"(domain {p_vec.domain!r})"
        )
    return float(np.dot(q_vec.values, p_vec.values))


def _payload(params):
    out = bytearray()
    out += struct.pack("<H", ENCODER_VERSION)
    out += struct.pack("<B", _ROLE_CODES[params.role])
    pack_str(out, params.domain)
    out += struct.pack("<IIQ", params.dim, params.vocab_buckets, params.seed)
    out += params.embeddings.astype("<f4").tobytes()
    out += params.projection.astype("<f4").tobytes()
    out += params.proj_bias.astype("<f4").tobytes()
    return bytes(out)


def checksum_params(params):
    """CRC32 over the serialized payload; indexes store it so a search
    against vectors from a different encoder can be refused."""
    return zlib.crc32(_payload(params)) & 0xFFFFFFFF


def save_params(params, path):
    write_artifact(path, ENCODER_MAGIC, _payload(params))


def load_params(path):
    cur = Cursor(read_artifact(path, ENCODER_MAGIC, "encoder"), "encoder")
    (version,) = cur.unpack("H")
    if version != ENCODER_VERSION:
        raise FormatError(f"encoder: unsupported version {version}")
    (role_code,) = cur.unpack("B")
    roles = {v: k for k, v in _ROLE_CODES.items()}
    if role_code not in roles:
        raise FormatError(f"encoder: unknown role code {role_code}")
    domain = cur.read_str()
    dim, buckets, seed = cur.unpack("IIQ")
    emb = np.frombuffer(cur.take(4 * buckets * dim), dtype="<f4")
    proj = np.frombuffer(cur.take(4 * dim * dim), dtype="<f4")
    bias = np.frombuffer(cur.take(4 * dim), dtype="<f4")
    cur.expect_end()
    return EncoderParams(
        role=roles[role_code],
        domain=domain,
        dim=dim,
        vocab_buckets=buckets,
        seed=seed,
        embeddings=emb.reshape(buckets, dim).copy(),
        projection=proj.reshape(dim, dim).copy(),
        proj_bias=bias.copy(),
    )
