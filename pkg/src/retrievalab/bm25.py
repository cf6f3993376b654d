"""Okapi BM25 inverted index, search, and hard-negative mining.

The index is the retrieval baseline and the supplier of training signal:
mining fills in missing positives and attaches answer-free hard negatives
drawn from each question's top BM25 candidates.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from retrievalab.corpus import QAExample, passage_display_text
from retrievalab.errors import DataError, FormatError
from retrievalab.io_binary import Cursor, pack_str, read_artifact, write_artifact
from retrievalab.text import contains_answer, tokenize

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4
DEFAULT_CANDIDATES = 100
DEFAULT_NEGATIVES = 1

INDEX_MAGIC = b"BMI1"
INDEX_VERSION = 1


@dataclass
class InvertedIndex:
    """Term -> (passage ids, term frequencies), both sorted by passage id."""

    postings: dict
    doc_lengths: np.ndarray
    avg_doc_length: float
    n_passages: int
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    def __post_init__(self):
        if self.n_passages < 1:
            raise ValueError("index must cover at least one passage")
        if self.k1 < 0 or not 0 <= self.b <= 1:
            raise ValueError(f"bad BM25 parameters k1={self.k1} b={self.b}")


@dataclass
class MiningResult:
    examples: list
    n_dropped: int = 0
    n_positives_mined: int = 0
    n_negatives_attached: int = 0


def build_index(passages, k1=DEFAULT_K1, b=DEFAULT_B, use_title=False):
    """Build an inverted index over the corpus, one posting list per term."""
    if not passages:
        raise DataError("cannot build a BM25 index over an empty corpus")
    counts = {}
    lengths = np.zeros(len(passages), dtype=np.int64)
    for p in passages:
        tokens = tokenize(passage_display_text(p, use_title))
        lengths[p.passage_id] = len(tokens)
        tf = {}
        for t in tokens:
            tf[t] = tf.get(t, 0) + 1
        for t, n in tf.items():
            counts.setdefault(t, []).append((p.passage_id, n))
    postings = {}
    for t, pairs in counts.items():
        pairs.sort()
        ids = np.array([pid for pid, _ in pairs], dtype=np.int64)
        tfs = np.array([n for _, n in pairs], dtype=np.int64)
        postings[t] = (ids, tfs)
    return InvertedIndex(
        postings=postings,
        doc_lengths=lengths,
        avg_doc_length=float(lengths.mean()),
        n_passages=len(passages),
        k1=k1,
        b=b,
    )


def idf(index, term):
    entry = index.postings.get(term)
    df = 0 if entry is None else len(entry[0])
    return math.log(1.0 + (index.n_passages - df + 0.5) / (df + 0.5))


def bm25_search(index, query, k):
    """Top-k passages by BM25 score, ties broken by ascending passage id.

    Repeated query terms contribute once per occurrence. Only passages with
    a positive score are returned, so the result may be shorter than k.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.zeros(index.n_passages)
    norm = index.k1 * (
        1.0 - index.b + index.b * index.doc_lengths / index.avg_doc_length
    )
    for term in tokenize(query):
        entry = index.postings.get(term)
        if entry is None:
            continue
        ids, tfs = entry
        w = idf(index, term) * tfs * (index.k1 + 1.0) / (tfs + norm[ids])
        scores[ids] += w
    hit_ids = np.flatnonzero(scores > 0.0)
    if hit_ids.size == 0:
        return []
    order = np.lexsort((hit_ids, -scores[hit_ids]))[:k]
    return [(int(hit_ids[i]), float(scores[hit_ids[i]])) for i in order]


def mine_examples(
    index,
    passages,
    examples,
    n_candidates=DEFAULT_CANDIDATES,
    n_negatives=DEFAULT_NEGATIVES,
):
    """Fill in missing positives and attach BM25 hard negatives.

    For each example the top n_candidates passages are retrieved. An example
    without a positive gets the highest-ranked candidate whose text contains
    an answer; if no candidate does, the example is dropped and counted.
    Examples whose hard-negative list is empty get the first n_negatives
    candidates that do not contain any answer. Answer matching is against
    passage text only, never titles.
    """
    if n_negatives < 0:
        raise ValueError(f"n_negatives must be >= 0, got {n_negatives}")
    if n_candidates < n_negatives + 1:
        raise ValueError(
            f"n_candidates={n_candidates} cannot supply a positive plus "
            f"{n_negatives} negatives"
        )
    mined = []
    dropped = 0
    pos_mined = 0
    neg_attached = 0
    for ex in examples:
        hits = bm25_search(index, ex.question, n_candidates)
        positive = ex.positive
        if positive is None:
            for pid, _ in hits:
                if contains_answer(passages[pid].text, ex.answers):
                    positive = pid
                    break
            if positive is None:
                dropped += 1
                continue
            pos_mined += 1
        negatives = list(ex.hard_negatives)
        if not negatives and n_negatives > 0:
            for pid, _ in hits:
                if pid == positive:
                    continue
                if not contains_answer(passages[pid].text, ex.answers):
                    negatives.append(pid)
                    if len(negatives) == n_negatives:
                        break
            neg_attached += len(negatives)
        mined.append(
            QAExample(
                question=ex.question,
                answers=list(ex.answers),
                domain=ex.domain,
                positive=positive,
                hard_negatives=negatives,
            )
        )
    return MiningResult(
        examples=mined,
        n_dropped=dropped,
        n_positives_mined=pos_mined,
        n_negatives_attached=neg_attached,
    )


def save_index(index, path):
    out = bytearray()
    out += struct.pack("<H", INDEX_VERSION)
    out += struct.pack("<QdddQ", index.n_passages, index.avg_doc_length,
                       index.k1, index.b, len(index.postings))
    out += index.doc_lengths.astype("<i8").tobytes()
    for term in sorted(index.postings):
        ids, tfs = index.postings[term]
        pack_str(out, term)
        out += struct.pack("<I", len(ids))
        out += ids.astype("<i8").tobytes()
        out += tfs.astype("<i8").tobytes()
    write_artifact(path, INDEX_MAGIC, bytes(out))


def load_index(path):
    cur = Cursor(read_artifact(path, INDEX_MAGIC, "bm25 index"), "bm25 index")
    (version,) = cur.unpack("H")
    if version != INDEX_VERSION:
        raise FormatError(f"bm25 index: unsupported version {version}")
    n_passages, avg_len, k1, b, n_terms = cur.unpack("QdddQ")
    lengths = np.frombuffer(cur.take(8 * n_passages), dtype="<i8").copy()
    postings = {}
    for _ in range(n_terms):
        term = cur.read_str()
        (n,) = cur.unpack("I")
        ids = np.frombuffer(cur.take(8 * n), dtype="<i8").copy()
        tfs = np.frombuffer(cur.take(8 * n), dtype="<i8").copy()
        postings[term] = (ids, tfs)
    cur.expect_end()
    return InvertedIndex(
        postings=postings,
        doc_lengths=lengths,
        avg_doc_length=avg_len,
        n_passages=n_passages,
        k1=k1,
        b=b,
    )
