"""Cross-domain evaluation of encoder pairings.

Every (question-encoder domain, passage-encoder domain) pairing is scored on
every test set at several cutoffs, optionally next to a BM25 baseline row.
The resulting matrix feeds three report tables (all pairings, swap the
passage side, swap the question side) plus a summary of how close the best
out-of-domain encoder comes to the in-domain one.
"""

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from retrievalab import bm25 as bm25_mod
from retrievalab import dense
from retrievalab.biencoder import (
    ROLE_PASSAGE,
    ROLE_QUESTION,
    checksum_params,
    encode_batch,
)
from retrievalab.errors import DataError, FormatError
from retrievalab.text import contains_answer

DEFAULT_K_VALUES = (20, 100)
MATRIX_FORMAT = "adaptation-matrix"
MATRIX_VERSION = 1


def recall_at_k(results, examples, passages, k):
    """Fraction of questions whose top-k hits include an answer-bearing
    passage. Results and examples are aligned by position."""
    if len(results) != len(examples):
        raise ValueError(
            f"{len(results)} results for {len(examples)} examples"
        )
    if not examples:
        raise ValueError("recall over an empty example list is undefined")
    n_hit = 0
    for res, ex in zip(results, examples):
        for pid, _ in res.hits[:k]:
            if contains_answer(passages[pid].text, ex.answers):
                n_hit += 1
                break
    return n_hit / len(examples)


@dataclass
class EvalSpec:
    q_domains: list
    p_domains: list
    test_sets: list  # DomainDataset objects; their test splits are scored
    k_values: list = field(default_factory=lambda: list(DEFAULT_K_VALUES))
    include_bm25: bool = False

    def validate(self):
        if not self.q_domains or not self.p_domains or not self.test_sets:
            raise ValueError("spec needs at least one domain on each axis")
        if not self.k_values:
            raise ValueError("spec needs at least one cutoff")
        if any(k < 1 for k in self.k_values):
            raise ValueError(f"cutoffs must be >= 1, got {self.k_values}")
        if sorted(set(self.k_values)) != list(self.k_values):
            raise ValueError(f"cutoffs must be strictly increasing, got {self.k_values}")
        for ds in self.test_sets:
            if not ds.test:
                raise DataError(f"test set {ds.domain!r} has no test examples")


@dataclass
class AdaptationMatrix:
    q_domains: list
    p_domains: list
    test_sets: list  # names
    k_values: list
    cells: dict      # (q_domain, p_domain, test_set, k) -> recall
    bm25_cells: dict  # (test_set, k) -> recall, empty when no baseline ran
    n_questions: dict  # test_set -> question count
    provenance: dict = field(default_factory=dict)

    def cell(self, q_domain, p_domain, test_set, k):
        key = (q_domain, p_domain, test_set, k)
        if key not in self.cells:
            raise KeyError(f"no cell for {key}")
        return self.cells[key]


def corpus_id(passages):
    """Short corpus fingerprint: passage count plus a checksum over ids,
    text, and titles."""
    crc = 0
    for p in passages:
        crc = zlib.crc32(f"{p.passage_id}\t{p.title}\t{p.text}\n".encode("utf-8"), crc)
    return f"{len(passages)}:{crc & 0xFFFFFFFF:08x}"


def _check_index(index, p_domain, params):
    expected = checksum_params(params)
    if index.encoder_checksum != expected:
        raise DataError(
            f"dense index for {p_domain!r} was built by a different encoder "
            f"(index checksum {index.encoder_checksum:#010x}, "
            f"encoder {expected:#010x})"
        )


def evaluate_matrix(
    spec,
    encoders,
    passages,
    bm25_index=None,
    indexes=None,
    use_title=False,
    threads=1,
    extra_provenance=None,
):
    """Score every encoder pairing on every test set.

    encoders maps domain -> (question EncoderParams, passage EncoderParams).
    Each passage index is built (or taken from `indexes`) exactly once, each
    test set is encoded once per question domain, and supplied indexes are
    refused if their stored checksum does not match the passage encoder.
    The output is independent of the thread count.
    """
    spec.validate()
    for domain in set(spec.q_domains) | set(spec.p_domains):
        if domain not in encoders:
            raise DataError(f"no encoder pair supplied for domain {domain!r}")
    dims = set()
    for domain, (q, p) in encoders.items():
        if q.role != ROLE_QUESTION or p.role != ROLE_PASSAGE:
            raise DataError(f"encoder pair for {domain!r} has roles swapped")
        dims.add((q.dim, p.dim))
    if len(dims) != 1:
        raise DataError(f"encoders disagree on dimensions: {sorted(dims)}")
    if spec.include_bm25 and bm25_index is None:
        raise DataError("baseline requested but no BM25 index supplied")

    k_max = max(spec.k_values)
    built = {}
    for p_domain in spec.p_domains:
        p_params = encoders[p_domain][1]
        if indexes and p_domain in indexes:
            idx = indexes[p_domain]
            _check_index(idx, p_domain, p_params)
            built[p_domain] = idx
        else:
            built[p_domain] = dense.build_index(
                p_params, passages, use_title=use_title, threads=threads
            )

    q_matrices = {}
    for q_domain in spec.q_domains:
        q_params = encoders[q_domain][0]
        for ds in spec.test_sets:
            questions = [ex.question for ex in ds.test]
            q_matrices[(q_domain, ds.domain)] = encode_batch(q_params, questions)

    tasks = [
        (q_domain, p_domain, ds)
        for q_domain in spec.q_domains
        for p_domain in spec.p_domains
        for ds in spec.test_sets
    ]

    def run_task(task):
        q_domain, p_domain, ds = task
        queries = q_matrices[(q_domain, ds.domain)]
        return dense.search_batch(built[p_domain], queries, k_max)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_results = list(pool.map(run_task, tasks))
    else:
        all_results = [run_task(t) for t in tasks]

    cells = {}
    for (q_domain, p_domain, ds), results in zip(tasks, all_results):
        for k in spec.k_values:
            cells[(q_domain, p_domain, ds.domain, k)] = recall_at_k(
                results, ds.test, passages, k
            )

    bm25_cells = {}
    if spec.include_bm25:
        for ds in spec.test_sets:
            results = [
                dense.SearchResult(hits=bm25_mod.bm25_search(bm25_index, ex.question, k_max))
                for ex in ds.test
            ]
            for k in spec.k_values:
                bm25_cells[(ds.domain, k)] = recall_at_k(results, ds.test, passages, k)

    provenance = {
        "corpus_id": corpus_id(passages),
        "encoder_checksums": {
            domain: {
                "question": f"{checksum_params(pair[0]):08x}",
                "passage": f"{checksum_params(pair[1]):08x}",
            }
            for domain, pair in sorted(encoders.items())
        },
    }
    if extra_provenance:
        provenance.update(extra_provenance)

    return AdaptationMatrix(
        q_domains=list(spec.q_domains),
        p_domains=list(spec.p_domains),
        test_sets=[ds.domain for ds in spec.test_sets],
        k_values=list(spec.k_values),
        cells=cells,
        bm25_cells=bm25_cells,
        n_questions={ds.domain: len(ds.test) for ds in spec.test_sets},
        provenance=provenance,
    )


def relative_best_ood(matrix, k, mode="difference"):
    """Per test set: the in-domain cell versus the best out-of-domain cell
    when swapping the question side and when swapping the passage side.

    Differences are percentage points (out-of-domain minus in-domain);
    ratios are out-of-domain over in-domain, None when in-domain is zero.
    """
    if mode not in ("difference", "ratio"):
        raise ValueError(f"mode must be difference or ratio, got {mode!r}")
    if len(matrix.q_domains) < 2 or len(matrix.p_domains) < 2:
        raise DataError("best out-of-domain comparison needs at least two domains")
    out = {}
    for t in matrix.test_sets:
        ind = matrix.cell(t, t, t, k)
        q_swaps = {q: matrix.cell(q, t, t, k) for q in matrix.q_domains if q != t}
        p_swaps = {p: matrix.cell(t, p, t, k) for p in matrix.p_domains if p != t}
        best_q = max(sorted(q_swaps), key=lambda d: q_swaps[d])
        best_p = max(sorted(p_swaps), key=lambda d: p_swaps[d])
        entry = {
            "ind": ind,
            "best_ood_q_domain": best_q,
            "best_ood_q": q_swaps[best_q],
            "best_ood_q_delta_points": 100.0 * (q_swaps[best_q] - ind),
            "best_ood_q_ratio": (q_swaps[best_q] / ind) if ind > 0 else None,
            "best_ood_p_domain": best_p,
            "best_ood_p": p_swaps[best_p],
            "best_ood_p_delta_points": 100.0 * (p_swaps[best_p] - ind),
            "best_ood_p_ratio": (p_swaps[best_p] / ind) if ind > 0 else None,
            "mode": mode,
        }
        out[t] = entry
    return out


def save_matrix(matrix, path):
    doc = {
        "format": MATRIX_FORMAT,
        "version": MATRIX_VERSION,
        "q_domains": matrix.q_domains,
        "p_domains": matrix.p_domains,
        "test_sets": matrix.test_sets,
        "k_values": matrix.k_values,
        "n_questions": matrix.n_questions,
        "cells": [
            {
                "q_domain": q,
                "p_domain": p,
                "test_set": t,
                "k": k,
                "recall": matrix.cells[(q, p, t, k)],
            }
            for (q, p, t, k) in sorted(matrix.cells)
        ],
        "bm25": [
            {"test_set": t, "k": k, "recall": matrix.bm25_cells[(t, k)]}
            for (t, k) in sorted(matrix.bm25_cells)
        ],
        "provenance": matrix.provenance,
    }
    Path(path).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_matrix(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"matrix file is not valid JSON: {e}") from None
    if not isinstance(doc, dict) or doc.get("format") != MATRIX_FORMAT:
        raise FormatError("matrix file is missing its format marker")
    if doc.get("version") != MATRIX_VERSION:
        raise FormatError(f"matrix file has unsupported version {doc.get('version')}")
    cells = {
        (c["q_domain"], c["p_domain"], c["test_set"], c["k"]): c["recall"]
        for c in doc["cells"]
    }
    bm25_cells = {(c["test_set"], c["k"]): c["recall"] for c in doc.get("bm25", [])}
    return AdaptationMatrix(
        q_domains=doc["q_domains"],
        p_domains=doc["p_domains"],
        test_sets=doc["test_sets"],
        k_values=doc["k_values"],
        cells=cells,
        bm25_cells=bm25_cells,
        n_questions=doc["n_questions"],
        provenance=doc.get("provenance", {}),
    )


def _fmt(value):
    return f"{100.0 * value:.1f}"


def _composite(values, flags, fmt):
    parts = []
    for v, is_max in zip(values, flags):
        s = _fmt(v)
        if is_max:
            s = f"**{s}**" if fmt == "markdown" else s + "*"
        parts.append(s)
    return "/".join(parts)


def _table(fmt, title, header, rows):
    lines = []
    if fmt == "markdown":
        lines.append(f"## {title}")
        lines.append("")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join(" --- " for _ in header) + "|")
        for row in rows:
            lines.append("| " + " | ".join(row) + " |")
    else:
        lines.append(f"# {title}")
        for row in [header] + rows:
            lines.append(",".join(row))
    lines.append("")
    return lines


def _column_flags(columns):
    """For each column (list of per-k value tuples), mark the per-k maxima."""
    flags = []
    for col in columns:
        col_flags = []
        for ki in range(len(col[0])):
            best = max(v[ki] for v in col)
            col_flags.append([v[ki] == best for v in col])
        flags.append(list(zip(*col_flags)))
    return flags


def render_report(matrix, fmt="markdown"):
    """Render the matrix as one document with the pairing table, the two
    swap tables, and the best out-of-domain summary. The markdown and csv
    renderings contain identical numbers; only the column maxima are marked
    differently (bold versus a trailing star)."""
    if fmt not in ("markdown", "csv"):
        raise ValueError(f"format must be markdown or csv, got {fmt!r}")
    ks = matrix.k_values
    k_label = "/".join(f"top-{k}" for k in ks)
    lines = []
    if fmt == "markdown":
        lines.append("# Cross-domain retrieval report")
        lines.append("")
        lines.append(
            f"Recall {k_label}, in percent. Columns are test sets; "
            "the per-column best value for each cutoff is marked."
        )
        lines.append("")
    else:
        lines.append("# cross-domain retrieval report")
        lines.append(f"# recall {k_label} in percent; column maxima marked with *")

    tests = matrix.test_sets

    def emit(title, row_labels, value_rows):
        # value_rows: list of rows, each a list (per test) of per-k tuples
        columns = [[row[ci] for row in value_rows] for ci in range(len(tests))]
        flag_cols = _column_flags(columns)
        rows = []
        for ri, label in enumerate(row_labels):
            cells = [
                _composite(value_rows[ri][ci], flag_cols[ci][ri], fmt)
                for ci in range(len(tests))
            ]
            rows.append([label] + cells)
        header = ["encoders"] + [f"{t} ({matrix.n_questions[t]}q)" for t in tests]
        lines.extend(_table(fmt, title, header, rows))

    # Table 1: every pairing, plus the BM25 baseline when present.
    labels = []
    value_rows = []
    for q in matrix.q_domains:
        for p in matrix.p_domains:
            labels.append(f"Q={q} P={p}")
            value_rows.append(
                [tuple(matrix.cell(q, p, t, k) for k in ks) for t in tests]
            )
    if matrix.bm25_cells:
        labels.append("BM25")
        value_rows.append(
            [tuple(matrix.bm25_cells[(t, k)] for k in ks) for t in tests]
        )
    emit("All encoder pairings", labels, value_rows)

    # Table 2: keep the test set's own question encoder, swap the passage side.
    labels = [f"P={p}" for p in matrix.p_domains]
    value_rows = [
        [tuple(matrix.cell(t, p, t, k) for k in ks) for t in tests]
        for p in matrix.p_domains
    ]
    emit("Passage encoder swapped (question encoder in-domain)", labels, value_rows)

    # Table 3: keep the test set's own passage encoder, swap the question side.
    labels = [f"Q={q}" for q in matrix.q_domains]
    value_rows = [
        [tuple(matrix.cell(q, t, t, k) for k in ks) for t in tests]
        for q in matrix.q_domains
    ]
    emit("Question encoder swapped (passage encoder in-domain)", labels, value_rows)

    # Summary: best out-of-domain encoder versus in-domain, per cutoff.
    can_compare = len(matrix.q_domains) > 1 and len(matrix.p_domains) > 1
    if can_compare:
        header = [
            "test set", "k", "in-domain",
            "best OOD question encoder", "delta (pts)", "ratio",
            "best OOD passage encoder", "delta (pts)", "ratio",
        ]
        rows = []
        for k in ks:
            summary = relative_best_ood(matrix, k)
            for t in tests:
                s = summary[t]
                rows.append([
                    t,
                    str(k),
                    _fmt(s["ind"]),
                    f"{s['best_ood_q_domain']} ({_fmt(s['best_ood_q'])})",
                    f"{s['best_ood_q_delta_points']:+.1f}",
                    "-" if s["best_ood_q_ratio"] is None else f"{s['best_ood_q_ratio']:.3f}",
                    f"{s['best_ood_p_domain']} ({_fmt(s['best_ood_p'])})",
                    f"{s['best_ood_p_delta_points']:+.1f}",
                    "-" if s["best_ood_p_ratio"] is None else f"{s['best_ood_p_ratio']:.3f}",
                ])
        lines.extend(_table(fmt, "Best out-of-domain encoder versus in-domain", header, rows))

    doc = "\n".join(lines)
    if not doc.endswith("\n"):
        doc += "\n"
    return doc
