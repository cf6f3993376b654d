"""Document ingestion, fixed-length passage chunking, QA dataset loading, and
the seeded synthetic multi-domain generator used for desk-scale experiments.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from retrievalab.errors import DataError
from retrievalab.text import tokenize

DEFAULT_CHUNK_SIZE = 100

# Synthetic-generator shape constants.  Raising CORE_TOKEN_WEIGHT makes the
# shared-core tokens behave like stopwords; at 1.0 passages stay distinctive
# enough for a small encoder to separate domains.  Questions draw mostly from
# their gold passage so lexical retrieval has signal to mine from.
CORE_TOKEN_WEIGHT = 1.0
GOLD_TOKEN_PROB = 0.85
QUESTION_LEN_RANGE = (6, 10)
PASSAGES_PER_DOC = 3
_MAX_QUESTION_RETRIES = 200


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str


@dataclass(frozen=True)
class Passage:
    passage_id: int
    source_doc: str
    title: str
    text: str
    token_count: int


@dataclass
class QAExample:
    question: str
    answers: list[str]
    domain: str = ""
    positive: int | None = None
    hard_negatives: list[int] = field(default_factory=list)


@dataclass
class DomainDataset:
    domain: str
    train: list[QAExample] = field(default_factory=list)
    dev: list[QAExample] = field(default_factory=list)
    test: list[QAExample] = field(default_factory=list)

    def split(self, name: str) -> list[QAExample]:
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class SynthConfig:
    n_domains: int = 3
    vocab_per_domain: int = 120
    shared_vocab_fraction: float = 0.3
    passages_per_domain: int = 120
    questions_per_split: tuple[int, int, int] = (600, 40, 100)
    chunk_size: int = 28
    seed: int = 7

    def validate(self):
        if self.n_domains < 1 or self.vocab_per_domain < 2:
            raise DataError("n_domains must be >= 1 and vocab_per_domain >= 2")
        if not 0.0 <= self.shared_vocab_fraction <= 1.0:
            raise DataError("shared_vocab_fraction must be in [0, 1]")
        if self.passages_per_domain < 1 or self.chunk_size < 2:
            raise DataError("passages_per_domain must be >= 1 and chunk_size >= 2")
        if any(n < 0 for n in self.questions_per_split):
            raise DataError("questions_per_split entries must be >= 0")


@dataclass
class ChunkResult:
    passages: list[Passage]
    skipped_docs: int = 0


def chunk_documents(docs, chunk_size: int = DEFAULT_CHUNK_SIZE) -> ChunkResult:
    """Greedy fixed-length split of each document's token stream.

    Passages of exactly ``chunk_size`` tokens, plus a shorter final remainder
    when at least one token is left.  Passage ids are assigned 0..n-1 in
    document order; empty-bodied documents are skipped and counted.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    passages: list[Passage] = []
    skipped = 0
    next_id = 0
    for doc in docs:
        tokens = tokenize(doc.body)
        if not tokens:
            skipped += 1
            continue
        for start in range(0, len(tokens), chunk_size):
            piece = tokens[start : start + chunk_size]
            passages.append(
                Passage(
                    passage_id=next_id,
                    source_doc=doc.doc_id,
                    title=doc.title,
                    text=" ".join(piece),
                    token_count=len(piece),
                )
            )
            next_id += 1
    return ChunkResult(passages=passages, skipped_docs=skipped)


def passage_display_text(passage: Passage, use_title: bool = False) -> str:
    """Text actually encoded/scored; optionally prepends 'title [SEP] text'."""
    if use_title and passage.title:
        return f"{passage.title} [SEP] {passage.text}"
    return passage.text


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def read_corpus_tsv(path, header: bool = False) -> list[Passage]:
    """Read passages from `id<TAB>text<TAB>title` lines (UTF-8, no header by
    default).  Ids must be the contiguous range 0..n-1 in file order."""
    passages: list[Passage] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if header and lineno == 1:
                continue
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            pid_str, text, title = parts
            try:
                pid = int(pid_str)
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: bad passage id {pid_str!r}") from exc
            passages.append(
                Passage(
                    passage_id=pid,
                    source_doc="",
                    title=title,
                    text=text,
                    token_count=len(tokenize(text)),
                )
            )
    for i, p in enumerate(passages):
        if p.passage_id != i:
            raise DataError(f"{path}: passage ids not contiguous at position {i} (got {p.passage_id})")
    return passages


def write_corpus_tsv(passages, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in passages:
            fh.write(f"{p.passage_id}\t{p.text}\t{p.title}\n")


def read_documents_tsv(path, header: bool = False) -> list[Document]:
    """Read raw documents from `id<TAB>body<TAB>title` lines."""
    docs: list[Document] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if header and lineno == 1:
                continue
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            doc_id, body, title = parts
            if not doc_id:
                raise DataError(f"{path}: line {lineno}: empty doc id")
            docs.append(Document(doc_id=doc_id, title=title, body=body))
    return docs


def load_dataset(
    path,
    format: str = "jsonl",
    domain: str | None = None,
    split: str = "train",
    passages=None,
) -> tuple[DomainDataset, int]:
    """Load QA examples into the named split of a fresh DomainDataset.

    Returns (dataset, n_warnings) where warnings count rejected records
    (missing answers) and, for dpr-json, dropped unresolvable contexts.
    ``passages`` is required for dpr-json so contexts can be resolved to
    passage ids by exact text match.
    """
    if format == "jsonl":
        examples, warnings = _load_jsonl(path, domain)
    elif format == "dpr-json":
        if passages is None:
            raise DataError("dpr-json loading requires the passage corpus for context resolution")
        examples, warnings = _load_dpr_json(path, domain, passages)
    else:
        raise DataError(f"unknown dataset format {format!r}")
    resolved_domain = domain or (examples[0].domain if examples else "")
    ds = DomainDataset(domain=resolved_domain)
    ds.split(split).extend(examples)
    return ds, warnings


def _load_jsonl(path, domain):
    examples: list[QAExample] = []
    warnings = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(rec, dict) or "question" not in rec:
                raise DataError(f"{path}: line {lineno}: record missing 'question'")
            answers = rec.get("answers")
            if not answers:
                warnings += 1
                continue
            examples.append(
                QAExample(
                    question=rec["question"],
                    answers=list(answers),
                    domain=rec.get("domain", domain or ""),
                    positive=rec.get("positive_passage_id"),
                    hard_negatives=list(rec.get("hard_negative_ids", [])),
                )
            )
    return examples, warnings


def _load_dpr_json(path, domain, passages):
    with open(path, encoding="utf-8") as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise DataError(f"{path}: expected a top-level JSON array")
    text_to_pid = {p.text: p.passage_id for p in passages}
    examples: list[QAExample] = []
    warnings = 0
    for idx, rec in enumerate(records):
        if not isinstance(rec, dict) or "question" not in rec:
            raise DataError(f"{path}: record {idx}: missing 'question'")
        answers = rec.get("answers")
        if not answers:
            warnings += 1
            continue
        positive = None
        for ctx in rec.get("positive_ctxs", []):
            pid = text_to_pid.get(ctx.get("text", ""))
            if pid is not None:
                positive = pid
                break
            warnings += 1
        negatives = []
        for ctx in rec.get("hard_negative_ctxs", []):
            pid = text_to_pid.get(ctx.get("text", ""))
            if pid is None:
                warnings += 1
            elif pid != positive:
                negatives.append(pid)
        examples.append(
            QAExample(
                question=rec["question"],
                answers=list(answers),
                domain=rec.get("domain", domain or ""),
                positive=positive,
                hard_negatives=negatives,
            )
        )
    return examples, warnings


def write_dataset_jsonl(examples, path):
    """Write examples as one JSON object per line (stable key order)."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"question": ex.question, "answers": ex.answers, "domain": ex.domain}
            if ex.positive is not None:
                rec["positive_passage_id"] = ex.positive
            if ex.hard_negatives:
                rec["hard_negative_ids"] = ex.hard_negatives
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def _domain_vocab(cfg: SynthConfig, d: int, shared: list[str]) -> list[str]:
    n_exclusive = cfg.vocab_per_domain - len(shared)
    exclusive = [f"d{d}tok{i:04d}" for i in range(n_exclusive)]
    return shared + exclusive


def generate_synthetic(cfg: SynthConfig) -> tuple[list[Document], list[DomainDataset]]:
    """Deterministic multi-domain corpus + QA datasets from a seeded config.

    Every domain shares a common vocabulary core (``shared_vocab_fraction`` of
    its vocabulary) plus domain-exclusive tokens.  Each passage embeds one
    namespaced answer token unique within its domain; each question samples
    mostly from its gold passage's tokens with the answer token excluded, so
    recorded positives are exact and the answer-match rule holds by
    construction.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    n_shared = round(cfg.shared_vocab_fraction * cfg.vocab_per_domain)
    shared = [f"core{i:04d}" for i in range(n_shared)]

    documents: list[Document] = []
    datasets: list[DomainDataset] = []
    next_pid = 0
    for d in range(cfg.n_domains):
        domain = f"d{d}"
        vocab = _domain_vocab(cfg, d, shared)
        weights = np.array(
            [CORE_TOKEN_WEIGHT] * n_shared + [1.0] * (len(vocab) - n_shared), dtype=np.float64
        )
        weights /= weights.sum()

        # Passages: exactly chunk_size tokens each, except the domain's final
        # passage which is shorter so chunking's remainder path is exercised.
        passage_tokens: list[list[str]] = []
        answer_tokens: list[str] = []
        for p in range(cfg.passages_per_domain):
            length = cfg.chunk_size if p < cfg.passages_per_domain - 1 else cfg.chunk_size // 2 + 1
            answer = f"ans{d}x{p:04d}"
            body = [vocab[i] for i in rng.choice(len(vocab), size=length - 1, p=weights)]
            body.insert(int(rng.integers(0, length)), answer)
            passage_tokens.append(body)
            answer_tokens.append(answer)
        if len(set(answer_tokens)) != len(answer_tokens):
            raise DataError(f"domain {domain}: answer tokens not unique")

        # Bundle consecutive passages into documents; chunking at cfg.chunk_size
        # reproduces the passage boundaries because only the last passage of the
        # last document is shorter than chunk_size.
        pid_base = next_pid
        for start in range(0, cfg.passages_per_domain, PASSAGES_PER_DOC):
            group = passage_tokens[start : start + PASSAGES_PER_DOC]
            body = " ".join(" ".join(toks) for toks in group)
            documents.append(
                Document(
                    doc_id=f"{domain}-doc{start // PASSAGES_PER_DOC:04d}",
                    title=f"{domain} document {start // PASSAGES_PER_DOC}",
                    body=body,
                )
            )
        next_pid += cfg.passages_per_domain

        ds = DomainDataset(domain=domain)
        seen_questions: set[str] = set()
        for split_name, n_questions in zip(("train", "dev", "test"), cfg.questions_per_split):
            for _ in range(n_questions):
                ex = _make_question(
                    rng, domain, vocab, weights, passage_tokens, answer_tokens, pid_base, seen_questions
                )
                ds.split(split_name).append(ex)
        datasets.append(ds)

    return documents, datasets


def _make_question(rng, domain, vocab, weights, passage_tokens, answer_tokens, pid_base, seen):
    lo, hi = QUESTION_LEN_RANGE
    for _ in range(_MAX_QUESTION_RETRIES):
        gold = int(rng.integers(0, len(passage_tokens)))
        answer = answer_tokens[gold]
        gold_body = [t for t in passage_tokens[gold] if t != answer]
        length = int(rng.integers(lo, hi + 1))
        tokens = []
        for _ in range(length):
            if rng.random() < GOLD_TOKEN_PROB:
                tokens.append(gold_body[int(rng.integers(0, len(gold_body)))])
            else:
                tokens.append(vocab[int(rng.choice(len(vocab), p=weights))])
        question = " ".join(tokens)
        if question in seen:
            continue
        seen.add(question)
        return QAExample(
            question=question,
            answers=[answer],
            domain=domain,
            positive=pid_base + gold,
        )
    raise DataError(
        f"domain {domain}: vocabulary too small to generate unique questions "
        f"(exhausted {_MAX_QUESTION_RETRIES} retries)"
    )
