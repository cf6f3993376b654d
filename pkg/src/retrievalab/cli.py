"""Command-line front end.

Exit codes: 0 on success, 1 for usage errors, 2 for data or validation
errors. Logs go to stderr as `timestamp LEVEL event key=value` lines
(JSON lines with --log-json); reports and search results go to stdout or
to files, never interleaved with logs. Every run that produces artifacts
also writes a manifest recording the resolved configuration and input
checksums.
"""

import argparse
import difflib
import json
import sys
import time
import zlib
from pathlib import Path

from retrievalab import __version__, adaptation, bm25, corpus, dense, training
from retrievalab import biencoder
from retrievalab.errors import DataError

_COMMANDS = (
    "synth-gen", "ingest", "mine", "train", "encode-index",
    "search", "eval", "matrix", "report",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _Logger:
    def __init__(self, json_mode=False):
        self.json_mode = json_mode

    def _emit(self, level, event, kv):
        ts = time.strftime("%Y-%m-%dT%H:%M:%S")
        if self.json_mode:
            rec = {"ts": ts, "level": level, "event": event}
            rec.update(kv)
            line = json.dumps(rec, sort_keys=True)
        else:
            parts = [ts, level.upper(), event]
            parts += [f"{k}={v}" for k, v in kv.items()]
            line = " ".join(parts)
        print(line, file=sys.stderr)

    def info(self, event, **kv):
        self._emit("info", event, kv)

    def warning(self, event, **kv):
        self._emit("warning", event, kv)

    def error(self, event, **kv):
        self._emit("error", event, kv)


def _crc_of(path):
    return f"crc32:{zlib.crc32(Path(path).read_bytes()) & 0xFFFFFFFF:08x}"


def _write_manifest(target, args, inputs, started, extra=None):
    """target: output directory, or a file whose sibling manifest is
    `<file>.manifest.json`."""
    target = Path(target)
    path = target / "manifest.json" if target.is_dir() else Path(str(target) + ".manifest.json")
    config = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "command", "log_json"):
            continue
        config[k] = str(v) if isinstance(v, Path) else v
    doc = {
        "tool": "retrievalab",
        "version": __version__,
        "subcommand": args.command,
        "config": config,
        "inputs": {str(p): _crc_of(p) for p in inputs},
        "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
    }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_ints(text, flag, expect=None):
    try:
        values = [int(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}")
    if not values or (expect is not None and len(values) != expect):
        raise UsageError(f"{flag} expects {expect or 'some'} comma-separated integers")
    return values


def _load_corpus(path):
    passages = corpus.read_corpus_tsv(path)
    if not passages:
        raise DataError(f"{path}: corpus is empty")
    return passages


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_synth_gen(args, log):
    started = time.perf_counter()
    cfg = corpus.SynthConfig(
        n_domains=args.domains,
        vocab_per_domain=args.vocab_per_domain,
        shared_vocab_fraction=args.shared_vocab_fraction,
        passages_per_domain=args.passages_per_domain,
        questions_per_split=tuple(_parse_ints(args.questions, "--questions", 3)),
        chunk_size=args.chunk_size,
        seed=args.seed,
    )
    documents, datasets = corpus.generate_synthetic(cfg)
    chunked = corpus.chunk_documents(documents, cfg.chunk_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "datasets").mkdir(exist_ok=True)
    with open(out / "documents.tsv", "w", encoding="utf-8") as fh:
        for doc in documents:
            fh.write(f"{doc.doc_id}\t{doc.body}\t{doc.title}\n")
    corpus.write_corpus_tsv(chunked.passages, out / "corpus.tsv")
    for ds in datasets:
        for split in ("train", "dev", "test"):
            corpus.write_dataset_jsonl(
                ds.split(split), out / "datasets" / f"{ds.domain}.{split}.jsonl"
            )
    log.info(
        "synth-gen.done",
        domains=cfg.n_domains,
        passages=len(chunked.passages),
        seed=cfg.seed,
    )
    _write_manifest(out, args, [], started, extra={"seed": cfg.seed})
    return 0


def _cmd_ingest(args, log):
    started = time.perf_counter()
    docs = corpus.read_documents_tsv(args.docs, header=args.header)
    result = corpus.chunk_documents(docs, args.chunk_size)
    if result.skipped_docs:
        log.warning("ingest.skipped_empty_docs", count=result.skipped_docs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.write_corpus_tsv(result.passages, out / "corpus.tsv")
    log.info(
        "ingest.done",
        documents=len(docs),
        passages=len(result.passages),
        skipped=result.skipped_docs,
    )
    _write_manifest(out, args, [args.docs], started)
    return 0


def _cmd_mine(args, log):
    started = time.perf_counter()
    passages = _load_corpus(args.corpus)
    dataset, warnings = corpus.load_dataset(args.data, format=args.format,
                                            passages=passages)
    if warnings:
        log.warning("mine.rejected_records", count=warnings)
    if args.index:
        index = bm25.load_index(args.index)
        if index.n_passages != len(passages):
            raise DataError(
                f"index covers {index.n_passages} passages, corpus has {len(passages)}"
            )
    else:
        index = bm25.build_index(passages, k1=args.k1, b=args.b,
                                 use_title=args.use_title)
    result = bm25.mine_examples(
        index, passages, dataset.train,
        n_candidates=args.candidates, n_negatives=args.negatives,
    )
    if result.n_dropped:
        log.warning("mine.dropped_examples", count=result.n_dropped)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.write_dataset_jsonl(result.examples, out)
    if args.save_index:
        bm25.save_index(index, args.save_index)
    log.info(
        "mine.done",
        examples=len(result.examples),
        dropped=result.n_dropped,
        positives_mined=result.n_positives_mined,
        negatives_attached=result.n_negatives_attached,
    )
    _write_manifest(out, args, [args.corpus, args.data], started)
    return 0


def _find_split(data_dir, domain, split):
    base = Path(data_dir) / "datasets"
    mined = base / f"{domain}.{split}.mined.jsonl"
    plain = base / f"{domain}.{split}.jsonl"
    if mined.exists():
        return mined
    if plain.exists():
        return plain
    return None


def _cmd_train(args, log):
    started = time.perf_counter()
    data_dir = Path(args.data)
    passages = _load_corpus(data_dir / "corpus.tsv")
    train_path = _find_split(data_dir, args.domain, "train")
    if train_path is None:
        raise DataError(f"no train split for domain {args.domain!r} under {data_dir}")
    dataset, warnings = corpus.load_dataset(train_path, domain=args.domain,
                                            split="train")
    if warnings:
        log.warning("train.rejected_records", count=warnings)
    dev_path = Path(data_dir) / "datasets" / f"{args.domain}.dev.jsonl"
    if dev_path.exists():
        dev_ds, _ = corpus.load_dataset(dev_path, domain=args.domain, split="dev")
        dataset.dev.extend(dev_ds.dev)

    if args.init_q:
        q_init = biencoder.load_params(args.init_q)
        if q_init.role != biencoder.ROLE_QUESTION:
            raise DataError(f"{args.init_q}: not a question encoder")
    else:
        q_init = biencoder.init_params(
            biencoder.ROLE_QUESTION, args.domain, dim=args.dim,
            vocab_buckets=args.buckets, seed=args.seed,
        )
    if args.init_p:
        p_init = biencoder.load_params(args.init_p)
        if p_init.role != biencoder.ROLE_PASSAGE:
            raise DataError(f"{args.init_p}: not a passage encoder")
    else:
        p_init = biencoder.init_params(
            biencoder.ROLE_PASSAGE, args.domain, dim=args.dim,
            vocab_buckets=args.buckets, seed=args.seed,
        )

    cfg = training.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        freeze=args.freeze,
        hard_negatives_per_question=args.hard_negatives,
    )

    def on_epoch(stats):
        kv = {
            "domain": args.domain,
            "epoch": stats.epoch,
            "mean_loss": round(stats.mean_loss, 6),
            "wall_ms": round(stats.wall_ms, 1),
        }
        if stats.dev_recall_at_20 is not None:
            kv["dev_recall_at_20"] = round(stats.dev_recall_at_20, 4)
        log.info("train.epoch", **kv)

    result = training.train(cfg, dataset, passages, q_init, p_init,
                            use_title=args.use_title, on_epoch=on_epoch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    q_path = out / f"{args.domain}.q.enc"
    p_path = out / f"{args.domain}.p.enc"
    biencoder.save_params(result.q_params, q_path)
    biencoder.save_params(result.p_params, p_path)
    log.info("train.done", domain=args.domain,
             final_loss=round(result.log[-1].mean_loss, 6))
    inputs = [train_path] + ([dev_path] if dev_path.exists() else [])
    _write_manifest(out, args, inputs, started, extra={"seed": args.seed})
    return 0


def _cmd_encode_index(args, log):
    started = time.perf_counter()
    params = biencoder.load_params(args.encoder)
    passages = _load_corpus(args.corpus)
    index = dense.build_index(params, passages, use_title=args.use_title,
                              threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dense.save_index(index, out)
    log.info("encode-index.done", domain=index.domain,
             passages=index.n_passages, dim=index.dim)
    _write_manifest(out, args, [args.encoder, args.corpus], started)
    return 0


def _cmd_search(args, log):
    params = biencoder.load_params(args.q_encoder)
    index = dense.load_index(args.index)
    passages = _load_corpus(args.corpus) if args.corpus else None
    if passages is not None and index.n_passages != len(passages):
        raise DataError(
            f"index covers {index.n_passages} passages, corpus has {len(passages)}"
        )
    query_vec = biencoder.encode(params, args.query)
    result = dense.search(index, query_vec, args.k)
    answers = args.answer or []
    for rank, (pid, score) in enumerate(result.hits, start=1):
        if passages is not None and answers:
            from retrievalab.text import contains_answer

            flag = "yes" if contains_answer(passages[pid].text, answers) else "no"
        else:
            flag = "-"
        print(f"{rank}\t{pid}\t{score:.6f}\t{flag}")
    log.info("search.done", hits=len(result.hits), k=args.k)
    return 0


def _cmd_eval(args, log):
    started = time.perf_counter()
    params = biencoder.load_params(args.q_encoder)
    index = dense.load_index(args.index)
    passages = _load_corpus(args.corpus)
    dataset, warnings = corpus.load_dataset(args.data, split="test")
    if warnings:
        log.warning("eval.rejected_records", count=warnings)
    if not dataset.test:
        raise DataError(f"{args.data}: no usable examples")
    k_values = _parse_ints(args.k, "--k")
    if sorted(set(k_values)) != k_values:
        raise UsageError("--k values must be strictly increasing")
    queries = biencoder.encode_batch(params, [ex.question for ex in dataset.test])
    results = dense.search_batch(index, queries, max(k_values))
    recalls = {
        str(k): adaptation.recall_at_k(results, dataset.test, passages, k)
        for k in k_values
    }
    doc = {
        "q_domain": params.domain,
        "p_domain": index.domain,
        "test_set": dataset.domain,
        "n_questions": len(dataset.test),
        "recall": recalls,
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        _write_manifest(Path(args.out), args,
                        [args.q_encoder, args.index, args.data], started)
    else:
        sys.stdout.write(text)
    log.info("eval.done", **{k: round(v, 4) for k, v in recalls.items()})
    return 0


def _discover_encoders(enc_dir):
    enc_dir = Path(enc_dir)
    pairs = {}
    for q_path in sorted(enc_dir.glob("*.q.enc")):
        domain = q_path.name[:-len(".q.enc")]
        p_path = enc_dir / f"{domain}.p.enc"
        if not p_path.exists():
            raise DataError(f"{q_path} has no matching passage encoder")
        q = biencoder.load_params(q_path)
        p = biencoder.load_params(p_path)
        pairs[domain] = (q, p)
    if not pairs:
        raise DataError(f"no encoder pairs (*.q.enc / *.p.enc) under {enc_dir}")
    return pairs


def _cmd_matrix(args, log):
    started = time.perf_counter()
    passages = _load_corpus(args.corpus)
    encoders = _discover_encoders(args.encoders)
    tests_dir = Path(args.tests)
    test_sets = []
    for path in sorted(tests_dir.glob("*.test.jsonl")):
        domain = path.name[:-len(".test.jsonl")]
        ds, warnings = corpus.load_dataset(path, domain=domain, split="test")
        if warnings:
            log.warning("matrix.rejected_records", test_set=domain, count=warnings)
        test_sets.append(ds)
    if not test_sets:
        raise DataError(f"no test sets (*.test.jsonl) under {tests_dir}")

    k_values = _parse_ints(args.k, "--k")
    if sorted(set(k_values)) != k_values:
        raise UsageError("--k values must be strictly increasing")

    indexes = None
    if args.indexes:
        indexes = {}
        for path in sorted(Path(args.indexes).glob("*.dix")):
            idx = dense.load_index(path)
            indexes[idx.domain] = idx
        if not indexes:
            raise DataError(f"no dense indexes (*.dix) under {args.indexes}")

    bm25_index = None
    if args.bm25:
        if args.bm25_index:
            bm25_index = bm25.load_index(args.bm25_index)
            if bm25_index.n_passages != len(passages):
                raise DataError(
                    f"BM25 index covers {bm25_index.n_passages} passages, "
                    f"corpus has {len(passages)}"
                )
        else:
            bm25_index = bm25.build_index(passages, use_title=args.use_title)

    domains = sorted(encoders)
    spec = adaptation.EvalSpec(
        q_domains=domains,
        p_domains=domains,
        test_sets=test_sets,
        k_values=k_values,
        include_bm25=args.bm25,
    )
    matrix = adaptation.evaluate_matrix(
        spec, encoders, passages,
        bm25_index=bm25_index,
        indexes=indexes,
        use_title=args.use_title,
        threads=args.threads,
        extra_provenance={"k_values": k_values},
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    adaptation.save_matrix(matrix, out / "matrix.json")
    log.info("matrix.done", pairs=len(domains) ** 2, tests=len(test_sets),
             cells=len(matrix.cells) + len(matrix.bm25_cells))
    _write_manifest(out, args, [args.corpus], started)
    return 0


def _cmd_report(args, log):
    matrix = adaptation.load_matrix(args.matrix)
    text = adaptation.render_report(matrix, fmt=args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        log.info("report.done", format=args.format, out=str(args.out))
    else:
        sys.stdout.write(text)
        log.info("report.done", format=args.format)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser():
    parser = _Parser(
        prog="retrievalab",
        description="Train, index, search, and cross-evaluate per-domain "
                    "passage retrieval encoders.",
    )
    parser.add_argument("--log-json", action="store_true",
                        help="emit logs as JSON lines on stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic multi-domain workbench")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--vocab-per-domain", type=int, default=120)
    p.add_argument("--shared-vocab-fraction", type=float, default=0.3)
    p.add_argument("--passages-per-domain", type=int, default=120)
    p.add_argument("--questions", default="600,40,100",
                   help="train,dev,test question counts")
    p.add_argument("--chunk-size", type=int, default=28)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("ingest", help="chunk raw documents into a passage corpus")
    p.add_argument("--docs", required=True, type=Path,
                   help="id<TAB>body<TAB>title lines")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--chunk-size", type=int, default=corpus.DEFAULT_CHUNK_SIZE)
    p.add_argument("--header", action="store_true",
                   help="skip the first line of --docs")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("mine", help="attach BM25 positives and hard negatives")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--format", choices=("jsonl", "dpr-json"), default="jsonl")
    p.add_argument("--candidates", type=int, default=bm25.DEFAULT_CANDIDATES)
    p.add_argument("--negatives", type=int, default=bm25.DEFAULT_NEGATIVES)
    p.add_argument("--k1", type=float, default=bm25.DEFAULT_K1)
    p.add_argument("--b", type=float, default=bm25.DEFAULT_B)
    p.add_argument("--index", type=Path, help="load a saved BM25 index")
    p.add_argument("--save-index", type=Path, help="save the BM25 index")
    p.add_argument("--use-title", action="store_true")
    p.set_defaults(func=_cmd_mine)

    p = sub.add_parser("train", help="train one domain's encoder pair")
    p.add_argument("--domain", required=True)
    p.add_argument("--data", required=True, type=Path,
                   help="directory with corpus.tsv and datasets/")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--epochs", type=int, default=training.DEFAULT_EPOCHS)
    p.add_argument("--batch-size", type=int, default=training.DEFAULT_BATCH_SIZE)
    p.add_argument("--lr", type=float, default=training.DEFAULT_LEARNING_RATE)
    p.add_argument("--freeze", choices=training.FREEZE_MODES, default="none")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--dim", type=int, default=biencoder.DEFAULT_DIM)
    p.add_argument("--buckets", type=int, default=biencoder.DEFAULT_BUCKETS)
    p.add_argument("--hard-negatives", type=int, default=1)
    p.add_argument("--init-q", type=Path, help="warm-start question encoder")
    p.add_argument("--init-p", type=Path, help="warm-start passage encoder")
    p.add_argument("--use-title", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("encode-index", help="encode a corpus into a dense index")
    p.add_argument("--encoder", required=True, type=Path)
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--use-title", action="store_true")
    p.set_defaults(func=_cmd_encode_index)

    p = sub.add_parser("search", help="run one query against a dense index")
    p.add_argument("--index", required=True, type=Path)
    p.add_argument("--q-encoder", required=True, type=Path)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--corpus", type=Path,
                   help="needed for the answer column")
    p.add_argument("--answer", action="append",
                   help="answer string; may repeat")
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("eval", help="recall of one encoder/index pair on a test set")
    p.add_argument("--index", required=True, type=Path)
    p.add_argument("--q-encoder", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--k", default="20,100")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("matrix", help="evaluate every cross-domain encoder pairing")
    p.add_argument("--encoders", required=True, type=Path,
                   help="directory of <domain>.q.enc / <domain>.p.enc")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--tests", required=True, type=Path,
                   help="directory of <domain>.test.jsonl")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--k", default="20,100")
    p.add_argument("--bm25", action="store_true", help="include the BM25 baseline row")
    p.add_argument("--bm25-index", type=Path)
    p.add_argument("--indexes", type=Path,
                   help="directory of <domain>.dix to reuse instead of encoding")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--use-title", action="store_true")
    p.set_defaults(func=_cmd_matrix)

    p = sub.add_parser("report", help="render a saved matrix as markdown or csv")
    p.add_argument("--matrix", required=True, type=Path)
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_report)

    return parser


def _suggest(message):
    if "invalid choice" not in message:
        return message
    try:
        bad = message.split("invalid choice: ")[1].split("'")[1]
    except IndexError:
        return message
    close = difflib.get_close_matches(bad, _COMMANDS, n=1)
    if close:
        return f"{message}\n(did you mean {close[0]!r}?)"
    return message


def dispatch(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as e:
        print(f"retrievalab: error: {_suggest(str(e))}", file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    log = _Logger(json_mode=args.log_json)
    try:
        return args.func(args, log) or 0
    except UsageError as e:
        print(f"retrievalab: error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"retrievalab: error: {e}", file=sys.stderr)
        return 1
    except training.TrainingDiverged as e:
        log.error("train.diverged", detail=str(e))
        return 2
    except (DataError, FileNotFoundError, IsADirectoryError) as e:
        log.error("failed", detail=str(e))
        return 2


def main(argv=None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
