"""Recall metric, the cross-domain evaluation matrix, and report rendering."""

import json

import numpy as np
import pytest

from retrievalab import biencoder as be
from retrievalab import bm25, dense
from retrievalab.adaptation import (
    AdaptationMatrix,
    EvalSpec,
    corpus_id,
    evaluate_matrix,
    load_matrix,
    recall_at_k,
    relative_best_ood,
    render_report,
    save_matrix,
)
from retrievalab.corpus import DomainDataset, QAExample
from retrievalab.errors import DataError, FormatError

from conftest import make_passages


def _result(ids):
    return dense.SearchResult(hits=[(pid, -float(rank)) for rank, pid in enumerate(ids)])


class TestRecallAtK:
    def test_rank1_rank25_miss_fixture(self):
        # passage 0 holds "gold"; three questions hit it at rank 1, rank 25,
        # and never
        passages = make_passages(["the gold answer", *("filler text",) * 29])
        examples = [QAExample(question=f"q{i}", answers=["gold"]) for i in range(3)]
        results = [
            _result([0] + list(range(1, 26))),
            _result(list(range(1, 25)) + [0] + [25]),
            _result(list(range(1, 27))),
        ]
        assert recall_at_k(results, examples, passages, 20) == pytest.approx(1 / 3)
        assert recall_at_k(results, examples, passages, 100) == pytest.approx(2 / 3)

    def test_non_decreasing_in_k(self):
        rng = np.random.default_rng(55)
        passages = make_passages([f"tok{i}" for i in range(30)])
        examples = []
        results = []
        for _ in range(40):
            gold = int(rng.integers(0, 30))
            examples.append(QAExample(question="q", answers=[f"tok{gold}"]))
            order = rng.permutation(30)
            results.append(_result([int(i) for i in order]))
        values = [recall_at_k(results, examples, passages, k) for k in range(1, 31)]
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert values[-1] == 1.0

    def test_any_answer_counts(self):
        passages = make_passages(["contains beta only"])
        examples = [QAExample(question="q", answers=["alpha", "beta"])]
        assert recall_at_k([_result([0])], examples, passages, 1) == 1.0

    def test_misaligned_lengths_rejected(self):
        with pytest.raises(ValueError, match="results"):
            recall_at_k([], [QAExample(question="q", answers=["a"])], [], 5)

    def test_empty_examples_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            recall_at_k([], [], [], 5)


class TestEvalSpec:
    def _spec(self, **kw):
        ds = DomainDataset(domain="d0", test=[QAExample(question="q", answers=["a"])])
        defaults = dict(q_domains=["d0"], p_domains=["d0"], test_sets=[ds])
        defaults.update(kw)
        return EvalSpec(**defaults)

    def test_valid(self):
        self._spec().validate()

    def test_empty_axes_rejected(self):
        with pytest.raises(ValueError):
            self._spec(q_domains=[]).validate()

    @pytest.mark.parametrize("ks", [[], [0, 5], [20, 20], [100, 20]])
    def test_bad_cutoffs_rejected(self, ks):
        with pytest.raises(ValueError):
            self._spec(k_values=ks).validate()

    def test_empty_test_split_rejected(self):
        ds = DomainDataset(domain="d0")
        with pytest.raises(DataError, match="no test examples"):
            self._spec(test_sets=[ds]).validate()


class TestCorpusId:
    def test_format(self):
        cid = corpus_id(make_passages(["a", "b"]))
        n, crc = cid.split(":")
        assert n == "2"
        assert len(crc) == 8

    def test_sensitive_to_text(self):
        assert corpus_id(make_passages(["a", "b"])) != corpus_id(make_passages(["a", "c"]))


def _two_domain_setup(seed=0):
    """Two encoder pairs over one small shared corpus, with test questions
    whose answers pin down recall by construction."""
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(30)]
    texts = [
        " ".join([f"key{i}"] + [words[int(j)] for j in rng.integers(0, 30, size=4)])
        for i in range(12)
    ]
    passages = make_passages(texts)
    encoders = {}
    for d, domain in enumerate(("d0", "d1")):
        q = be.init_params(be.ROLE_QUESTION, domain, dim=8, vocab_buckets=64, seed=d)
        p = be.init_params(be.ROLE_PASSAGE, domain, dim=8, vocab_buckets=64, seed=d)
        encoders[domain] = (q, p)
    test_sets = []
    for domain in ("d0", "d1"):
        examples = []
        for _ in range(6):
            pid = int(rng.integers(0, 12))
            examples.append(QAExample(
                question=f"key{pid} {words[int(rng.integers(0, 30))]}",
                answers=[f"key{pid}"],
                positive=pid,
            ))
        test_sets.append(DomainDataset(domain=domain, test=examples))
    spec = EvalSpec(q_domains=["d0", "d1"], p_domains=["d0", "d1"],
                    test_sets=test_sets, k_values=[2, 6])
    return spec, encoders, passages, test_sets


class TestEvaluateMatrix:
    def test_every_cell_present(self):
        spec, encoders, passages, _ = _two_domain_setup()
        matrix = evaluate_matrix(spec, encoders, passages)
        assert len(matrix.cells) == 2 * 2 * 2 * 2
        for q in ("d0", "d1"):
            for p in ("d0", "d1"):
                for t in ("d0", "d1"):
                    for k in (2, 6):
                        assert 0.0 <= matrix.cell(q, p, t, k) <= 1.0

    def test_cells_match_direct_computation(self):
        # each cell must come from exactly the (q encoder, p index) pair it
        # names; recompute every pairing independently
        spec, encoders, passages, test_sets = _two_domain_setup()
        matrix = evaluate_matrix(spec, encoders, passages)
        for q_domain in ("d0", "d1"):
            for p_domain in ("d0", "d1"):
                index = dense.build_index(encoders[p_domain][1], passages)
                for ds in test_sets:
                    queries = be.encode_batch(
                        encoders[q_domain][0], [ex.question for ex in ds.test]
                    )
                    results = dense.search_batch(index, queries, 6)
                    for k in (2, 6):
                        expected = recall_at_k(results, ds.test, passages, k)
                        assert matrix.cell(q_domain, p_domain, ds.domain, k) == expected

    def test_bm25_row_matches_direct_search(self):
        spec, encoders, passages, test_sets = _two_domain_setup()
        spec.include_bm25 = True
        index = bm25.build_index(passages)
        matrix = evaluate_matrix(spec, encoders, passages, bm25_index=index)
        for ds in test_sets:
            results = [
                dense.SearchResult(hits=bm25.bm25_search(index, ex.question, 6))
                for ex in ds.test
            ]
            for k in (2, 6):
                expected = recall_at_k(results, ds.test, passages, k)
                assert matrix.bm25_cells[(ds.domain, k)] == expected

    def test_bm25_requested_but_missing(self):
        spec, encoders, passages, _ = _two_domain_setup()
        spec.include_bm25 = True
        with pytest.raises(DataError, match="BM25"):
            evaluate_matrix(spec, encoders, passages)

    def test_supplied_index_reused(self):
        spec, encoders, passages, _ = _two_domain_setup()
        idx0 = dense.build_index(encoders["d0"][1], passages)
        idx1 = dense.build_index(encoders["d1"][1], passages)
        with_reuse = evaluate_matrix(spec, encoders, passages,
                                     indexes={"d0": idx0, "d1": idx1})
        rebuilt = evaluate_matrix(spec, encoders, passages)
        assert with_reuse.cells == rebuilt.cells

    def test_foreign_index_refused(self):
        spec, encoders, passages, _ = _two_domain_setup()
        foreign = dense.build_index(encoders["d1"][1], passages)
        with pytest.raises(DataError, match="different encoder"):
            evaluate_matrix(spec, encoders, passages, indexes={"d0": foreign})

    def test_thread_count_does_not_change_cells(self):
        spec, encoders, passages, _ = _two_domain_setup()
        one = evaluate_matrix(spec, encoders, passages, threads=1)
        four = evaluate_matrix(spec, encoders, passages, threads=4)
        assert one.cells == four.cells

    def test_missing_domain_rejected(self):
        spec, encoders, passages, _ = _two_domain_setup()
        del encoders["d1"]
        with pytest.raises(DataError, match="d1"):
            evaluate_matrix(spec, encoders, passages)

    def test_swapped_roles_rejected(self):
        spec, encoders, passages, _ = _two_domain_setup()
        q, p = encoders["d0"]
        encoders["d0"] = (p, q)
        with pytest.raises(DataError, match="roles"):
            evaluate_matrix(spec, encoders, passages)

    def test_dim_disagreement_rejected(self):
        spec, encoders, passages, _ = _two_domain_setup()
        encoders["d1"] = (
            be.init_params(be.ROLE_QUESTION, "d1", dim=16, vocab_buckets=64),
            be.init_params(be.ROLE_PASSAGE, "d1", dim=16, vocab_buckets=64),
        )
        with pytest.raises(DataError, match="dimensions"):
            evaluate_matrix(spec, encoders, passages)

    def test_provenance_recorded(self):
        spec, encoders, passages, _ = _two_domain_setup()
        matrix = evaluate_matrix(spec, encoders, passages,
                                 extra_provenance={"note": "x"})
        assert matrix.provenance["corpus_id"] == corpus_id(passages)
        assert matrix.provenance["note"] == "x"
        sums = matrix.provenance["encoder_checksums"]
        assert set(sums) == {"d0", "d1"}
        assert sums["d0"]["question"] == f"{be.checksum_params(encoders['d0'][0]):08x}"


def _hand_matrix():
    """Two domains, recall values chosen by hand.

    At k=20 on test d0: IND 0.791, OOD-Q (Q=d1) 0.9, OOD-P (P=d1) 0.3.
    On test d1: IND 0.5, OOD-Q 0.4, OOD-P 0.2.
    """
    cells = {}
    values = {
        ("d0", "d0", "d0"): (0.791, 0.859),
        ("d1", "d0", "d0"): (0.9, 0.95),
        ("d0", "d1", "d0"): (0.3, 0.4),
        ("d1", "d1", "d0"): (0.25, 0.35),
        ("d0", "d0", "d1"): (0.1, 0.15),
        ("d1", "d0", "d1"): (0.2, 0.3),
        ("d0", "d1", "d1"): (0.4, 0.45),
        ("d1", "d1", "d1"): (0.5, 0.6),
    }
    for (q, p, t), (r20, r100) in values.items():
        cells[(q, p, t, 20)] = r20
        cells[(q, p, t, 100)] = r100
    return AdaptationMatrix(
        q_domains=["d0", "d1"],
        p_domains=["d0", "d1"],
        test_sets=["d0", "d1"],
        k_values=[20, 100],
        cells=cells,
        bm25_cells={("d0", 20): 0.85, ("d0", 100): 0.9,
                    ("d1", 20): 0.55, ("d1", 100): 0.65},
        n_questions={"d0": 50, "d1": 50},
        provenance={"corpus_id": "12:deadbeef"},
    )


class TestRelativeBestOod:
    def test_hand_values(self):
        summary = relative_best_ood(_hand_matrix(), 20)
        d0 = summary["d0"]
        assert d0["ind"] == 0.791
        assert d0["best_ood_q_domain"] == "d1"
        assert d0["best_ood_q"] == 0.9
        assert d0["best_ood_q_delta_points"] == pytest.approx(10.9)
        assert d0["best_ood_q_ratio"] == pytest.approx(0.9 / 0.791)
        assert d0["best_ood_p_domain"] == "d1"
        assert d0["best_ood_p"] == 0.3
        assert d0["best_ood_p_delta_points"] == pytest.approx(-49.1)
        d1 = summary["d1"]
        assert d1["best_ood_q_delta_points"] == pytest.approx(-10.0)
        assert d1["best_ood_p_delta_points"] == pytest.approx(-30.0)

    def test_tied_best_takes_lowest_domain_name(self):
        matrix = _hand_matrix()
        matrix.q_domains = ["d0", "d1", "d2"]
        for t in ("d0", "d1"):
            for k in (20, 100):
                matrix.cells[("d2", t, t, k)] = matrix.cells[("d1", t, t, k)]
                for p in ("d0", "d1"):
                    matrix.cells.setdefault(("d2", p, t, k), 0.0)
        summary = relative_best_ood(matrix, 20)
        assert summary["d0"]["best_ood_q_domain"] == "d1"

    def test_zero_ind_gives_none_ratio(self):
        matrix = _hand_matrix()
        for k in (20, 100):
            matrix.cells[("d0", "d0", "d0", k)] = 0.0
        summary = relative_best_ood(matrix, 20)
        assert summary["d0"]["best_ood_q_ratio"] is None

    def test_single_domain_rejected(self):
        matrix = _hand_matrix()
        matrix.q_domains = ["d0"]
        with pytest.raises(DataError, match="two domains"):
            relative_best_ood(matrix, 20)

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            relative_best_ood(_hand_matrix(), 20, mode="delta")


class TestMatrixFile:
    def test_round_trip(self, tmp_path):
        matrix = _hand_matrix()
        path = tmp_path / "matrix.json"
        save_matrix(matrix, path)
        back = load_matrix(path)
        assert back.cells == matrix.cells
        assert back.bm25_cells == matrix.bm25_cells
        assert back.k_values == matrix.k_values
        assert back.n_questions == matrix.n_questions
        assert back.provenance == matrix.provenance

    def test_save_is_byte_stable(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_matrix(_hand_matrix(), a)
        save_matrix(_hand_matrix(), b)
        assert a.read_bytes() == b.read_bytes()

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{nope", encoding="utf-8")
        with pytest.raises(FormatError, match="JSON"):
            load_matrix(path)

    def test_missing_format_marker_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"cells": []}), encoding="utf-8")
        with pytest.raises(FormatError, match="format"):
            load_matrix(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"format": "adaptation-matrix", "version": 99}),
                        encoding="utf-8")
        with pytest.raises(FormatError, match="version"):
            load_matrix(path)


class TestRenderReport:
    def test_cell_number_format(self):
        # 0.791/0.859 must print as percentages with one decimal
        doc = render_report(_hand_matrix(), fmt="markdown")
        assert "79.1/85.9" in doc.replace("*", "")

    def test_ind_diagonal_consistent_across_tables(self):
        doc = render_report(_hand_matrix(), fmt="markdown").replace("*", "")
        # the d0 IND cell shows up in the pairing table, the P-swap table,
        # and the Q-swap table with identical digits
        assert doc.count("79.1/85.9") == 3
        assert doc.count("50.0/60.0") == 3

    def test_markdown_marks_column_maxima_bold(self):
        doc = render_report(_hand_matrix(), fmt="markdown")
        # Q=d1 P=d0 holds the best d0-test value at both cutoffs
        assert "**90.0**/**95.0**" in doc

    def test_csv_marks_column_maxima_with_star(self):
        doc = render_report(_hand_matrix(), fmt="csv")
        assert "90.0*/95.0*" in doc

    def test_same_numbers_in_both_formats(self):
        md = render_report(_hand_matrix(), fmt="markdown")
        csv = render_report(_hand_matrix(), fmt="csv")
        strip = lambda doc: [
            token
            for token in doc.replace("*", "").replace("|", " ").replace(",", " ").split()
            if token.replace("/", "").replace(".", "").isdigit()
        ]
        assert strip(md) == strip(csv)

    def test_all_tables_present(self):
        doc = render_report(_hand_matrix(), fmt="markdown")
        assert "## All encoder pairings" in doc
        assert "## Passage encoder swapped (question encoder in-domain)" in doc
        assert "## Question encoder swapped (passage encoder in-domain)" in doc
        assert "## Best out-of-domain encoder versus in-domain" in doc
        assert "BM25" in doc

    def test_single_domain_skips_summary(self):
        matrix = _hand_matrix()
        matrix.q_domains = ["d0"]
        matrix.p_domains = ["d0"]
        matrix.test_sets = ["d0"]
        doc = render_report(matrix, fmt="markdown")
        assert "Best out-of-domain" not in doc

    def test_unknown_format_rejected(self):
        with pytest.raises(ValueError, match="format"):
            render_report(_hand_matrix(), fmt="html")
