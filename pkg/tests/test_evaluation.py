"""Ranking metric against independent oracles, aggregation, and file IO."""

import math

import numpy as np
import pytest
from conftest import (
    fruit_hierarchy,
    oracle_r_precision,
    oracle_report,
    random_ranking_instance,
)

from levelwise import evaluation, exits
from levelwise.data import Document, build_tree_hierarchy
from levelwise.encoder import ModelConfig, TransformerEncoder
from levelwise.evaluation import EvalReport, PredictionRecord
from levelwise.hierarchy import LevelIndex, ancestors


class TestRPrecision:
    def test_misranked_leaf_scores_three_quarters(self):
        """Gold is the closed set above one leaf; the model ranks the
        sibling leaf on top instead, so 3 of the top 4 are correct."""
        h = fruit_hierarchy()
        index = LevelIndex(h)
        gold = ancestors(h, "grape") | {"grape"}
        assert len(gold) == 4
        scores = {
            "citrus-fruit": 0.9,
            "fruit": 0.85,
            "plant-product": 0.8,
            "agri-foodstuffs": 0.75,
            "grape": 0.3,
            "vegetable": 0.2,
            "animal-product": 0.1,
        }
        vector = np.array([scores[label] for label in index.global_order])
        value = evaluation.r_precision(vector, gold, index.global_order)
        assert value == 0.75

    def test_six_label_half_credit(self):
        order = ["a", "b", "c", "d", "e", "f"]
        scores = np.array([0.9, 0.8, 0.1, 0.05, 0.04, 0.03])
        value = evaluation.r_precision(scores, {"a", "c"}, order)
        assert value == 0.5

    def test_perfect_ranking_is_one(self, rng):
        order = [f"x{i}" for i in range(8)]
        gold = {"x1", "x4", "x6"}
        scores = np.array(
            [0.9 if label in gold else rng.uniform(0.0, 0.5) for label in order]
        )
        assert evaluation.r_precision(scores, gold, order) == 1.0

    def test_all_tied_scores_rank_by_ascending_id(self):
        order = ["a", "b", "c"]
        scores = np.array([0.5, 0.5, 0.5])
        assert evaluation.r_precision(scores, {"a"}, order) == 1.0
        assert evaluation.r_precision(scores, {"b"}, order) == 0.0
        assert evaluation.r_precision(scores, {"a", "b"}, order) == 1.0

    def test_matches_sorting_oracle_with_ties(self, rng):
        for _ in range(300):
            size = int(rng.integers(1, 21))
            order = [f"t{i:02d}" for i in range(size)]
            scores = rng.integers(0, 5, size=size) / 4.0
            gold_size = int(rng.integers(1, size + 1))
            picks = rng.choice(size, size=gold_size, replace=False)
            gold = {order[int(i)] for i in picks}
            mine = evaluation.r_precision(scores, gold, order)
            theirs = oracle_r_precision(scores, gold, order)
            assert mine == theirs

    def test_invariant_under_random_monotone_map(self, rng):
        for _ in range(50):
            size = int(rng.integers(2, 15))
            order = [f"t{i:02d}" for i in range(size)]
            scores = rng.integers(0, 4, size=size) / 3.0
            gold = {order[int(rng.integers(0, size))]}
            base = evaluation.r_precision(scores, gold, order)
            # map each distinct value to a fresh strictly increasing level
            unique = np.unique(scores)
            remapped_values = np.cumsum(rng.uniform(0.1, 1.0, size=unique.size))
            lookup = dict(zip(unique.tolist(), remapped_values.tolist()))
            remapped = np.array([lookup[v] for v in scores.tolist()])
            assert evaluation.r_precision(remapped, gold, order) == base

    def test_invariant_under_positive_scaling(self, rng):
        order = [f"t{i}" for i in range(10)]
        scores = rng.uniform(size=10)
        gold = {"t3", "t7"}
        base = evaluation.r_precision(scores, gold, order)
        for factor in (2.0, 0.5, 4.0):
            scaled = evaluation.r_precision(scores * factor, gold, order)
            assert scaled == base

    def test_errors(self):
        order = ["a", "b"]
        with pytest.raises(evaluation.EvaluationError, match="empty gold"):
            evaluation.r_precision(np.array([0.1, 0.2]), set(), order)
        with pytest.raises(evaluation.EvaluationError, match="labels"):
            evaluation.r_precision(np.array([0.1]), {"a"}, order)
        with pytest.raises(evaluation.EvaluationError, match="finite"):
            evaluation.r_precision(np.array([0.1, np.nan]), {"a"}, order)
        with pytest.raises(evaluation.EvaluationError, match="outside"):
            evaluation.r_precision(np.array([0.1, 0.2]), {"zzz"}, order)


def _doc_with_targets(doc_id, index, gold):
    targets = [
        np.array(
            [1.0 if label in gold else 0.0 for label in index.level_orders[n]]
        )
        for n in range(index.depth)
    ]
    return Document(
        doc_id=doc_id,
        text="",
        labels=frozenset(),
        level_targets=targets,
        flat_target=np.concatenate(targets),
    )


class TestPerLevelEval:
    def test_two_document_mean(self):
        h = build_tree_hierarchy(1, 2)  # single level, labels l1_0000/l1_0001
        index = LevelIndex(h)
        docs = [
            _doc_with_targets("a", index, {"l1_0000"}),
            _doc_with_targets("b", index, {"l1_0000"}),
        ]
        records = [
            PredictionRecord("a", (np.array([0.9, 0.1]),)),  # hit
            PredictionRecord("b", (np.array([0.1, 0.9]),)),  # miss
        ]
        report = evaluation.per_level_eval(records, docs, index)
        assert report.level_values == (0.5,)
        assert report.level_counts == (2,)
        assert report.micro == 0.5
        assert report.macro == 0.5

    def test_documents_without_gold_at_level_are_skipped(self, fruits):
        index = LevelIndex(fruits)
        full = ancestors(fruits, "grape") | {"grape"}
        top_only = {"agri-foodstuffs"}
        docs = [
            _doc_with_targets("deep", index, full),
            _doc_with_targets("shallow", index, top_only),
        ]
        perfect = [
            PredictionRecord(
                d.doc_id,
                tuple(np.asarray(t) for t in d.level_targets),
            )
            for d in docs
        ]
        report = evaluation.per_level_eval(perfect, docs, index)
        assert report.level_counts == (2, 1, 1, 1)
        assert report.level_values == (1.0, 1.0, 1.0, 1.0)
        assert report.micro == 1.0 and report.macro == 1.0

    def test_empty_document_set_yields_absent_cells(self, fruits):
        index = LevelIndex(fruits)
        report = evaluation.per_level_eval([], [], index)
        assert report.level_values == (None,) * 4
        assert report.micro is None and report.macro is None
        evaluation.assert_report_invariants(report)

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(150):
            index, docs, records, gold, scores = random_ranking_instance(rng)
            report = evaluation.per_level_eval(records, docs, index)
            expected = oracle_report(gold, scores, index.level_orders)
            for mine, theirs in zip(report.level_values, expected["levels"]):
                if theirs is None:
                    assert mine is None
                else:
                    assert abs(mine - theirs) < 1e-12
            assert list(report.level_counts) == expected["counts"]
            for mine, theirs in (
                (report.micro, expected["micro"]),
                (report.macro, expected["macro"]),
            ):
                if theirs is None:
                    assert mine is None
                else:
                    assert abs(mine - theirs) < 1e-12
            evaluation.assert_report_invariants(report)

    def test_micro_equals_flat_ranking_of_assembled_scores(self, rng):
        index, docs, records, gold, _ = random_ranking_instance(rng)
        report = evaluation.per_level_eval(records, docs, index)
        total = 0.0
        count = 0
        for doc, record in zip(docs, records):
            all_gold = set().union(*(g for g in gold[docs.index(doc)]))
            if not all_gold:
                continue
            flat = exits.assemble_flat_scores(
                [s.reshape(1, -1) for s in record.level_scores], index
            )[0]
            total += evaluation.r_precision(flat, all_gold, index.global_order)
            count += 1
        if count:
            assert abs(report.micro - total / count) < 1e-15
        else:
            assert report.micro is None

    def test_errors(self, fruits):
        index = LevelIndex(fruits)
        doc = _doc_with_targets("a", index, {"agri-foodstuffs"})
        record = PredictionRecord(
            "a", tuple(np.asarray(t) for t in doc.level_targets)
        )
        with pytest.raises(evaluation.EvaluationError, match="duplicate"):
            evaluation.per_level_eval([record, record], [doc], index)
        with pytest.raises(evaluation.EvaluationError, match="no prediction"):
            evaluation.per_level_eval([], [doc], index)
        short = PredictionRecord("a", (np.array([1.0]),))
        with pytest.raises(evaluation.EvaluationError, match="score vectors"):
            evaluation.per_level_eval([short, record][:1], [doc], index)
        wrong = PredictionRecord(
            "a",
            (np.array([1.0, 0.0]),) + tuple(doc.level_targets[1:]),
        )
        with pytest.raises(evaluation.EvaluationError, match="level 1"):
            evaluation.per_level_eval([wrong], [doc], index)


class TestAggregateRuns:
    @staticmethod
    def _report(micro, level1):
        return EvalReport(
            level_values=(level1,),
            level_counts=(3,),
            micro=micro,
            macro=level1,
            documents=3,
        )

    def test_identical_reports_have_zero_std(self):
        reports = [self._report(0.8, 0.9)] * 3
        cells = evaluation.aggregate_runs(reports)
        assert cells["micro"].mean == 0.8 and cells["micro"].std == 0.0
        assert cells["level1"].mean == 0.9 and cells["level1"].std == 0.0

    def test_hand_computed_pair(self):
        reports = [self._report(0.80, 1.0), self._report(0.82, 1.0)]
        cells = evaluation.aggregate_runs(reports)
        assert math.isclose(cells["micro"].mean, 0.81, abs_tol=1e-12)
        assert math.isclose(cells["micro"].std, 0.01, abs_tol=1e-12)

    def test_triple_matches_manual_mean_and_std(self, rng):
        values = rng.uniform(0.5, 1.0, size=3)
        reports = [self._report(v, v) for v in values]
        cells = evaluation.aggregate_runs(reports)
        mean = (values[0] + values[1] + values[2]) / 3.0
        variance = sum((v - mean) ** 2 for v in values) / 3.0
        assert math.isclose(cells["micro"].mean, mean, abs_tol=1e-12)
        assert math.isclose(
            cells["micro"].std, math.sqrt(variance), abs_tol=1e-12
        )

    def test_incongruent_reports_rejected(self):
        two_level = EvalReport(
            level_values=(0.5, 0.5),
            level_counts=(1, 1),
            micro=0.5,
            macro=0.5,
            documents=1,
        )
        with pytest.raises(evaluation.EvaluationError, match="depths"):
            evaluation.aggregate_runs([self._report(0.5, 0.5), two_level])
        absent = EvalReport(
            level_values=(None,),
            level_counts=(0,),
            micro=None,
            macro=None,
            documents=0,
        )
        with pytest.raises(evaluation.EvaluationError, match="absent"):
            evaluation.aggregate_runs([self._report(0.5, 0.5), absent])

    def test_empty_rejected(self):
        with pytest.raises(evaluation.EvaluationError, match="no reports"):
            evaluation.aggregate_runs([])


class TestReportText:
    def test_single_report_layout(self):
        report = EvalReport(
            level_values=(1.0, 0.5),
            level_counts=(2, 1),
            micro=0.75,
            macro=0.75,
            documents=2,
        )
        text = evaluation.report_text(report)
        assert text.splitlines() == [
            "metric\tvalue\tdocuments",
            "level-1\t1.0000\t2",
            "level-2\t0.5000\t1",
            "micro\t0.7500\t2",
            "macro\t0.7500\t-",
        ]

    def test_absent_level_renders_na(self):
        report = EvalReport(
            level_values=(0.5, None),
            level_counts=(1, 0),
            micro=0.5,
            macro=0.5,
            documents=1,
        )
        lines = evaluation.report_text(report).splitlines()
        assert lines[2] == "level-2\tn/a\t0"

    def test_aggregate_layout(self):
        cells = {
            "level1": evaluation.AggregateCell(mean=0.81, std=0.01),
            "micro": evaluation.AggregateCell(mean=0.9, std=0.0),
            "macro": None,
        }
        lines = evaluation.aggregate_text(cells, depth=1).splitlines()
        assert lines == [
            "metric\tmean\tstd",
            "level1\t0.8100\t0.0100",
            "micro\t0.9000\t0.0000",
            "macro\tn/a\tn/a",
        ]


class TestPredictionIO:
    def test_round_trip_bitwise_and_byte_stable(self, tmp_path, rng):
        index, _, records, _, _ = random_ranking_instance(rng)
        path = tmp_path / "scores.tsv"
        evaluation.save_predictions(records, index, path)
        loaded = evaluation.load_predictions(path, index)
        assert [r.doc_id for r in loaded] == [r.doc_id for r in records]
        for a, b in zip(records, loaded):
            for x, y in zip(a.level_scores, b.level_scores):
                assert np.asarray(x).tobytes() == y.tobytes()
        again = tmp_path / "scores2.tsv"
        evaluation.save_predictions(loaded, index, again)
        assert path.read_bytes() == again.read_bytes()

    def test_errors(self, tmp_path, fruits):
        index = LevelIndex(fruits)
        bad_header = tmp_path / "a.tsv"
        bad_header.write_text("#nope\n", encoding="utf-8")
        with pytest.raises(evaluation.EvaluationError, match="header"):
            evaluation.load_predictions(bad_header, index)

        record = PredictionRecord(
            "d0",
            tuple(np.zeros(index.size(n)) for n in range(1, 5)),
        )
        path = tmp_path / "scores.tsv"
        evaluation.save_predictions([record], index, path)

        lines = path.read_text(encoding="utf-8").splitlines()
        truncated = tmp_path / "missing.tsv"
        truncated.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
        with pytest.raises(evaluation.EvaluationError, match="missing label"):
            evaluation.load_predictions(truncated, index)

        extra = tmp_path / "extra.tsv"
        extra.write_text(
            "\n".join(lines) + "\nd0\tnot-a-label\t0.5\n", encoding="utf-8"
        )
        with pytest.raises(evaluation.EvaluationError, match="unknown"):
            evaluation.load_predictions(extra, index)

        doubled = tmp_path / "doubled.tsv"
        doubled.write_text(
            "\n".join(lines) + "\n" + lines[1] + "\n", encoding="utf-8"
        )
        with pytest.raises(evaluation.EvaluationError, match="duplicate"):
            evaluation.load_predictions(doubled, index)

        garbled = tmp_path / "garbled.tsv"
        garbled.write_text(
            lines[0] + "\nd0\tagri-foodstuffs\tnot-a-float\n", encoding="utf-8"
        )
        with pytest.raises(evaluation.EvaluationError, match="bad score"):
            evaluation.load_predictions(garbled, index)


class TestScoreDocuments:
    @staticmethod
    def _setup(flat=False):
        h = build_tree_hierarchy(2, 2)
        index = LevelIndex(h)
        config = ModelConfig(
            vocabulary_size=30,
            num_layers=2,
            hidden_size=8,
            num_heads=2,
            feed_forward_size=16,
            max_sequence_length=10,
            dropout_rate=0.0,
            seed=6,
        )
        encoder = TransformerEncoder(config)
        if flat:
            wiring = exits.Wiring(scheme=exits.FLAT, flat_layer=2).validate(2, 0)
        else:
            wiring = exits.build_wiring(
                exits.CUSTOM, 2, 2, custom_map={1: (1,), 2: (2,)}
            )
        heads = exits.create_heads(wiring, index, 8, seed=6)
        docs = [
            Document(
                doc_id=f"d{i}",
                text="",
                labels=frozenset(),
                token_ids=[2] + [4 + i] * (i + 1) + [3],
            )
            for i in range(5)
        ]
        return encoder, heads, wiring, index, docs

    def test_shapes_and_alignment(self):
        encoder, heads, wiring, index, docs = self._setup()
        records = evaluation.score_documents(
            encoder, heads, wiring, docs, index, batch_size=2
        )
        assert [r.doc_id for r in records] == [d.doc_id for d in docs]
        for record in records:
            assert [s.shape for s in record.level_scores] == [(2,), (4,)]

    def test_flat_wiring_slices_match_level_sizes(self):
        encoder, heads, wiring, index, docs = self._setup(flat=True)
        records = evaluation.score_documents(
            encoder, heads, wiring, docs, index, batch_size=3
        )
        for record in records:
            assert [s.shape for s in record.level_scores] == [(2,), (4,)]
            flat = exits.assemble_flat_scores(
                [s.reshape(1, -1) for s in record.level_scores], index
            )
            assert flat.shape == (1, 6)

    def test_deterministic_across_calls(self):
        encoder, heads, wiring, index, docs = self._setup()
        first = evaluation.score_documents(
            encoder, heads, wiring, docs, index, batch_size=2
        )
        second = evaluation.score_documents(
            encoder, heads, wiring, docs, index, batch_size=2
        )
        for a, b in zip(first, second):
            for x, y in zip(a.level_scores, b.level_scores):
                assert x.tobytes() == y.tobytes()

    def test_batch_size_does_not_change_scores(self):
        encoder, heads, wiring, index, docs = self._setup()
        small = evaluation.score_documents(
            encoder, heads, wiring, docs, index, batch_size=1
        )
        large = evaluation.score_documents(
            encoder, heads, wiring, docs, index, batch_size=5
        )
        for a, b in zip(small, large):
            for x, y in zip(a.level_scores, b.level_scores):
                assert np.allclose(x, y, atol=1e-12, rtol=0.0)

    def test_unprepared_document_rejected(self):
        encoder, heads, wiring, index, _ = self._setup()
        doc = Document(doc_id="raw", text="x", labels=frozenset())
        with pytest.raises(evaluation.EvaluationError, match="not prepared"):
            evaluation.score_documents(
                encoder, heads, wiring, [doc], index, batch_size=2
            )
