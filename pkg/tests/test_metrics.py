import random

import pytest

from adaptljp.metrics import (
    EvaluationError,
    GoldRecord,
    PredictionRecord,
    difficulty_quartiles,
    evaluate_predictions,
    gold_label_universe,
    macro_prf,
    read_predictions,
    subset_accuracy,
    term_metrics,
    write_predictions,
)
from oracles import oracle_macro_prf, oracle_subset_accuracy, oracle_term_metrics


def keyed(values):
    return {(f"c{i}", "d"): v for i, v in enumerate(values)}


WORKED_GOLDS = keyed([frozenset({"A"}), frozenset({"A", "B"})])
WORKED_PREDS = keyed([frozenset({"A"}), frozenset({"A", "C"})])


class TestSubsetAccuracy:
    def test_worked_fixture(self):
        # Record 1 matches exactly; record 2 does not: 1/2.
        assert subset_accuracy(WORKED_PREDS, WORKED_GOLDS) == 0.5
        assert oracle_subset_accuracy(WORKED_PREDS, WORKED_GOLDS) == 0.5

    def test_all_correct(self):
        assert subset_accuracy(WORKED_GOLDS, WORKED_GOLDS) == 1.0

    def test_empty_set_is_error_not_zero(self):
        with pytest.raises(EvaluationError):
            subset_accuracy({}, {})

    def test_key_mismatch(self):
        with pytest.raises(EvaluationError):
            subset_accuracy(keyed([frozenset({"A"})]), WORKED_GOLDS)

    def test_permutation_invariance(self):
        items = list(WORKED_GOLDS.items())
        shuffled_golds = dict(reversed(items))
        assert subset_accuracy(WORKED_PREDS, shuffled_golds) == 0.5

    def test_adding_correct_record_never_decreases(self):
        base = subset_accuracy(WORKED_PREDS, WORKED_GOLDS)
        preds = dict(WORKED_PREDS)
        golds = dict(WORKED_GOLDS)
        preds[("new", "d")] = frozenset({"Z"})
        golds[("new", "d")] = frozenset({"Z"})
        assert subset_accuracy(preds, golds) >= base


class TestMacroPRF:
    def test_worked_fixture_over_gold_universe(self):
        # Over {A, B}: F1(A)=1 (two clean hits), F1(B)=0 (one miss) -> 0.5.
        universe = gold_label_universe(WORKED_GOLDS)
        assert universe == ("A", "B")
        ma_p, ma_r, ma_f = macro_prf(WORKED_PREDS, WORKED_GOLDS, universe)
        assert ma_f == 0.5
        assert ma_p == 0.5
        assert ma_r == 0.5

    def test_perfect(self):
        universe = gold_label_universe(WORKED_GOLDS)
        assert macro_prf(WORKED_GOLDS, WORKED_GOLDS, universe) == (1.0, 1.0, 1.0)

    def test_all_miss(self):
        preds = keyed([frozenset({"X"}), frozenset({"Y"})])
        universe = gold_label_universe(WORKED_GOLDS)
        assert macro_prf(preds, WORKED_GOLDS, universe) == (0.0, 0.0, 0.0)

    def test_empty_universe_rejected(self):
        with pytest.raises(EvaluationError):
            macro_prf(WORKED_PREDS, WORKED_GOLDS, ())

    def test_macro_f_is_mean_of_per_label_f1(self):
        # One label with P=1,R=0.5 (F=2/3) and one with P=0.5,R=1 (F=2/3):
        # mean of F1s is 2/3 while F(mean P, mean R) would be 0.75.
        golds = keyed([frozenset({"A", "B"}), frozenset({"B"})])
        preds = keyed([frozenset({"A", "B"}), frozenset({"A"})])
        ma_p, ma_r, ma_f = macro_prf(preds, golds, ("A", "B"))
        assert ma_f == pytest.approx(2 / 3)
        harmonic = 2 * ma_p * ma_r / (ma_p + ma_r)
        assert ma_f != pytest.approx(harmonic)

    def test_ma_f_bounded_by_per_label_extremes(self):
        rng = random.Random(5)
        labels = ["A", "B", "C"]
        for _ in range(30):
            n = rng.randrange(1, 10)
            golds = keyed([frozenset(rng.sample(labels, rng.randrange(1, 4))) for _ in range(n)])
            preds = keyed([frozenset(rng.sample(labels, rng.randrange(0, 4))) for _ in range(n)])
            per_label = [
                macro_prf(preds, golds, (label,))[2] for label in labels
            ]
            ma_f = macro_prf(preds, golds, labels)[2]
            assert min(per_label) - 1e-12 <= ma_f <= max(per_label) + 1e-12


class TestTermMetrics:
    def test_all_correct(self):
        golds = keyed([1, 2, 3])
        metrics = term_metrics(dict(golds), golds)
        assert metrics.accuracy == 1.0
        assert metrics.refusals == 0

    def test_one_absent_of_four(self):
        golds = keyed([1, 2, 3, 4])
        preds = dict(golds)
        preds[("c3", "d")] = None
        metrics = term_metrics(preds, golds)
        assert metrics.accuracy == 0.75
        assert metrics.refusals == 1

    def test_toy_confusion_matrix_oracle(self):
        # gold -> pred counts: [[2,0,0],[1,1,0],[0,0,1]]
        golds = keyed([0, 0, 1, 1, 2])
        preds = keyed([0, 0, 0, 1, 2])
        metrics = term_metrics(preds, golds, universe=(0, 1, 2))
        # Hand-computed: acc 4/5; per class P=(2/3,1,1), R=(1,1/2,1),
        # F=(4/5,2/3,1).
        assert metrics.accuracy == pytest.approx(4 / 5)
        assert metrics.macro_precision == pytest.approx(8 / 9)
        assert metrics.macro_recall == pytest.approx(5 / 6)
        assert metrics.macro_f1 == pytest.approx(37 / 45)
        oracle = oracle_term_metrics(preds, golds, (0, 1, 2))
        assert metrics.accuracy == oracle[0]
        assert metrics.macro_precision == oracle[1]
        assert metrics.macro_recall == oracle[2]
        assert metrics.macro_f1 == oracle[3]

    def test_refusal_counts_as_fn_for_gold_class(self):
        golds = keyed([0, 0])
        preds = keyed([0, None])
        metrics = term_metrics(preds, golds, universe=(0,))
        # class 0: TP=1, FN=1, FP=0 -> P=1, R=0.5, F=2/3
        assert metrics.macro_precision == 1.0
        assert metrics.macro_recall == 0.5
        assert metrics.macro_f1 == pytest.approx(2 / 3)

    def test_default_universe_is_gold_occurring(self):
        golds = keyed([4, 7])
        preds = keyed([4, 4])
        metrics = term_metrics(preds, golds)
        assert metrics.universe_size == 2


def random_multilabel_instance(rng):
    label_count = rng.randrange(1, 6)
    labels = [chr(ord("A") + i) for i in range(label_count)]
    n = rng.randrange(1, 21)
    golds = keyed(
        [frozenset(rng.sample(labels, rng.randrange(1, label_count + 1))) for _ in range(n)]
    )
    preds = keyed(
        [frozenset(rng.sample(labels, rng.randrange(0, label_count + 1))) for _ in range(n)]
    )
    return preds, golds, labels


class TestOracleEquivalence:
    def test_randomized_against_brute_force(self):
        rng = random.Random(13)
        for _ in range(200):
            preds, golds, labels = random_multilabel_instance(rng)
            universe = gold_label_universe(golds) if rng.random() < 0.5 else tuple(labels)
            assert subset_accuracy(preds, golds) == oracle_subset_accuracy(preds, golds)
            got = macro_prf(preds, golds, universe)
            want = oracle_macro_prf(preds, golds, universe)
            for g, w in zip(got, want):
                assert abs(g - w) <= 1e-12

    def test_randomized_term_against_brute_force(self):
        rng = random.Random(17)
        for _ in range(200):
            n = rng.randrange(1, 21)
            golds = keyed([rng.randrange(0, 11) for _ in range(n)])
            preds = {
                key: (None if rng.random() < 0.15 else rng.randrange(0, 11))
                for key in golds
            }
            universe = tuple(sorted(set(golds.values())))
            metrics = term_metrics(preds, golds, universe=universe)
            acc, ma_p, ma_r, ma_f, refusals = oracle_term_metrics(preds, golds, universe)
            assert metrics.accuracy == acc
            assert abs(metrics.macro_precision - ma_p) <= 1e-12
            assert abs(metrics.macro_recall - ma_r) <= 1e-12
            assert abs(metrics.macro_f1 - ma_f) <= 1e-12
            assert metrics.refusals == refusals


def uniform_scores(charges):
    return {c: 1.0 - i / max(len(charges), 1) for i, c in enumerate(sorted(charges))}


class TestQuartiles:
    def make_records(self, charges, rng):
        golds = {}
        preds = {}
        for i, charge in enumerate(charges):
            key = (f"c{i}", "d")
            golds[key] = frozenset({charge})
            preds[key] = frozenset({charge if rng.random() < 0.6 else charges[0]})
        return preds, golds

    @pytest.mark.parametrize("n,sizes", [(8, [2, 2, 2, 2]), (10, [3, 3, 2, 2]),
                                         (191, [48, 48, 48, 47])])
    def test_partition_sizes(self, n, sizes):
        rng = random.Random(n)
        charges = [f"charge{i:03d}" for i in range(n)]
        preds, golds = self.make_records(charges, rng)
        scores = {c: rng.random() for c in charges}
        report = difficulty_quartiles(scores, preds, golds)
        assert [len(b.charges) for b in report.bands] == sizes
        flattened = [c for b in report.bands for c in b.charges]
        assert sorted(flattened) == sorted(charges)
        assert flattened == list(report.ranking)

    def test_ranking_descends_with_name_tiebreak(self):
        charges = ["b", "a", "c", "d"]
        rng = random.Random(3)
        preds, golds = self.make_records(charges, rng)
        scores = {"a": 0.5, "b": 0.5, "c": 0.9, "d": 0.1}
        report = difficulty_quartiles(scores, preds, golds)
        assert report.ranking == ("c", "a", "b", "d")
        again = difficulty_quartiles(scores, preds, golds)
        assert again.ranking == report.ranking

    def test_missing_reference_score_is_error(self):
        rng = random.Random(4)
        preds, golds = self.make_records(["a", "b"], rng)
        with pytest.raises(EvaluationError) as err:
            difficulty_quartiles({"a": 1.0}, preds, golds)
        assert "b" in str(err.value)

    def test_band_f1_matches_direct_macro(self):
        rng = random.Random(8)
        charges = [f"x{i}" for i in range(10)]
        preds, golds = self.make_records(charges, rng)
        scores = {c: rng.random() for c in charges}
        report = difficulty_quartiles(scores, preds, golds)
        for band in report.bands:
            _, _, f1 = macro_prf(preds, golds, band.charges)
            assert band.macro_f1 == f1


class TestReportAssembly:
    def golds(self):
        return [
            GoldRecord("c1", "A", frozenset({"theft"}), frozenset({264}), 2),
            GoldRecord("c2", "B", frozenset({"fraud"}), frozenset({266}), 4),
        ]

    def test_full_report(self):
        preds = [
            PredictionRecord("c1", "A", frozenset({"theft"}), frozenset({264}), 2),
            PredictionRecord("c2", "B", frozenset({"theft"}), frozenset({266}), None),
        ]
        report = evaluate_predictions(preds, self.golds())
        assert report.charges.accuracy == 0.5
        assert report.articles.accuracy == 1.0
        assert report.term.refusals == 1
        assert report.missing_predictions == 0
        table = report.format_table()
        assert "charge" in table and "term" in table

    def test_missing_predictions_scored_empty(self):
        preds = [PredictionRecord("c1", "A", frozenset({"theft"}), frozenset({264}), 2)]
        report = evaluate_predictions(preds, self.golds())
        assert report.missing_predictions == 1
        assert report.charges.accuracy == 0.5
        assert report.term.refusals == 1

    def test_round_trip_predictions_file(self, tmp_path):
        preds = [
            PredictionRecord("c1", "A", frozenset({"theft"}), frozenset({264}), 2),
            PredictionRecord("c2", "B", frozenset(), frozenset(), None),
        ]
        path = tmp_path / "preds.jsonl"
        write_predictions(preds, path)
        assert read_predictions(path) == preds

    def test_quartiles_included_when_scores_given(self):
        preds = [
            PredictionRecord("c1", "A", frozenset({"theft"}), frozenset({264}), 2),
            PredictionRecord("c2", "B", frozenset({"fraud"}), frozenset({266}), 4),
        ]
        scores = {"theft": 0.9, "fraud": 0.2}
        report = evaluate_predictions(preds, self.golds(), reference_scores=scores)
        assert report.quartiles is not None
        assert report.quartiles.ranking == ("theft", "fraud")
