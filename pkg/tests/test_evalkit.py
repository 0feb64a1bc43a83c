import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from trustvision.core import ClassSet, TaxonRecord
from trustvision.evalkit import plots
from trustvision.evalkit.curves import EmptySet, roc_pr
from trustvision.evalkit.metrics import (
    EmptyMatrix,
    IdOutOfRange,
    LengthMismatch,
    confusion,
    evaluate_probs,
    label_ranks,
    macro_metrics,
    topk_accuracy,
)
from trustvision.evalkit.reports import (
    aligned_table,
    attribute_errors,
    dumps,
    per_class_report,
    rows_to_csv,
    strata_report,
)


def loop_macro(preds, labels, C):
    """Per-class counts by explicit loops; zero denominators count as 0."""
    P, R, F = [], [], []
    for c in range(C):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        P.append(tp / (tp + fp) if tp + fp else 0.0)
        R.append(tp / (tp + fn) if tp + fn else 0.0)
        F.append(2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0)
    return sum(P) / C, sum(R) / C, sum(F) / C


def loop_topk(probs, labels, k):
    hits = 0
    for row, y in zip(probs, labels):
        order = sorted(range(len(row)), key=lambda i: (-row[i], i))
        hits += y in order[:k]
    return hits / len(labels)


class TestConfusion:
    def test_counts(self):
        cm = confusion([0, 1, 1, 2], [0, 1, 2, 2], 3)
        assert cm.to_rows() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]
        assert cm.tp.tolist() == [1, 1, 1] and cm.fp.tolist() == [0, 1, 0]

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            confusion([0], [0, 1], 2)
        with pytest.raises(IdOutOfRange):
            confusion([0, 5], [0, 1], 2)
        with pytest.raises(EmptyMatrix):
            macro_metrics(confusion([], [], 2))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 10).flatmap(lambda C: st.tuples(
        st.just(C), st.lists(st.tuples(st.integers(0, C - 1), st.integers(0, C - 1)), min_size=1, max_size=200))))
    def test_macro_matches_loops(self, case):
        C, pairs = case
        preds, labels = zip(*pairs)
        m = macro_metrics(confusion(preds, labels, C))
        P, R, F = loop_macro(preds, labels, C)
        assert m.accuracy == pytest.approx(sum(p == y for p, y in pairs) / len(pairs), abs=1e-12)
        assert (m.macro_precision, m.macro_recall, m.macro_f1) == pytest.approx((P, R, F), abs=1e-12)

    def test_exclude_zero_division(self):
        cm = confusion([0, 0], [0, 0], 3)
        assert macro_metrics(cm).macro_recall == pytest.approx(1 / 3)
        assert macro_metrics(cm, "exclude").macro_recall == 1.0
        with pytest.raises(ValueError):
            macro_metrics(cm, "nan")


class TestTopK:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 40), st.integers(1, 6), st.integers(0, 10_000))
    def test_matches_sort(self, C, n, k, seed):
        rng = np.random.default_rng(seed)
        # coarse values so ties happen
        probs = rng.integers(0, 4, (n, C)).astype(float)
        labels = rng.integers(0, C, n)
        assert topk_accuracy(probs, labels, k) == pytest.approx(loop_topk(probs, labels, k), abs=1e-12)

    def test_tie_goes_to_lower_id(self):
        assert label_ranks([[0.5, 0.5]], [1]).tolist() == [1]
        assert label_ranks([[0.5, 0.5]], [0]).tolist() == [0]

    def test_evaluate_probs(self):
        rep, cm = evaluate_probs([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]], [0, 1, 1])
        assert rep.top1 == rep.accuracy == pytest.approx(2 / 3)
        assert rep.top5 == 1.0


class TestCurves:
    @settings(max_examples=150, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=1, max_size=40), st.lists(st.integers(0, 6), min_size=1, max_size=40))
    def test_auroc_is_mann_whitney(self, pos, neg):
        r = roc_pr(pos, neg)
        pairs = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
        assert r.auroc == pytest.approx(pairs / (len(pos) * len(neg)), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.lists(st.floats(-5, 5), min_size=1, max_size=40))
    def test_against_sklearn(self, pos, neg):
        r = roc_pr(pos, neg)
        y = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
        s = np.r_[pos, neg]
        assert r.auroc == pytest.approx(roc_auc_score(y, s), abs=1e-12)
        assert r.aupr == pytest.approx(average_precision_score(y, s), abs=1e-12)

    def test_fpr_at_level(self):
        r = roc_pr([3, 2, 1, 0], [2.5, 0.5], level=0.75)
        assert r.fpr_at_tpr == 0.5
        assert r.roc_rows()[0][0] == np.inf

    def test_empty(self):
        with pytest.raises(EmptySet):
            roc_pr([], [1.0])


def _taxa():
    rows = [("Avena sterilis", "Poaceae", 10), ("Avena fatua", "Poaceae", 500), ("Lapsana communis", "Asteraceae", 20)]
    return ClassSet(tuple(TaxonRecord(i, n, family=f, image_count=c) for i, (n, f, c) in enumerate(rows)))


class TestReports:
    def test_per_class(self):
        cm = confusion([0, 1, 1, 2], [0, 1, 1, 1], 4)
        rep = per_class_report(cm, [5, 6, 7, 8], threshold=0.6)
        assert [r.accuracy for r in rep.rows] == [1.0, pytest.approx(2 / 3), None, None]
        assert rep.n_with_data == 2 and rep.fraction_at_100 == 0.5 and rep.fraction_ge == 1.0
        assert rep.scatter_points() == [(5, 1.0), (6, pytest.approx(2 / 3))]

    def test_attribution(self):
        cs = _taxa()
        cm = confusion([1] * 8 + [2] * 2 + [1] * 5, [0] * 10 + [1] * 5, 3, cs)
        (rec,) = attribute_errors(cm, cs, [10, 500, 20])
        assert rec.source_name == "Avena sterilis" and rec.confounder_name == "Avena fatua"
        assert rec.same_genus and rec.fraction == 0.8 and rec.confounder_train_count == 500

    def test_attribution_skips_good_classes(self):
        cs = _taxa()
        cm = confusion([0, 1, 2], [0, 1, 2], 3, cs)
        assert attribute_errors(cm, cs, [1, 1, 1]) == []

    def test_strata_multi_tag(self):
        probs = np.eye(3)[[0, 1, 2, 0]]
        rep = strata_report(probs, [0, 1, 2, 1], [{"early"}, {"early", "weeds"}, {"late"}, {"late"}])
        rows = {r.tag: r.table_row() for r in rep.rows}
        assert set(rows) == {"early", "late", "weeds"}
        assert rows["early"]["images"] == 2 and rows["late"]["accuracy"] == 0.5

    def test_csv_and_table(self):
        rows = [{"a": 1, "b": 0.5}, {"a": 22, "b": None}]
        assert rows_to_csv(rows) == "a,b\n1,0.5\n22,\n"
        text = aligned_table(rows)
        assert text.splitlines()[0].split() == ["a", "b"]
        assert dumps({"x": np.float64(1.5), "y": np.arange(2)}) == dumps({"y": [0, 1], "x": 1.5})


class TestPlots:
    def test_svgs_are_byte_stable(self, tmp_path):
        rng = np.random.default_rng(0)
        outs = []
        for d in ("a", "b"):
            base = tmp_path / d
            base.mkdir()
            plots.accuracy_histogram(rng.random(20) if d == "a" else np.random.default_rng(0).random(20),
                                     base / "h.svg")
            plots.loss_trace(np.linspace(1, 0.5, 50), base / "l.svg")
            plots.energy_boxplot([-3, -2, -4], [-1, 0], -2.5, base / "e.svg")
            plots.roc_curve([0, 0.5, 1], [0, 0.9, 1], base / "r.svg")
            plots.class_counts(["a", "b"], [3, 4], base / "c.svg")
            plots.accuracy_vs_train_count([(3, 0.5), (10, 1.0)], base / "s.svg")
            outs.append({p.name: p.read_bytes() for p in base.iterdir()})
        assert outs[0] == outs[1]
        assert all(v.startswith(b"<?xml") for v in outs[0].values())
