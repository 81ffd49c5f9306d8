import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cscfundus.stats import (
    DegenerateLabelsError,
    auc,
    auc_ci_bootstrap,
    auc_ci_delong,
    auc_pairwise,
    cases_from_counts,
    cohen_kappa,
    cohen_kappa_table,
    confusion_at_threshold,
    delong_components,
    delong_variance,
    evaluation_report,
    roc_curve,
)

POS = [0.9, 0.8, 0.7]
NEG = [0.75, 0.6]


def cases(pos, neg):
    return np.array(list(pos) + list(neg)), np.array([1] * len(pos) + [0] * len(neg))


def brute_auc(pos, neg):
    wins = sum(2 if p > q else 1 if p == q else 0 for p in pos for q in neg)
    return Fraction(wins, 2 * len(pos) * len(neg))


# -- ROC ----------------------------------------------------------------------------


def test_roc_staircase_matches_threshold_sweep():
    s, y = cases(POS, NEG)
    roc = roc_curve(s, y)
    expected = [(0, 0, math.inf)]
    for t in sorted(set(s), reverse=True):
        tpr = sum(p >= t for p in POS) / 3
        fpr = sum(q >= t for q in NEG) / 2
        expected.append((fpr, tpr, t))
    expected.append((1, 1, -math.inf))
    assert roc.points() == pytest.approx(expected)
    assert len(roc.points()) == 7


def test_roc_perfect_separation_passes_through_corner():
    roc = roc_curve(*cases([0.9, 0.8], [0.2, 0.1]))
    assert (0.0, 1.0) in [(f, t) for f, t, _ in roc.points()]


def test_roc_all_ties():
    roc = roc_curve(*cases([0.5, 0.5], [0.5]))
    assert [(f, t) for f, t, _ in roc.points()] == [(0, 0), (1, 1), (1, 1)]


def test_roc_single_class_rejected():
    with pytest.raises(DegenerateLabelsError, match="degenerate labels"):
        roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(DegenerateLabelsError):
        auc([0.1, 0.2], [0, 0])


def test_roc_monotone():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 5, 60) / 4
    y = rng.integers(0, 2, 60)
    roc = roc_curve(s, y)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)


# -- AUC ----------------------------------------------------------------------------


def test_auc_hand_case():
    assert auc(*cases(POS, NEG)) == pytest.approx(5 / 6, abs=1e-15)


def test_auc_all_ties_half():
    assert auc(*cases([0.3] * 4, [0.3] * 7)) == 0.5


def test_binary_rater_is_mean_of_sens_and_spec():
    s, y = cases_from_counts(tp=62, fn=71, tn=116, fp=2)
    a = auc(s, y)
    assert a == pytest.approx((62 / 133 + 116 / 118) / 2, abs=1e-15)
    assert round(a, 4) == 0.7246
    assert abs(a - 0.725) < 0.001


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.lists(st.integers(0, 6), min_size=1, max_size=30))
def test_auc_matches_pair_count(pos, neg):
    s, y = cases(pos, neg)
    ref = brute_auc(pos, neg)
    assert auc(s, y) == float(ref)
    assert auc_pairwise(s, y) == float(ref)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.lists(st.integers(0, 6), min_size=1, max_size=30))
def test_auc_equals_trapezoid(pos, neg):
    s, y = cases(pos, neg)
    assert abs(auc(s, y) - roc_curve(s, y).trapezoid_area()) < 1e-12


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    s = rng.integers(0, 20, 80) / 19
    y = rng.integers(0, 2, 80)
    base = auc(s, y)
    for f in (lambda v: v**3, lambda v: np.exp(5 * v), lambda v: 2 * v - 7):
        assert auc(f(s), y) == base


def test_auc_label_swap_antisymmetry():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = rng.integers(0, 8, 40).astype(float)
        y = rng.integers(0, 2, 40)
        if 0 < y.sum() < 40:
            assert auc(s, 1 - y) == pytest.approx(1 - auc(s, y), abs=1e-15)


# -- DeLong -------------------------------------------------------------------------


def test_delong_hand_case():
    s, y = cases([0.9, 0.8], [0.1, 0.85])
    v10, v01 = delong_components(s, y)
    assert v10.tolist() == [1.0, 0.5] and v01.tolist() == [1.0, 0.5]
    assert np.var(v10, ddof=1) == 0.125 and np.var(v01, ddof=1) == 0.125
    assert delong_variance(s, y) == 0.125
    res = auc_ci_delong(s, y)
    assert res.auc == 0.75
    assert res.se == pytest.approx(0.35355, abs=1e-5)
    assert res.ci_lo >= 0 and res.ci_hi == 1.0


def test_delong_perfect_separation():
    res = auc_ci_delong(*cases(np.linspace(0.6, 0.9, 30), np.linspace(0.1, 0.4, 30)))
    assert (res.auc, res.se, res.ci_lo, res.ci_hi) == (1.0, 0.0, 1.0, 1.0)


def test_delong_needs_two_per_class():
    with pytest.raises(ValueError, match="variance undefined"):
        auc_ci_delong(*cases([0.9], [0.1, 0.2]))


def test_delong_against_bootstrap():
    rng = np.random.default_rng(3)
    s, y = cases(rng.normal(1.0, 1, 50), rng.normal(0, 1, 50))
    res = auc_ci_delong(s, y)
    lo, hi = auc_ci_bootstrap(s, y, n_boot=10_000, seed=4)
    assert abs(res.ci_lo - lo) < 0.03 and abs(res.ci_hi - hi) < 0.03


def test_delong_ci_bounded():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(4, 30))
        s = rng.integers(0, 4, n).astype(float)
        y = np.array([0, 0, 1, 1] + list(rng.integers(0, 2, n - 4)))
        res = auc_ci_delong(s, y, level=float(rng.uniform(0.5, 0.999)))
        assert res.se >= 0 and 0 <= res.ci_lo <= res.auc <= res.ci_hi <= 1


# -- confusion ----------------------------------------------------------------------

TABLE2 = {
    "computer": (111, 22, 104, 14, Fraction(215, 251)),
    "rater1": (96, 37, 113, 5, Fraction(209, 251)),
    "rater2": (62, 71, 116, 2, Fraction(178, 251)),
}


@pytest.mark.parametrize("name", TABLE2)
def test_table2_accuracy_exact(name):
    tp, fn, tn, fp, acc = TABLE2[name]
    cm = confusion_at_threshold(*cases_from_counts(tp, fn, tn, fp))
    assert (cm.tp, cm.fn, cm.tn, cm.fp) == (tp, fn, tn, fp)
    assert Fraction(cm.tp + cm.tn, cm.total) == acc
    assert cm.accuracy == float(acc)


def test_threshold_zero_all_positive():
    cm = confusion_at_threshold([0.0, 0.3, 0.9], [0, 0, 1], threshold=0.0)
    assert (cm.fp, cm.tn, cm.tp) == (2, 0, 1)


def test_threshold_is_inclusive():
    assert confusion_at_threshold([0.5], [1]).tp == 1


# -- kappa --------------------------------------------------------------------------


def test_kappa_identity():
    x = [0, 1, 1, 0, 1]
    assert cohen_kappa(x, x).kappa == 1.0


def test_kappa_hand_table():
    k = cohen_kappa_table(45, 5, 5, 45)
    assert (k.observed, k.expected) == (0.9, 0.5)
    assert k.kappa == pytest.approx(0.8, abs=1e-15)
    assert k.p_value < 1e-6


def test_kappa_constant_raters():
    with pytest.raises(ValueError, match="undefined kappa"):
        cohen_kappa([1, 1, 1], [1, 1, 1])


def test_kappa_symmetric():
    rng = np.random.default_rng(6)
    for _ in range(50):
        a, b = rng.integers(0, 2, 30), rng.integers(0, 2, 30)
        if (a.min() == a.max()) and (b.min() == b.max()) and a[0] == b[0]:
            continue
        ka, kb = cohen_kappa(a, b), cohen_kappa(b, a)
        assert ka.kappa == pytest.approx(kb.kappa, abs=1e-15)
        assert ka.se0 == pytest.approx(kb.se0, abs=1e-15)
        assert -1 <= ka.kappa <= 1 and 0 <= ka.p_value <= 1


def test_kappa_independent_raters():
    rng = np.random.default_rng(7)
    hits = 0
    for _ in range(20):
        a, b = rng.integers(0, 2, 10_000), rng.integers(0, 2, 10_000)
        k = cohen_kappa(a, b)
        assert abs(k.kappa) < 0.05
        hits += k.p_value > 0.05
    # null p-values are uniform, so about 19 of 20 exceed 0.05
    assert hits >= 15


def test_kappa_se0_matches_textbook_formula():
    # independent transcription of the Fleiss-Cohen-Everitt null variance
    k = cohen_kappa_table(30, 10, 20, 40)
    n = 100
    pa1, pb1 = 0.4, 0.5
    pe = pa1 * pb1 + (1 - pa1) * (1 - pb1)
    s = pe + pe**2 - (pa1 * pb1 * (pa1 + pb1) + (1 - pa1) * (1 - pb1) * (2 - pa1 - pb1))
    assert k.se0 == pytest.approx(math.sqrt(s / n) / (1 - pe), rel=1e-12)
    assert k.p_value == pytest.approx(math.erfc(abs(k.kappa / k.se0) / math.sqrt(2)), rel=1e-12)


# -- report -------------------------------------------------------------------------


def test_report_perfect_classifier():
    truth = np.array([0, 1, 1, 0, 1, 0])
    report = evaluation_report(truth.astype(float), truth, {"r": truth.tolist()})
    m = report["readers"]["model"]
    assert m["auc"] == 1.0 and m["accuracy"] == 1.0
    assert report["kappa"][0]["kappa"] == 1.0
    json.dumps(report, allow_nan=False)


def test_report_structure_without_raters():
    rng = np.random.default_rng(8)
    truth = np.array([0, 1] * 10)
    report = evaluation_report(rng.random(20), truth)
    assert set(report["readers"]) == {"model"} and report["kappa"] == []
    assert {"auc", "auc_ci", "accuracy", "confusion", "roc_points"} <= set(report["readers"]["model"])
    assert report["n_positive"] == 10 and report["n_cases"] == 20
    pts = report["readers"]["model"]["roc_points"]
    assert pts[0] == [0.0, 0.0, "inf"] and pts[-1] == [1.0, 1.0, "-inf"]


def test_report_table2_raters():
    truth = np.array([1] * 133 + [0] * 118)
    r1 = np.array([1] * 96 + [0] * 37 + [0] * 113 + [1] * 5)
    r2 = np.array([1] * 62 + [0] * 71 + [0] * 116 + [1] * 2)
    report = evaluation_report(truth * 0.9, truth, {"rater1": r1, "rater2": r2})
    assert report["readers"]["rater1"]["accuracy"] == 209 / 251
    assert report["readers"]["rater2"]["accuracy"] == 178 / 251
    assert abs(report["readers"]["rater2"]["auc"] - 0.725) < 0.001
    assert [(k["a"], k["b"]) for k in report["kappa"]] == [("model", "rater1"), ("model", "rater2"), ("rater1", "rater2")]


def test_report_rejects_length_mismatch():
    with pytest.raises(ValueError):
        evaluation_report([0.1, 0.9], [0, 1], {"r": [1]})


def test_report_tiny_classes_have_null_ci():
    report = evaluation_report([0.2, 0.9, 0.4], [0, 1, 0])
    m = report["readers"]["model"]
    assert m["auc"] == 1.0 and m["auc_ci"] is None and m["auc_se"] is None
