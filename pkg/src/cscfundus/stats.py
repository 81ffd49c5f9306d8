"""Nonparametric ROC analysis, DeLong intervals and Cohen's kappa."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np


class DegenerateLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return [(float(f), float(t), float(h)) for f, t, h in zip(self.fpr, self.tpr, self.thresholds)]

    def trapezoid_area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    @property
    def sensitivity(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AucResult:
    auc: float
    se: float
    ci_lo: float
    ci_hi: float


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    se0: float
    z: float
    p_value: float
    observed: float
    expected: float


def _split_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise DegenerateLabelsError("degenerate labels: need both classes")
    return pos, neg


def roc_curve(scores, labels) -> RocCurve:
    """Empirical ROC: one point per distinct score, plus both end points.

    A case is called positive at threshold ``t`` when ``score >= t``.
    """
    pos, neg = _split_scores(scores, labels)
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = np.searchsorted(np.sort(-pos), -thr, side="right") / len(pos)
    fpr = np.searchsorted(np.sort(-neg), -thr, side="right") / len(neg)
    return RocCurve(
        np.concatenate([[0.0], fpr, [1.0]]),
        np.concatenate([[0.0], tpr, [1.0]]),
        np.concatenate([[np.inf], thr, [-np.inf]]),
    )


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(x)
    starts = np.flatnonzero(np.concatenate([[True], xs[1:] != xs[:-1]]))
    ends = np.concatenate([starts[1:], [n]])
    r = np.empty(n)
    r[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return r


def _twice_u(pos, neg) -> int:
    """2 * Mann-Whitney U of positives over negatives, as an exact integer."""
    m = len(pos)
    ranks = midranks(np.concatenate([pos, neg]))
    twice_rank_sum = int(round(2 * ranks[:m].sum()))
    return twice_rank_sum - m * (m + 1)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC, ties counted one half.

    Computed from midranks as an exact integer ratio, so it agrees bit for
    bit with direct pair counting.
    """
    pos, neg = _split_scores(scores, labels)
    return _twice_u(pos, neg) / (2 * len(pos) * len(neg))


def auc_pairwise(scores, labels) -> float:
    """O(m*n) pair count; a reference for :func:`auc`."""
    pos, neg = _split_scores(scores, labels)
    gt = int(np.sum(pos[:, None] > neg[None, :]))
    eq = int(np.sum(pos[:, None] == neg[None, :]))
    return (2 * gt + eq) / (2 * len(pos) * len(neg))


def delong_components(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Structural components ``(V10, V01)`` of the AUC.

    ``V10[i]`` is the mean kernel of positive ``i`` against every negative;
    ``V01[j]`` the mean kernel of every positive against negative ``j``.
    """
    pos, neg = _split_scores(scores, labels)
    m, n = len(pos), len(neg)
    allr = midranks(np.concatenate([pos, neg]))
    v10 = (allr[:m] - midranks(pos)) / n
    v01 = 1.0 - (allr[m:] - midranks(neg)) / m
    return v10, v01


def auc_ci_delong(scores, labels, level: float = 0.95) -> AucResult:
    """AUC with DeLong standard error and a normal interval clamped to [0, 1]."""
    pos, neg = _split_scores(scores, labels)
    if len(pos) < 2 or len(neg) < 2:
        raise ValueError("variance undefined: need at least 2 cases per class")
    v10, v01 = delong_components(scores, labels)
    a = auc(scores, labels)
    var = np.var(v10, ddof=1) / len(pos) + np.var(v01, ddof=1) / len(neg)
    se = math.sqrt(max(float(var), 0.0))
    z = NormalDist().inv_cdf(0.5 + level / 2)
    return AucResult(a, se, max(0.0, a - z * se), min(1.0, a + z * se))


def delong_variance(scores, labels) -> float:
    pos, neg = _split_scores(scores, labels)
    if len(pos) < 2 or len(neg) < 2:
        raise ValueError("variance undefined: need at least 2 cases per class")
    v10, v01 = delong_components(scores, labels)
    return float(np.var(v10, ddof=1) / len(pos) + np.var(v01, ddof=1) / len(neg))


def auc_ci_bootstrap(scores, labels, level: float = 0.95, n_boot: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Percentile CI from a class-stratified bootstrap.

    Each replicate resamples positives and negatives separately and scores
    the pairwise kernel table directly, so it shares nothing with the
    rank-based code paths.
    """
    pos, neg = _split_scores(scores, labels)
    kernel = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    m, n = kernel.shape
    rng = np.random.default_rng(seed)
    stats = np.empty(n_boot)
    for b in range(n_boot):
        i = rng.integers(0, m, m)
        j = rng.integers(0, n, n)
        # mean over the resampled table via row and column counts
        stats[b] = np.bincount(i, minlength=m) @ kernel @ np.bincount(j, minlength=n) / (m * n)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(stats, [alpha, 1 - alpha])
    return float(lo), float(hi)


def confusion_at_threshold(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Counts with ``score >= threshold`` called positive."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pred = s >= threshold
    truth = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        tn=int(np.sum(~pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
    )


def cases_from_counts(tp: int, fn: int, tn: int, fp: int) -> tuple[np.ndarray, np.ndarray]:
    """Binary (score, label) cases reproducing a confusion table."""
    scores = np.array([1.0] * tp + [0.0] * fn + [0.0] * tn + [1.0] * fp)
    labels = np.array([1] * (tp + fn) + [0] * (tn + fp))
    return scores, labels


def cohen_kappa(labels_a, labels_b) -> KappaResult:
    """Cohen's kappa for two binary raters with its null-hypothesis test.

    The standard error under ``kappa = 0`` is the large-sample formula of
    Fleiss, Cohen and Everitt; the p-value is two-sided.
    """
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ValueError("label vectors differ in length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 rated cases")
    for v in (a, b):
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("labels must be 0 or 1")
    pa = np.array([np.mean(a == 0), np.mean(a == 1)])
    pb = np.array([np.mean(b == 0), np.mean(b == 1)])
    po = float(np.mean(a == b))
    pe = float(pa @ pb)
    if pe >= 1.0:
        raise ValueError("undefined kappa: both raters constant")
    kappa = (po - pe) / (1 - pe)
    inner = pe + pe * pe - float(np.sum(pa * pb * (pa + pb)))
    se0 = math.sqrt(max(inner, 0.0) / (n * (1 - pe) ** 2))
    if se0 > 0:
        z = kappa / se0
        p = math.erfc(abs(z) / math.sqrt(2))
    else:
        z, p = (math.inf if kappa > 0 else 0.0), (0.0 if kappa != 0 else 1.0)
    return KappaResult(kappa, se0, z, min(1.0, p), po, pe)


def cohen_kappa_table(a: int, b: int, c: int, d: int) -> KappaResult:
    """Kappa from a 2x2 agreement table ``[[a, b], [c, d]]`` (rows rater A)."""
    la = [1] * a + [1] * b + [0] * c + [0] * d
    lb = [1] * a + [0] * b + [1] * c + [0] * d
    return cohen_kappa(la, lb)


# -- report ------------------------------------------------------------------------

REPORT_FORMAT = "cscfundus-eval-report"
REPORT_VERSION = 1


def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(x)


def reader_metrics(scores, labels, threshold: float = 0.5, level: float = 0.95) -> dict:
    """One reader's entry in the report.

    With fewer than two cases in a class the DeLong variance is undefined;
    ``auc_se`` and ``auc_ci`` are then null rather than failing the report.
    """
    value = auc(scores, labels)
    try:
        res = auc_ci_delong(scores, labels, level)
        se, ci = res.se, [res.ci_lo, res.ci_hi]
    except ValueError:
        se, ci = None, None
    cm = confusion_at_threshold(scores, labels, threshold)
    roc = roc_curve(scores, labels)
    return {
        "auc": value,
        "auc_se": se,
        "auc_ci": ci,
        "accuracy": cm.accuracy,
        "sensitivity": cm.sensitivity,
        "specificity": cm.specificity,
        "confusion": cm.to_dict(),
        "roc_points": [[f, t, _json_float(h)] for f, t, h in roc.points()],
    }


def evaluation_report(
    model_scores,
    truth,
    raters: Optional[dict[str, Sequence[int]]] = None,
    threshold: float = 0.5,
    level: float = 0.95,
) -> dict:
    """Assemble the model's and raters' ROC/AUC/accuracy figures and kappas.

    Raters are scored as binary readers. Kappas are computed for every pair
    among the thresholded model labels and the raters.
    """
    truth = np.asarray(truth).ravel()
    model_scores = np.asarray(model_scores, dtype=np.float64).ravel()
    raters = dict(raters or {})
    for name, lab in raters.items():
        if len(lab) != len(truth):
            raise ValueError(f"rater {name!r} has {len(lab)} labels for {len(truth)} cases")

    readers = {"model": reader_metrics(model_scores, truth, threshold, level)}
    calls = {"model": (model_scores >= threshold).astype(int)}
    for name, lab in raters.items():
        lab = np.asarray(lab).ravel().astype(int)
        readers[name] = reader_metrics(lab.astype(float), truth, threshold, level)
        calls[name] = lab

    names = list(calls)
    kappas = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            k = cohen_kappa(calls[names[i]], calls[names[j]])
            kappas.append({"a": names[i], "b": names[j], "kappa": k.kappa, "se0": k.se0,
                           "z": _json_float(k.z), "p_value": k.p_value})

    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "threshold": threshold,
        "ci_level": level,
        "n_cases": int(len(truth)),
        "n_positive": int(np.sum(truth == 1)),
        "n_negative": int(np.sum(truth == 0)),
        "readers": readers,
        "kappa": kappas,
    }
