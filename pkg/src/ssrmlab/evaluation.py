"""Accuracy, reliability bins, ECE and confidence histograms."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from ssrmlab.backend import FeatureCache, ModelSnapshot, predict_proba_a
from ssrmlab.prefdata import Label, LabeledExample, LabelSource, PreferenceTriplet

UNCATEGORIZED = "uncategorized"


@dataclass(frozen=True)
class EvalReport:
    overall_accuracy: float
    per_category: dict[str, float]
    n_examples: int
    category_counts: dict[str, int]

    @property
    def category_average(self) -> float:
        """Unweighted mean over categories, the leaderboard-style average."""
        return float(np.mean(list(self.per_category.values())))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    mean_confidence: float
    empirical_accuracy: float
    count: int


@dataclass(frozen=True)
class CalibrationReport:
    """Reliability table over argmax confidence.

    ``ece`` is the count-weighted mean absolute gap between per-bin confidence
    and accuracy; empty bins contribute nothing.
    """

    bins: list[CalibrationBin]
    ece: float
    histogram: list[int]
    n_examples: int

    def to_dict(self) -> dict[str, Any]:
        return {"ece": self.ece, "n_examples": self.n_examples,
                "histogram": list(self.histogram),
                "bins": [asdict(b) for b in self.bins]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lower", "upper", "mean_confidence", "empirical_accuracy", "count"])
        for b in self.bins:
            w.writerow([f"{b.lower:.4f}", f"{b.upper:.4f}", f"{b.mean_confidence:.6f}",
                        f"{b.empirical_accuracy:.6f}", b.count])
        return buf.getvalue()


def argmax_labels(p_a: np.ndarray) -> np.ndarray:
    """True where A is the argmax; exact ties go to A."""
    return p_a >= 1.0 - p_a


def argmax_confidence(p_a: np.ndarray) -> np.ndarray:
    return np.maximum(p_a, 1.0 - p_a)


def _targets(test: Sequence[LabeledExample]) -> np.ndarray:
    return np.fromiter((ex.label is Label.A for ex in test), dtype=bool, count=len(test))


def accuracy_report(pred_a: np.ndarray, is_a: np.ndarray, categories: Sequence[str | None]) -> EvalReport:
    correct = pred_a == is_a
    groups: dict[str, list[bool]] = defaultdict(list)
    for c, ok in zip(categories, correct):
        groups[c or UNCATEGORIZED].append(bool(ok))
    per_cat = {c: float(np.mean(v)) for c, v in sorted(groups.items())}
    counts = {c: len(v) for c, v in sorted(groups.items())}
    return EvalReport(float(np.mean(correct)), per_cat, int(correct.size), counts)


def evaluate(model: ModelSnapshot, test: Sequence[LabeledExample],
             cache: FeatureCache | None = None) -> EvalReport:
    """Accuracy of the argmax prediction against ground-truth labels."""
    if not test:
        raise ValueError("evaluate needs a nonempty test set")
    if any(ex.label_source is not LabelSource.GROUND_TRUTH for ex in test):
        raise ValueError("test labels must be ground truth")
    p_a = predict_proba_a(model, [ex.triplet for ex in test], cache)
    return accuracy_report(argmax_labels(p_a), _targets(test),
                           [ex.triplet.category for ex in test])


def _bin_index(conf: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, len(edges) - 2)


def calibration_from_arrays(confidence: np.ndarray, correct: np.ndarray,
                            n_bins: int = 10, lower: float = 0.5) -> CalibrationReport:
    """Equal-width reliability bins over ``[lower, 1]``."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    edges = np.linspace(lower, 1.0, n_bins + 1)
    idx = _bin_index(confidence, edges)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=confidence, minlength=n_bins)
    hit_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    n = confidence.size
    bins = []
    ece = 0.0
    for k in range(n_bins):
        c = int(counts[k])
        mean_conf = conf_sum[k] / c if c else 0.0
        acc = hit_sum[k] / c if c else 0.0
        if c:
            ece += (c / n) * abs(mean_conf - acc)
        bins.append(CalibrationBin(float(edges[k]), float(edges[k + 1]),
                                   float(mean_conf), float(acc), c))
    return CalibrationReport(bins, float(ece), [int(c) for c in counts], n)


def calibration(model: ModelSnapshot, test: Sequence[LabeledExample], n_bins: int = 10,
                cache: FeatureCache | None = None) -> CalibrationReport:
    """Reliability of argmax confidence, binned over [0.5, 1]."""
    p_a = predict_proba_a(model, [ex.triplet for ex in test], cache)
    correct = argmax_labels(p_a) == _targets(test)
    return calibration_from_arrays(argmax_confidence(p_a), correct, n_bins)


def probability_calibration(model: ModelSnapshot, test: Sequence[LabeledExample], n_bins: int = 10,
                            cache: FeatureCache | None = None) -> CalibrationReport:
    """Reliability of the predicted P(A) over [0, 1] against the observed A rate.

    Unlike :func:`calibration` this keeps predictions below 0.5, so
    confidently wrong predictions show up at the low end of the curve.
    """
    p_a = predict_proba_a(model, [ex.triplet for ex in test], cache)
    return calibration_from_arrays(p_a, _targets(test), n_bins, lower=0.0)


def confidence_histogram(model: ModelSnapshot, data: Sequence[PreferenceTriplet], n_bins: int = 10,
                         cache: FeatureCache | None = None) -> list[int]:
    """Counts of argmax confidence per equal-width bin over [0.5, 1]."""
    p_a = predict_proba_a(model, data, cache)
    edges = np.linspace(0.5, 1.0, n_bins + 1)
    return [int(c) for c in np.bincount(_bin_index(argmax_confidence(p_a), edges), minlength=n_bins)]


def mean_confidence(model: ModelSnapshot, data: Sequence[PreferenceTriplet],
                    cache: FeatureCache | None = None) -> float:
    return float(np.mean(argmax_confidence(predict_proba_a(model, data, cache))))


def ground_truth_confidence(model: ModelSnapshot, test: Sequence[LabeledExample],
                            cache: FeatureCache | None = None) -> np.ndarray:
    """Predicted probability of each example's ground-truth label."""
    p_a = predict_proba_a(model, [ex.triplet for ex in test], cache)
    return np.where(_targets(test), p_a, 1.0 - p_a)


def ground_truth_histogram(model: ModelSnapshot, test: Sequence[LabeledExample], n_bins: int = 10,
                           cache: FeatureCache | None = None) -> list[int]:
    """Counts of the ground-truth label's probability per equal-width bin over [0, 1]."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    conf = ground_truth_confidence(model, test, cache)
    return [int(c) for c in np.bincount(_bin_index(conf, edges), minlength=n_bins)]
