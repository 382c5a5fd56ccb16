"""Semi-supervised reward modeling by iterative self-training.

Starting from a base model, the loop is:

1. fit the base model on the labeled pool D_l, giving model 0;
2. for t = 1 .. T-1, pseudo-label every unlabeled triplet with model t-1,
   keep those whose argmax probability is at least ``threshold_s``, form
   D_t = D_l + kept pseudo-labels, and fit again to get model t.

By default every fit starts from the base model rather than from the
previous iterate, so each model sees exactly one pass over its D_t.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from ssrmlab.backend import (
    FeatureCache,
    ModelSnapshot,
    TrainConfig,
    config_hash,
    feature_matrix,
    fit_matrix,
    logits,
    predict,
    predict_proba_a,
)
from ssrmlab.evaluation import EvalReport, argmax_confidence, argmax_labels, evaluate
from ssrmlab.prefdata import (
    DatasetError,
    Label,
    LabeledExample,
    LabelSource,
    PreferenceDataset,
    PreferenceTriplet,
)

@dataclass(frozen=True)
class SsrmConfig:
    threshold_s: float = 0.8
    iterations_T: int = 4
    restart_from_initial: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    # experimental extra, off by default: average P(A) over both response orders before labeling
    order_averaged: bool = False

    def __post_init__(self):
        if not 0.0 <= self.threshold_s <= 1.0:
            raise ValueError("threshold_s must be in [0, 1]")
        if self.iterations_T < 1:
            raise ValueError("iterations_T must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


@dataclass(frozen=True)
class PseudoLabeledExample:
    triplet: PreferenceTriplet
    label: Label
    confidence: float

    def as_labeled(self) -> LabeledExample:
        return LabeledExample(self.triplet, self.label, LabelSource.PSEUDO, self.confidence)


@dataclass
class IterationReport:
    t: int
    d_t_size: int
    pseudo_count: int
    pseudo_fraction: float
    retained_fraction: float
    mean_confidence: float | None = None
    eval: EvalReport | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["eval"] = None if self.eval is None else self.eval.to_dict()
        return d


def _proba_a(model: ModelSnapshot, x: sp.spmatrix, x_swapped: sp.spmatrix | None) -> np.ndarray:
    p_a = expit(logits(model, x))
    if x_swapped is not None:
        p_a = 0.5 * (p_a + (1.0 - expit(logits(model, x_swapped))))
    return p_a


def pseudo_label(model: ModelSnapshot, u: PreferenceTriplet) -> PseudoLabeledExample:
    """Hard argmax label with its probability; exact ties go to A."""
    p_a, p_b = predict(model, u)
    label = Label.A if p_a >= p_b else Label.B
    return PseudoLabeledExample(u, label, max(p_a, p_b))


def pseudo_label_many(model: ModelSnapshot, triplets: Sequence[PreferenceTriplet],
                      cache: FeatureCache | None = None) -> list[PseudoLabeledExample]:
    p_a = predict_proba_a(model, triplets, cache)
    return _pseudo_from_proba(triplets, p_a)


def _pseudo_from_proba(triplets: Sequence[PreferenceTriplet], p_a: np.ndarray) -> list[PseudoLabeledExample]:
    is_a = argmax_labels(p_a)
    conf = argmax_confidence(p_a)
    return [PseudoLabeledExample(t, Label.A if a else Label.B, float(c))
            for t, a, c in zip(triplets, is_a, conf)]


def confidence_filter(pseudo: Sequence[PseudoLabeledExample], s: float) -> list[PseudoLabeledExample]:
    """Keep examples with confidence >= s, in input order."""
    return [p for p in pseudo if p.confidence >= s]


def build_iteration_dataset(d_l: Sequence[LabeledExample],
                            retained: Sequence[PseudoLabeledExample]) -> list[LabeledExample]:
    """D_t: the labeled pool followed by the retained pseudo-labeled examples."""
    labeled_ids = {ex.id for ex in d_l}
    clash = [p.triplet.id for p in retained if p.triplet.id in labeled_ids]
    if clash:
        raise DatasetError(f"pseudo-labeled ids collide with labeled pool: {clash[:5]}")
    return [*d_l, *(p.as_labeled() for p in retained)]


IterationCallback = Callable[[int, ModelSnapshot, list[LabeledExample]], None]


def run_ssrm(pre_model: ModelSnapshot, data: PreferenceDataset, cfg: SsrmConfig,
             eval_set: Sequence[LabeledExample] | None = None, *,
             cache: FeatureCache | None = None, run_hash: str | None = None,
             on_iteration: IterationCallback | None = None) -> tuple[ModelSnapshot, list[IterationReport]]:
    """Run the self-training loop and return the last model and one report per iteration.

    With an empty labeled pool ``pre_model`` is used as model 0 directly,
    which only makes sense if it is already trained.  ``on_iteration`` is
    called with ``(t, model_t, D_t)`` after every fit.
    """
    if data.m == 0 and pre_model.is_zero:
        raise ValueError("an untrained model needs at least one labeled example")
    spec = pre_model.featurizer
    cache = cache if cache is not None else FeatureCache(spec)
    run_hash = run_hash or config_hash(cfg.to_dict())

    d_l = list(data.labeled)
    d_u = list(data.unlabeled)
    x_l = feature_matrix(spec, [ex.triplet for ex in d_l], cache)
    y_l = np.fromiter((ex.label is Label.A for ex in d_l), dtype=np.float64, count=len(d_l))
    x_u = feature_matrix(spec, d_u, cache)
    x_u_swapped = feature_matrix(spec, [t.swapped() for t in d_u], cache) if cfg.order_averaged else None
    eval_cache = cache

    def report_eval(model):
        return None if not eval_set else evaluate(model, eval_set, eval_cache)

    if data.m:
        model = fit_matrix(pre_model, x_l, y_l, cfg.train,
                           {"config_hash": run_hash, "iteration": 0})
    else:
        model = pre_model
    reports = [IterationReport(0, data.m, 0, 0.0, 0.0, None, report_eval(model))]
    if on_iteration:
        on_iteration(0, model, d_l)

    for t in range(1, cfg.iterations_T):
        if data.n:
            p_a = _proba_a(model, x_u, x_u_swapped)
            conf = argmax_confidence(p_a)
            keep = np.flatnonzero(conf >= cfg.threshold_s)
            mean_conf = float(conf.mean())
        else:
            p_a = np.zeros(0)
            keep = np.zeros(0, dtype=np.int64)
            mean_conf = None
        is_a = argmax_labels(p_a[keep])
        x_t = sp.vstack([x_l, x_u[keep]], format="csr")
        y_t = np.concatenate([y_l, is_a.astype(np.float64)])
        if x_t.shape[0] == 0:
            raise ValueError(f"iteration {t}: empty training set")
        retained = _pseudo_from_proba([d_u[i] for i in keep], p_a[keep])
        d_t = build_iteration_dataset(d_l, retained)
        start = pre_model if cfg.restart_from_initial else model
        model = fit_matrix(start, x_t, y_t, cfg.train,
                           {"config_hash": run_hash, "iteration": t})
        k = len(keep)
        reports.append(IterationReport(
            t=t,
            d_t_size=len(d_t),
            pseudo_count=k,
            pseudo_fraction=k / len(d_t),
            retained_fraction=k / data.n if data.n else 0.0,
            mean_confidence=mean_conf,
            eval=report_eval(model),
        ))
        if on_iteration:
            on_iteration(t, model, d_t)
    return model, reports


def replay_pseudo_count(model: ModelSnapshot, unlabeled: Sequence[PreferenceTriplet], s: float,
                        cache: FeatureCache | None = None) -> int:
    """Recount how many unlabeled triplets ``model`` labels with confidence >= s."""
    return len(confidence_filter(pseudo_label_many(model, unlabeled, cache), s))
