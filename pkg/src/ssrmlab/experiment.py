"""Synthetic-world experiments: partial SRM vs SSRM vs full SRM, and the
labeled-fraction sweep.

All runs here share one seed per trial: the world, the split, and every
fit are seeded from it, so a trial is a pure function of its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from ssrmlab.backend import FeatureCache, FeaturizerSpec, ModelSnapshot, TrainConfig, fit
from ssrmlab.evaluation import calibration, evaluate, mean_confidence
from ssrmlab.prefdata import LabeledExample, PreferenceTriplet, SplitSpec, split
from ssrmlab.ssrm import IterationReport, SsrmConfig, run_ssrm
from ssrmlab import synth

# The backend defaults (lr 0.1, constant) leave a 1-epoch model on this world
# too under-confident for any pseudo-label to clear s = 0.8.
SYNTH_TRAIN = TrainConfig(learning_rate=3.0, lr_schedule="cosine")
SYNTH_FEATURIZER = FeaturizerSpec(ngram_orders=(1,))
SYNTH_SSRM = SsrmConfig(threshold_s=0.8, iterations_T=4, train=SYNTH_TRAIN)

SWEEP_FRACTIONS = (Fraction(1, 16), Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1))


@dataclass(frozen=True)
class SyntheticSetup:
    world: synth.WorldSpec
    train: list[LabeledExample]
    test: list[LabeledExample]
    bayes: synth.MonteCarloEstimate


def synthetic_setup(seed: int, n_train: int = 40_000, n_test: int = 10_000, vocab_size: int = 500,
                    temperature: float = 1.0, response_length: int = 12,
                    bayes_samples: int = 100_000) -> SyntheticSetup:
    world = synth.sample_world(vocab_size, seed, response_length=response_length,
                               temperature=temperature)
    train = [s.example for s in synth.generate(world, n_train, synth.TRAIN_STREAM, "tr")]
    test = [s.example for s in synth.generate(world, n_test, synth.TEST_STREAM, "te")]
    return SyntheticSetup(world, train, test, synth.bayes_accuracy(world, bayes_samples))


@dataclass(frozen=True)
class ModelMetrics:
    accuracy: float
    ece: float
    mean_confidence: float  # argmax confidence over the unlabeled pool


@dataclass
class TrialResult:
    seed: int
    bayes: synth.MonteCarloEstimate
    iterates: list[ModelMetrics]
    full: ModelMetrics
    reports: list[IterationReport] = field(default_factory=list)

    @property
    def partial(self) -> ModelMetrics:
        return self.iterates[0]

    @property
    def final(self) -> ModelMetrics:
        return self.iterates[-1]


def ssrm_trial(seed: int, cfg: SsrmConfig = SYNTH_SSRM, labeled_fraction: Fraction = Fraction(1, 4),
               featurizer: FeaturizerSpec = SYNTH_FEATURIZER, setup: SyntheticSetup | None = None,
               n_bins: int = 10, **setup_kwargs) -> TrialResult:
    """One seed of the partial-SRM / SSRM / full-SRM comparison."""
    setup = setup or synthetic_setup(seed, **setup_kwargs)
    cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    data = split(setup.train, SplitSpec(labeled_fraction, seed))
    cache = FeatureCache(featurizer)
    zero = ModelSnapshot.zeros(featurizer)
    pool: Sequence[PreferenceTriplet] = data.unlabeled or [ex.triplet for ex in setup.test]

    def metrics(model: ModelSnapshot) -> ModelMetrics:
        return ModelMetrics(evaluate(model, setup.test, cache).overall_accuracy,
                            calibration(model, setup.test, n_bins, cache).ece,
                            mean_confidence(model, pool, cache))

    iterates: list[ModelMetrics] = []
    _, reports = run_ssrm(zero, data, cfg, cache=cache,
                          on_iteration=lambda t, model, d_t: iterates.append(metrics(model)))
    full = fit(zero, setup.train, cfg.train, cache)
    return TrialResult(seed, setup.bayes, iterates, metrics(full), reports)


def labeled_fraction_sweep(data: Sequence[LabeledExample], fractions: Sequence[Fraction | float],
                           cfg: SsrmConfig, test: Sequence[LabeledExample],
                           pre_model: ModelSnapshot, split_seed: int = 0,
                           cache: FeatureCache | None = None) -> list[tuple[Fraction, float]]:
    """Held-out accuracy of single-iteration SSRM at each labeled fraction."""
    one_round = replace(cfg, iterations_T=2)
    cache = cache if cache is not None else FeatureCache(pre_model.featurizer)
    out = []
    for frac in fractions:
        spec = SplitSpec(frac, split_seed)
        model, _ = run_ssrm(pre_model, split(data, spec), one_round, cache=cache)
        out.append((spec.labeled_fraction, evaluate(model, test, cache).overall_accuracy))
    return out


def sweep_trial(seed: int, cfg: SsrmConfig = SYNTH_SSRM, fractions: Sequence[Fraction] = SWEEP_FRACTIONS,
                featurizer: FeaturizerSpec = SYNTH_FEATURIZER, setup: SyntheticSetup | None = None,
                **setup_kwargs) -> list[tuple[Fraction, float]]:
    setup = setup or synthetic_setup(seed, **setup_kwargs)
    cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    return labeled_fraction_sweep(setup.train, fractions, cfg, setup.test,
                                  ModelSnapshot.zeros(featurizer), split_seed=seed)


def seed_summary(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error of the mean."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
