import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssrmlab import backend, synth
from ssrmlab.backend import (
    FeatureCache,
    FeaturizerSpec,
    ModelSnapshot,
    SnapshotError,
    TrainConfig,
    TrainingDivergedError,
    config_hash,
    feature_matrix,
    featurize,
    fit,
    learning_rate_at,
    logits,
    load_snapshot,
    loss_gradient,
    predict,
    predict_proba_a,
    save_snapshot,
    srm_loss,
)
from ssrmlab.evaluation import evaluate
from ssrmlab.experiment import SYNTH_FEATURIZER, SYNTH_TRAIN
from ssrmlab.prefdata import Label, LabeledExample, PreferenceTriplet, format_template

SMALL = FeaturizerSpec(hash_dimension=64, ngram_orders=(1, 2), hash_seed=3)


def random_model(rng, spec=SMALL, scale=1.0):
    return ModelSnapshot(rng.normal(scale=scale, size=spec.hash_dimension), rng.normal(), spec)


def random_batch(rng, size):
    words = ["good", "bad", "ok", "fine", "meh", "great", "poor"]
    out = []
    for i in range(size):
        def sentence():
            return " ".join(rng.choice(words, size=rng.integers(0, 6)))
        t = PreferenceTriplet(sentence(), sentence(), sentence(), id=str(i))
        out.append(LabeledExample(t, Label.A if rng.random() < 0.5 else Label.B))
    return out


# --- featurize ------------------------------------------------------------

def test_empty_template_has_only_markers():
    fv = featurize(SMALL, format_template(PreferenceTriplet("", "", "")))
    assert fv.total == 3


def test_featurize_deterministic():
    text = format_template(PreferenceTriplet("x y", "a b c", "d"))
    a, b = featurize(SMALL, text), featurize(SMALL, text)
    assert a.as_dict() == b.as_dict()


def test_featurize_unigram_counts_by_hand():
    spec = FeaturizerSpec(hash_dimension=2**18, ngram_orders=(1,))
    markers = featurize(spec, format_template(PreferenceTriplet("", "", ""))).as_dict()
    fv = featurize(spec, format_template(PreferenceTriplet("a a b", "", ""))).as_dict()
    body = {k: v - markers.get(k, 0) for k, v in fv.items() if v - markers.get(k, 0)}
    assert sum(body.values()) == 3
    assert len(body) <= 2
    assert sorted(body.values()) in ([1, 2], [3])


def test_response_position_is_encoded():
    spec = FeaturizerSpec(ngram_orders=(1,))
    ab = featurize(spec, format_template(PreferenceTriplet("", "tok", ""))).as_dict()
    ba = featurize(spec, format_template(PreferenceTriplet("", "", "tok"))).as_dict()
    assert ab != ba


def test_featurizer_spec_validation():
    with pytest.raises(ValueError):
        FeaturizerSpec(hash_dimension=1)
    with pytest.raises(ValueError):
        FeaturizerSpec(ngram_orders=())
    with pytest.raises(ValueError):
        FeaturizerSpec(ngram_orders=(0, 1))


def test_cached_matrix_matches_uncached():
    rng = np.random.default_rng(0)
    trips = [ex.triplet for ex in random_batch(rng, 20)]
    cache = FeatureCache(SMALL)
    a = feature_matrix(SMALL, trips, cache).toarray()
    b = feature_matrix(SMALL, trips).toarray()
    assert np.array_equal(a, b) and len(cache) > 0


# --- predict -----------------------------------------------------------------

def test_zero_model_predicts_half():
    p = predict(ModelSnapshot.zeros(SMALL), PreferenceTriplet("x", "y", "z"))
    assert p == (0.5, 0.5)


def test_large_bias_saturates():
    model = ModelSnapshot(np.zeros(SMALL.hash_dimension), 1e3, SMALL)
    assert predict(model, PreferenceTriplet("x", "y", "z")).p_a == 1.0


def test_dimension_mismatch_rejected():
    model = ModelSnapshot.zeros(SMALL)
    x = feature_matrix(FeaturizerSpec(hash_dimension=32), [PreferenceTriplet("a", "b", "c")])
    with pytest.raises(ValueError, match="dimension"):
        logits(model, x)


@given(st.integers(0, 2**32), st.floats(0.01, 50))
@settings(max_examples=40, deadline=None)
def test_probabilities_sum_to_one(seed, scale):
    rng = np.random.default_rng(seed)
    model = random_model(rng, scale=scale)
    for ex in random_batch(rng, 5):
        p = predict(model, ex.triplet)
        assert abs(p.p_a + p.p_b - 1.0) <= 1e-12
        assert 0.0 <= p.p_a <= 1.0 and 0.0 <= p.p_b <= 1.0


def test_trained_model_agrees_with_bayes_label():
    world = synth.sample_world(500, 1)
    train = [s.example for s in synth.generate(world, 10_000)]
    held_out = synth.generate(world, 5_000, synth.TEST_STREAM)
    model = fit(ModelSnapshot.zeros(SYNTH_FEATURIZER), train, SYNTH_TRAIN)
    p_a = predict_proba_a(model, [s.triplet for s in held_out])
    bayes_a = np.array([s.bayes_label is Label.A for s in held_out])
    assert np.mean((p_a >= 0.5) == bayes_a) >= 0.70


# --- srm_loss -------------------------------------------------------------

def test_zero_model_loss_is_ln2():
    batch = random_batch(np.random.default_rng(1), 17)
    assert srm_loss(ModelSnapshot.zeros(SMALL), batch) == pytest.approx(math.log(2), abs=1e-15)


def test_saturated_correct_predictions_have_zero_loss():
    model = ModelSnapshot(np.zeros(SMALL.hash_dimension), 800.0, SMALL)
    batch = [LabeledExample(PreferenceTriplet("x", "y", str(i), id=str(i)), Label.A) for i in range(4)]
    assert srm_loss(model, batch) == pytest.approx(0.0, abs=1e-300)


def test_loss_matches_hand_oracle():
    # value from a 50-digit evaluation over the explicit feature dictionaries
    spec = FeaturizerSpec(hash_dimension=64, ngram_orders=(1,), hash_seed=7)
    weights = np.array([(i % 7 - 3) / 10 for i in range(64)])
    model = ModelSnapshot(weights, 0.25, spec)
    batch = [
        LabeledExample(PreferenceTriplet("q", "good answer", "bad", id="0"), Label.A),
        LabeledExample(PreferenceTriplet("q", "bad", "good answer", id="1"), Label.B),
        LabeledExample(PreferenceTriplet("other q", "meh", "meh", id="2"), Label.B),
    ]
    assert srm_loss(model, batch) == pytest.approx(0.67427862918240640064, abs=1e-10)


def test_l2_penalty_added():
    rng = np.random.default_rng(4)
    model = random_model(rng)
    batch = random_batch(rng, 6)
    base = srm_loss(model, batch)
    assert srm_loss(model, batch, l2=0.3) == pytest.approx(base + 0.15 * model.weights @ model.weights)


@given(st.integers(0, 2**32))
@settings(max_examples=25, deadline=None)
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert srm_loss(random_model(rng, scale=5), random_batch(rng, 8)) >= 0.0


# --- loss_gradient --------------------------------------------------------

def test_zero_model_gradient_single_a():
    ex = LabeledExample(PreferenceTriplet("x", "y y", "z"), Label.A)
    g = loss_gradient(ModelSnapshot.zeros(SMALL), [ex])
    phi = feature_matrix(SMALL, [ex.triplet]).toarray().ravel()
    np.testing.assert_array_equal(g.weights, -0.5 * phi)
    assert g.bias == -0.5


def test_symmetric_batch_cancels():
    t = PreferenceTriplet("x", "y", "z")
    batch = [LabeledExample(PreferenceTriplet("x", "y", "z", id="1"), Label.A),
             LabeledExample(t, Label.B)]
    g = loss_gradient(ModelSnapshot.zeros(SMALL), batch)
    assert not np.any(g.weights) and g.bias == 0.0


def central_difference(model, batch, l2, h=1e-5):
    """Finite-difference gradient of srm_loss over every weight and the bias."""
    cache = FeatureCache(model.featurizer)
    w0 = np.array(model.weights)
    grad = np.empty(w0.size + 1)
    for j in range(w0.size + 1):
        params = []
        for sign in (1, -1):
            w, b = w0.copy(), model.bias
            if j < w0.size:
                w[j] += sign * h
            else:
                b += sign * h
            params.append(srm_loss(ModelSnapshot(w, b, model.featurizer), batch, l2, cache))
        grad[j] = (params[0] - params[1]) / (2 * h)
    return grad


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(12345)
    spec = FeaturizerSpec(hash_dimension=24, ngram_orders=(1, 2), hash_seed=1)
    worst = 0.0
    for _ in range(100):
        model = random_model(rng, spec, scale=rng.uniform(0.05, 1.0))
        batch = random_batch(rng, int(rng.integers(1, 12)))
        l2 = float(rng.choice([0.0, 0.1]))
        g = loss_gradient(model, batch, l2)
        analytic = np.append(g.weights, g.bias)
        numeric = central_difference(model, batch, l2)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        worst = max(worst, rel)
    assert worst < 1e-6


# --- fit ---------------------------------------------------------------------

def test_zero_learning_rate_keeps_weights():
    rng = np.random.default_rng(5)
    init = random_model(rng)
    out = fit(init, random_batch(rng, 40), TrainConfig(learning_rate=0.0, batch_size=8))
    np.testing.assert_array_equal(out.weights, init.weights)
    assert out.bias == init.bias


def test_fit_does_not_modify_input():
    rng = np.random.default_rng(6)
    init = random_model(rng)
    before = init.weights.copy()
    fit(init, random_batch(rng, 30), TrainConfig(learning_rate=0.5, batch_size=4))
    np.testing.assert_array_equal(init.weights, before)


def test_fit_is_bit_deterministic():
    rng = np.random.default_rng(7)
    data = random_batch(rng, 100)
    cfg = TrainConfig(learning_rate=0.3, batch_size=16, epochs=2, seed=99)
    a = fit(ModelSnapshot.zeros(SMALL), data, cfg)
    b = fit(ModelSnapshot.zeros(SMALL), data, cfg)
    assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias


def _separable_world():
    world = synth.sample_world(20, 0, deterministic_labels=True)
    return [s.example for s in synth.generate(world, 2_000)]


SEPARABLE_CFG = TrainConfig(learning_rate=1.0, batch_size=16, lr_schedule="cosine")


def test_fit_separable_fixture():
    data = _separable_world()
    model = fit(ModelSnapshot.zeros(SYNTH_FEATURIZER), data, SEPARABLE_CFG)
    assert evaluate(model, data).overall_accuracy >= 0.95


def test_one_epoch_decreases_loss():
    data = _separable_world()
    zero = ModelSnapshot.zeros(SYNTH_FEATURIZER)
    model = fit(zero, data, SEPARABLE_CFG)
    assert srm_loss(model, data) < srm_loss(zero, data)


def test_divergence_reports_step():
    spec = FeaturizerSpec(hash_dimension=8, ngram_orders=(1,))
    data = [LabeledExample(PreferenceTriplet("x", "a " * 50, "", id=str(i)),
                           Label.A if i % 2 else Label.B) for i in range(64)]
    with pytest.raises(TrainingDivergedError) as err:
        fit(ModelSnapshot.zeros(spec), data, TrainConfig(learning_rate=1e306, batch_size=1))
    assert err.value.step >= 1


def test_fit_rejects_empty_data():
    with pytest.raises(ValueError):
        fit(ModelSnapshot.zeros(SMALL), [], TrainConfig())


def test_cosine_schedule_with_warmup():
    cfg = TrainConfig(learning_rate=2.0, lr_schedule="cosine", warmup_steps=4)
    assert learning_rate_at(cfg, 0, 20) == pytest.approx(0.5)
    assert learning_rate_at(cfg, 3, 20) == pytest.approx(2.0)
    assert learning_rate_at(cfg, 4, 20) == pytest.approx(2.0)
    assert learning_rate_at(cfg, 12, 20) == pytest.approx(1.0)
    assert learning_rate_at(cfg, 19, 20) < 0.05


# --- snapshots ----------------------------------------------------------------

def test_snapshot_round_trip_exact(tmp_path):
    rng = np.random.default_rng(8)
    model = random_model(rng)
    path = tmp_path / "m.npz"
    save_snapshot(model, path)
    loaded = load_snapshot(path)
    batch = [ex.triplet for ex in random_batch(rng, 30)]
    assert predict_proba_a(loaded, batch).tobytes() == predict_proba_a(model, batch).tobytes()
    assert loaded.featurizer == model.featurizer
    assert loaded.bias == model.bias


def test_truncated_snapshot_rejected(tmp_path):
    model = random_model(np.random.default_rng(9))
    path = tmp_path / "m.npz"
    save_snapshot(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(SnapshotError):
        load_snapshot(path)


def test_snapshot_version_checked(tmp_path, monkeypatch):
    model = ModelSnapshot.zeros(SMALL)
    path = tmp_path / "m.npz"
    monkeypatch.setattr(backend, "SNAPSHOT_VERSION", 99)
    save_snapshot(model, path)
    monkeypatch.undo()
    with pytest.raises(SnapshotError, match="version"):
        load_snapshot(path)


def test_snapshot_records_verifiable_config_hash(tmp_path):
    run_config = {"train": TrainConfig(seed=3).to_dict(), "note": "x"}
    expected = hashlib.sha256(
        b'{"note":"x","train":{"batch_size":128,"epochs":1,"l2":0.0,"learning_rate":0.1,'
        b'"lr_schedule":"constant","seed":3,"warmup_steps":0}}').hexdigest()
    assert config_hash(run_config) == expected
    rng = np.random.default_rng(10)
    model = fit(ModelSnapshot.zeros(SMALL), random_batch(rng, 20), TrainConfig(seed=3),
                provenance={"config_hash": config_hash(run_config), "iteration": 0})
    save_snapshot(model, tmp_path / "m.npz")
    assert load_snapshot(tmp_path / "m.npz").provenance["config_hash"] == expected
