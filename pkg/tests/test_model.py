"""Factorization model: representations, ranking, the training kernel, IO."""

import json

import numpy as np
import pytest

from docmatch import (
    ConfigError,
    EpochStats,
    HybridModel,
    Hyperparams,
    TrustWeights,
    ValidationError,
    fit,
    stable_sigmoid,
)
from docmatch.errors import NumericalError
from docmatch.evaluation import identity_features
from docmatch.model import harmonic_table, triplet_loss_and_grads

from conftest import make_log


def identity_model(events, n_doctors, **hp_kwargs):
    log = make_log(events, n_doctors=n_doctors)
    features = identity_features(log)
    return log, HybridModel(features, Hyperparams(**hp_kwargs))


def snapshot(model):
    return {name: getattr(model, name).copy()
            for name in ("patient_emb", "doctor_emb", "patient_bias",
                         "doctor_bias", "patient_emb_acc", "doctor_emb_acc")}


# -- sigmoid and harmonic numbers --------------------------------------------


def test_stable_sigmoid_values():
    assert stable_sigmoid(0.0) == 0.5
    assert stable_sigmoid(2.0) == pytest.approx(0.8807970779778823, abs=1e-16)
    assert stable_sigmoid(800.0) == 1.0  # saturates without overflow
    assert stable_sigmoid(-800.0) == 0.0


def test_stable_sigmoid_symmetry():
    rng = np.random.default_rng(1)
    for x in rng.uniform(-700, 700, size=300):
        assert abs(stable_sigmoid(x) + stable_sigmoid(-x) - 1.0) <= 1e-15


def test_harmonic_table():
    table = harmonic_table(5)
    assert table[0] == 0.0
    assert table[1] == 1.0
    assert table[3] == pytest.approx(1.8333333333333333, abs=1e-15)
    assert len(table) == 6


# -- hyperparameters ----------------------------------------------------------


@pytest.mark.parametrize("kwargs,message", [
    (dict(learning_rate=0.0), "learning_rate must be > 0"),
    (dict(epochs=-1), "epochs must be >= 0"),
    (dict(lam=-0.1), "lambda must be >= 0"),
    (dict(no_components=0), "no_components must be >= 1"),
    (dict(max_sampled=0), "max_sampled must be >= 1"),
    (dict(margin=-1.0), "margin must be >= 0"),
    (dict(init_scale=0.0), "init_scale must be > 0"),
    (dict(trust_mode="bayes"),
     "unknown trust_mode 'bayes'; expected one of off, sample, gradient"),
])
def test_hyperparams_validation(kwargs, message):
    with pytest.raises(ConfigError, match=message):
        Hyperparams(**kwargs)


def test_trust_mode_aliases():
    assert Hyperparams(trust_mode="sample_weight").trust_mode == "sample"
    assert Hyperparams(trust_mode="gradient_weight").trust_mode == "gradient"
    assert Hyperparams(trust_mode="off").trust_mode == "off"


def test_hyperparams_json_round_trip():
    hp = Hyperparams(learning_rate=0.05, lam=0.7, trust_mode="gradient")
    d = hp.to_json_dict()
    assert d["lambda"] == 0.7 and "lam" not in d
    assert Hyperparams.from_json_dict(d) == hp
    assert Hyperparams.from_json_dict(json.loads(json.dumps(d))) == hp


# -- representations ----------------------------------------------------------


def test_feature_sum_linearity_is_exact(synth_corpus):
    model = HybridModel(synth_corpus.features, Hyperparams(no_components=6,
                                                           rng_seed=3))
    n = synth_corpus.features.n_patient_features
    rng = np.random.default_rng(0)
    for _ in range(50):
        pool = rng.permutation(n)
        cut = rng.integers(1, min(len(pool), 9))
        a, b = tuple(pool[:cut]), tuple(pool[cut:cut + rng.integers(1, 6)])
        va, ba = model.represent_patient(a)
        vb, bb = model.represent_patient(b)
        vu, bu = model.represent_patient(a + b)
        # init values live on a 2^-24 grid, so sums are exact and order-free
        assert np.array_equal(va + vb, vu)
        assert ba + bb == bu
        shuffled = tuple(rng.permutation(a + b))
        vs, bs = model.represent_patient(shuffled)
        assert np.array_equal(vs, vu) and bs == bu


def test_out_of_vocabulary_indices_rejected(synth_corpus):
    model = HybridModel(synth_corpus.features, Hyperparams(no_components=2))
    with pytest.raises(ValidationError, match="patient feature index 9999 out"):
        model.represent_patient((9999,))
    with pytest.raises(ValidationError, match="doctor feature index -1 out"):
        model.represent_doctor((-1,))


def test_raw_score_bias_toggle():
    log = make_log([(0, 0, 2014)], n_doctors=2)
    features = identity_features(log)
    biased = HybridModel(features, Hyperparams(no_components=2, rng_seed=5))
    biased.patient_bias[:] = 0.25
    biased.doctor_bias[:] = 1.5
    p, _ = biased.patient_vector(0)
    q, _ = biased.doctor_vector(1)
    assert biased.raw_score(0, 1) == pytest.approx(float(p @ q) + 0.25 + 1.5)
    plain = HybridModel(features, Hyperparams(no_components=2, rng_seed=5,
                                              bias_enabled=False))
    plain.patient_bias[:] = 0.25
    plain.doctor_bias[:] = 1.5
    assert plain.raw_score(0, 1) == pytest.approx(float(p @ q))


# -- ranking ------------------------------------------------------------------


def test_fresh_model_featureless_query_ties_by_index():
    _, model = identity_model([(0, 0, 2014)], n_doctors=5, no_components=3)
    ranked = model.rank_doctors(feature_indices=(), n=5)
    assert [s.doctor_index for s in ranked] == [0, 1, 2, 3, 4]
    assert all(s.raw == 0.0 and s.score == 0.5 for s in ranked)


def test_rank_doctors_matches_per_pair_scoring(synth_corpus):
    model = fit(synth_corpus.log, synth_corpus.features,
                Hyperparams(no_components=8, epochs=3, rng_seed=2))
    n_doctors = len(synth_corpus.features.doctor_features)
    for patient in (0, 7, 33):
        ranked = model.rank_doctors(patient=patient, n=n_doctors)
        raws = [model.raw_score(patient, j) for j in range(n_doctors)]
        expected = sorted(range(n_doctors), key=lambda j: (-raws[j], j))
        assert [s.doctor_index for s in ranked] == expected
        for s in ranked:
            assert s.raw == pytest.approx(raws[s.doctor_index], abs=1e-9)
            assert s.score == stable_sigmoid(s.raw)
        assert all(a.raw >= b.raw for a, b in zip(ranked, ranked[1:]))


def test_rank_doctors_candidate_subset_and_table(synth_corpus):
    model = fit(synth_corpus.log, synth_corpus.features,
                Hyperparams(no_components=8, epochs=2, rng_seed=2))
    n_doctors = len(synth_corpus.features.doctor_features)
    candidates = [n_doctors - 1, 2, 5]
    ranked = model.rank_doctors(patient=1, n=3, candidates=candidates)
    assert sorted(s.doctor_index for s in ranked) == sorted(candidates)
    table = model.doctor_representation_table()
    via_table = model.rank_doctors(patient=1, n=3, candidates=candidates,
                                   table=table)
    assert ranked == via_table


def test_rank_doctors_argument_errors(synth_corpus):
    model = HybridModel(synth_corpus.features, Hyperparams(no_components=2))
    with pytest.raises(ValidationError, match="n must be >= 1"):
        model.rank_doctors(patient=0, n=0)
    with pytest.raises(ValidationError, match="empty candidate set"):
        model.rank_doctors(patient=0, candidates=[])
    with pytest.raises(ValidationError, match="needs a patient or feature_indices"):
        model.rank_doctors()


# -- training kernel ----------------------------------------------------------


def test_planted_violation_epoch_stats():
    log, model = identity_model([(0, 0, 2014)], n_doctors=3, no_components=1,
                                epochs=0, bias_enabled=False, max_sampled=1,
                                rng_seed=0)
    model.patient_emb = np.array([[1.0]])
    model.doctor_emb = np.array([[1.0], [3.0], [3.0]])
    stats = model.warp_epoch(log, seed=123)
    # one pair, one attempt, rank (2-1)//1 = 1 -> scale 1, hinge 1 - 1 + 3
    assert stats == EpochStats(epoch=1, mean_loss=3.0, mean_attempts=1.0,
                               n_skipped=0, n_updates=1)
    assert model.history == [stats]


def test_equal_scores_make_no_updates():
    log, model = identity_model([(0, 0, 2014)], n_doctors=3, no_components=1,
                                bias_enabled=False, max_sampled=3, rng_seed=0)
    model.patient_emb = np.array([[1.0]])
    model.doctor_emb = np.array([[2.0], [2.0], [2.0]])
    before = snapshot(model)
    stats = model.warp_epoch(log, seed=7)
    # a tie is not a violation, so sampling exhausts max_sampled attempts
    assert stats.mean_loss == 0.0
    assert stats.mean_attempts == 3.0
    assert stats.n_updates == 0 and stats.n_skipped == 0
    for name, arr in before.items():
        assert np.array_equal(getattr(model, name), arr)


def test_pairs_without_negatives_are_skipped():
    log, model = identity_model([(0, 0, 2014), (0, 1, 2014)], n_doctors=2,
                                no_components=2, rng_seed=1)
    stats = model.warp_epoch(log, seed=0)
    assert stats.n_skipped == 2
    assert stats.n_updates == 0
    assert stats.mean_loss == 0.0 and stats.mean_attempts == 0.0


def test_fit_zero_epochs_keeps_init(synth_corpus):
    hp = Hyperparams(no_components=4, epochs=0, rng_seed=9)
    trained = fit(synth_corpus.log, synth_corpus.features, hp)
    reference = HybridModel(synth_corpus.features, hp)
    assert np.array_equal(trained.patient_emb, reference.patient_emb)
    assert np.array_equal(trained.doctor_emb, reference.doctor_emb)
    assert not trained.history


def test_training_determinism(synth_corpus):
    hp = Hyperparams(no_components=8, epochs=4, rng_seed=11)
    a = fit(synth_corpus.log, synth_corpus.features, hp)
    b = fit(synth_corpus.log, synth_corpus.features, hp)
    assert np.array_equal(a.patient_emb, b.patient_emb)
    assert np.array_equal(a.doctor_emb, b.doctor_emb)
    assert np.array_equal(a.doctor_bias, b.doctor_bias)
    assert a.history == b.history
    c = fit(synth_corpus.log, synth_corpus.features,
            Hyperparams(no_components=8, epochs=4, rng_seed=12))
    assert not np.array_equal(a.patient_emb, c.patient_emb)


def test_training_reduces_loss(synth_corpus):
    model = fit(synth_corpus.log, synth_corpus.features,
                Hyperparams(no_components=16, epochs=30, rng_seed=0))
    assert model.history[-1].mean_loss < 0.5 * model.history[0].mean_loss


def test_adagrad_accumulators_grow_monotonically(synth_corpus):
    model = HybridModel(synth_corpus.features,
                        Hyperparams(no_components=4, epochs=0, rng_seed=0))
    prev = 0.0
    for _ in range(3):
        model.warp_epoch(synth_corpus.log)
        acc = float(model.patient_emb_acc.sum() + model.doctor_emb_acc.sum())
        assert acc >= prev
        prev = acc
    assert prev > 0.0


def test_trust_off_equals_equal_sample_weights(synth_corpus):
    log = synth_corpus.log
    hp_off = Hyperparams(no_components=6, epochs=3, rng_seed=4, trust_mode="off")
    hp_sample = Hyperparams(no_components=6, epochs=3, rng_seed=4,
                            trust_mode="sample")
    equal = TrustWeights(int(log.years.max()), 0.0, "per_year",
                         {pair: 0.5 for pair in log.pairs()})
    a = fit(log, synth_corpus.features, hp_off)
    b = fit(log, synth_corpus.features, hp_sample, trust=equal)
    assert np.array_equal(a.patient_emb, b.patient_emb)
    assert np.array_equal(a.doctor_emb, b.doctor_emb)
    assert np.array_equal(a.doctor_bias, b.doctor_bias)
    assert a.history == b.history


def test_trust_plan_validation(synth_corpus):
    log = synth_corpus.log
    hp = Hyperparams(no_components=2, epochs=1, trust_mode="sample")
    pairs = sorted(log.pairs())
    missing = TrustWeights(2017, 0.0, "per_year",
                           {pair: 1.0 for pair in pairs[1:]})
    with pytest.raises(ValidationError,
                       match=r"trust entry missing for pair .* under trust_mode "
                             r"'sample'"):
        fit(log, synth_corpus.features, hp, trust=missing)
    negative = TrustWeights(2017, 0.0, "per_year",
                            {pair: -1.0 for pair in pairs})
    with pytest.raises(ValidationError, match="trust weights must be positive"):
        fit(log, synth_corpus.features, hp, trust=negative)


def test_empty_log_rejected():
    log = make_log([], n_patients=1, n_doctors=1)
    features = identity_features(log)
    with pytest.raises(ValidationError, match="training log has no interaction pairs"):
        fit(log, features, Hyperparams(no_components=1, epochs=1))


def test_non_finite_parameters_raise_numerical_error():
    log, model = identity_model([(0, 0, 2014)], n_doctors=3, no_components=1,
                                rng_seed=0)
    model.patient_emb[0, 0] = np.nan
    with pytest.raises(NumericalError, match=r"non-finite score during training "
                                             r"\(epoch 1, step \d+\)") as info:
        model.warp_epoch(log, seed=5)
    assert info.value.epoch == 1
    assert info.value.step >= 0


# -- triplet gradients --------------------------------------------------------


def test_triplet_gradients_match_finite_differences(synth_corpus):
    rng = np.random.default_rng(17)
    model = HybridModel(synth_corpus.features,
                        Hyperparams(no_components=5, rng_seed=13))
    n_doctors = len(synth_corpus.features.doctor_features)
    n_patients = len(synth_corpus.features.patient_features)
    h = 1e-5
    checked = 0
    while checked < 20:
        patient = int(rng.integers(n_patients))
        positive, negative = rng.choice(n_doctors, size=2, replace=False)
        loss, grads = triplet_loss_and_grads(model, patient, int(positive),
                                             int(negative))
        gap = model.hyperparams.margin - model.raw_score(patient, int(positive)) \
            + model.raw_score(patient, int(negative))
        if abs(gap) < 1e-3:
            continue  # stay away from the hinge kink
        for name in ("patient_emb", "doctor_emb", "patient_bias", "doctor_bias"):
            arr = getattr(model, name)
            flat = arr.reshape(-1)
            for k in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                orig = flat[k]
                flat[k] = orig + h
                up = triplet_loss_and_grads(model, patient, int(positive),
                                            int(negative))[0]
                flat[k] = orig - h
                down = triplet_loss_and_grads(model, patient, int(positive),
                                              int(negative))[0]
                flat[k] = orig
                numeric = (up - down) / (2 * h)
                analytic = grads[name].reshape(-1)[k]
                scale = max(abs(numeric), abs(analytic), 1.0)
                assert abs(numeric - analytic) / scale < 1e-4
        checked += 1


def test_triplet_patient_bias_gradient_cancels(synth_corpus):
    model = HybridModel(synth_corpus.features,
                        Hyperparams(no_components=3, rng_seed=1))
    _, grads = triplet_loss_and_grads(model, 0, 0, 1)
    # +b_i and -b_i enter the hinge with opposite signs and cancel exactly
    assert np.all(grads["patient_bias"] == 0.0)


# -- persistence --------------------------------------------------------------


def test_save_load_round_trip(tmp_path, synth_corpus):
    model = fit(synth_corpus.log, synth_corpus.features,
                Hyperparams(no_components=4, epochs=2, rng_seed=6))
    path = tmp_path / "model.bin"
    model.save(path, provenance={"cli.log": "log.tsv"})
    loaded = HybridModel.load(path, synth_corpus.features)
    for name in ("patient_emb", "doctor_emb", "patient_bias", "doctor_bias",
                 "patient_emb_acc", "doctor_emb_acc", "patient_bias_acc",
                 "doctor_bias_acc"):
        assert np.array_equal(getattr(loaded, name), getattr(model, name)), name
    assert loaded.hyperparams == model.hyperparams
    assert loaded.history == model.history
    second = tmp_path / "model2.bin"
    loaded.save(second, provenance={"cli.log": "log.tsv"})
    assert second.read_bytes() == path.read_bytes()
    header = json.loads(path.read_bytes().split(b"\n", 1)[0])
    assert header["format"] == "docmatch-model v1"
    assert header["vocab_sha256"] == synth_corpus.features.fingerprint()


def test_load_error_cases(tmp_path, synth_corpus):
    features = synth_corpus.features
    model = fit(synth_corpus.log, features,
                Hyperparams(no_components=2, epochs=1, rng_seed=0))
    good = tmp_path / "model.bin"
    model.save(good)
    data = good.read_bytes()

    no_newline = tmp_path / "a.bin"
    no_newline.write_bytes(b"just bytes without a newline")
    with pytest.raises(ValidationError, match="truncated model file"):
        HybridModel.load(no_newline, features)

    bad_json = tmp_path / "b.bin"
    bad_json.write_bytes(b"{not json\n")
    with pytest.raises(ValidationError, match="model header is not valid JSON"):
        HybridModel.load(bad_json, features)

    wrong_format = tmp_path / "c.bin"
    wrong_format.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ValidationError, match="not a 'docmatch-model v1' file"):
        HybridModel.load(wrong_format, features)

    truncated = tmp_path / "d.bin"
    truncated.write_bytes(data[:-16])
    with pytest.raises(ValidationError, match="truncated array block"):
        HybridModel.load(truncated, features)

    trailing = tmp_path / "e.bin"
    trailing.write_bytes(data + b"\x00")
    with pytest.raises(ValidationError, match="trailing bytes after array blocks"):
        HybridModel.load(trailing, features)

    other_log = make_log([(0, 0, 2014)], n_doctors=2)
    other = identity_features(other_log)
    with pytest.raises(ValidationError, match="different feature vocabulary"):
        HybridModel.load(good, other)
