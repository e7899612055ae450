import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fieldattn import AttentionCTRClassifier, check_dataset

SMALL = dict(embedding_dim=4, hidden_dims=(6, 3), attention_dim=5, batch_size=32, epochs=2)


def test_params_round_trip_and_clone():
    est = AttentionCTRClassifier(unit="din", learning_rate=0.05)
    params = est.get_params()
    assert params["unit"] == "din" and params["learning_rate"] == 0.05
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(epochs=3)
    assert est.epochs == 3


def test_fit_predict_score(small_data):
    train_set, test_set = small_data
    est = AttentionCTRClassifier(**SMALL, target_sparsity=0.5).fit(train_set, eval_set=test_set)
    proba = est.predict_proba(test_set)
    assert proba.shape == (len(test_set), 2)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert set(np.unique(est.predict(test_set))) <= {0, 1}
    assert est.score(test_set) == pytest.approx(est.history_[-1]["eval_auc"], abs=1e-12)
    assert est.prune_state_.n_pruned == 3
    assert est.pair_weights_.R.shape == (2, 3)
    dec = est.decision_function(test_set)
    assert np.array_equal(np.argsort(dec, kind="stable"), np.argsort(proba[:, 1], kind="stable"))


def test_fit_is_deterministic(small_data):
    train_set, test_set = small_data
    a = AttentionCTRClassifier(**SMALL, unit="maf_s").fit(train_set).predict_proba(test_set)
    b = AttentionCTRClassifier(**SMALL, unit="maf_s").fit(train_set).predict_proba(test_set)
    assert np.array_equal(a, b)


def test_y_overrides_labels(small_data):
    train_set, _ = small_data
    est = AttentionCTRClassifier(**SMALL).fit(train_set, y=np.zeros(len(train_set), int))
    assert est.predict_proba(train_set)[:, 1].mean() < 0.5


def test_unfitted_and_bad_inputs(small_data, synth_schema):
    train_set, _ = small_data
    est = AttentionCTRClassifier(**SMALL)
    with pytest.raises(NotFittedError):
        est.predict_proba(train_set)
    with pytest.raises(NotFittedError):
        est.pair_weights_
    with pytest.raises(TypeError):
        est.fit(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        est.fit(train_set, y=np.full(len(train_set), 2))
    with pytest.raises(ValueError):
        check_dataset(train_set.subset([]))
    est.fit(train_set)
    with pytest.raises(ValueError):
        check_dataset(train_set, synth_schema)
