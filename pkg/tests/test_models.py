import numpy as np
import pytest

from advflow.models import (
    ForestClassifier,
    MlpClassifier,
    accuracy,
    load_model,
    load_payload,
    save_model,
    weighted_f1,
)
from advflow.features import Normalizer


def blobs(n=60, seed=0):
    """Two well-separated Gaussian blobs in 3 dimensions."""
    rng = np.random.default_rng(seed)
    a = rng.normal(0.2, 0.05, size=(n // 2, 3))
    b = rng.normal(0.8, 0.05, size=(n // 2, 3))
    X = np.vstack([a, b])
    y = np.array([0] * (n // 2) + [1] * (n // 2))
    order = rng.permutation(n)
    return X[order], y[order]


def test_accuracy_oracle():
    assert accuracy(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1])) == 0.75
    with pytest.raises(ValueError):
        accuracy(np.array([]), np.array([]))


def test_weighted_f1_oracle():
    # class 0: precision 1, recall 1/2, f1 2/3; class 1: precision 2/3, recall 1, f1 4/5
    # supports 2 and 2 -> weighted = (2/3 + 4/5) / 2 = 11/15
    got = weighted_f1(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), 2)
    assert got == pytest.approx(11 / 15)


def test_weighted_f1_skips_absent_classes():
    got = weighted_f1(np.array([0, 0]), np.array([0, 0]), 3)
    assert got == 1.0


def test_mlp_fits_separable_data():
    X, y = blobs()
    m = MlpClassifier(3, 2, seed=0)
    m.fit(X, y, epochs=40, seed=0)
    assert accuracy(y, m.predict(X)) == 1.0


def test_mlp_proba_rows_sum_to_one():
    X, _ = blobs(n=10)
    m = MlpClassifier(3, 2, seed=1)
    p = m.predict_proba(X)
    assert p.shape == (10, 2)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert (p > 0).all()


def test_mlp_fit_deterministic_by_seed():
    X, y = blobs()
    a = MlpClassifier(3, 2, seed=7)
    a.fit(X, y, epochs=15, seed=3)
    b = MlpClassifier(3, 2, seed=7)
    b.fit(X, y, epochs=15, seed=3)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    c = MlpClassifier(3, 2, seed=8)
    c.fit(X, y, epochs=15, seed=3)
    assert any(not np.array_equal(wa, wc) for wa, wc in zip(a.weights, c.weights))


def test_mlp_warm_start_continues():
    X, y = blobs()
    m = MlpClassifier(3, 2, seed=0)
    m.fit(X, y, epochs=5, seed=0)
    first = len(m.history_)
    m.fit(X, y, epochs=5, seed=1)
    assert len(m.history_) == first + 5


def test_mlp_input_gradient_matches_finite_difference():
    X, y = blobs(n=8, seed=5)
    m = MlpClassifier(3, 2, seed=2)
    m.fit(X, y, epochs=10, seed=0)
    g = m.input_gradient(X, y)
    h = 1e-6
    fd = np.zeros_like(X)
    for j in range(X.shape[1]):
        up, dn = X.copy(), X.copy()
        up[:, j] += h
        dn[:, j] -= h
        fd[:, j] = (m.loss(up, y) - m.loss(dn, y)) / (2 * h)
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-7)


def test_forest_fits_separable_data():
    X, y = blobs()
    f = ForestClassifier(3, 2)
    f.fit(X, y, n_trees=15, seed=0)
    assert accuracy(y, f.predict(X)) == 1.0
    p = f.predict_proba(X)
    assert np.allclose(p.sum(axis=1), 1.0)


def test_forest_deterministic_by_seed():
    X, y = blobs()
    a = ForestClassifier(3, 2)
    a.fit(X, y, n_trees=8, seed=4)
    b = ForestClassifier(3, 2)
    b.fit(X, y, n_trees=8, seed=4)
    assert np.array_equal(a.predict_proba(X), b.predict_proba(X))


def test_forest_has_no_input_gradient():
    f = ForestClassifier(3, 2)
    with pytest.raises(TypeError):
        f.input_gradient(np.zeros((1, 3)), np.array([0]))


@pytest.mark.parametrize("kind", ["mlp", "forest"])
def test_save_load_round_trip(tmp_path, kind):
    X, y = blobs()
    if kind == "mlp":
        model = MlpClassifier(3, 2, seed=0)
        model.fit(X, y, epochs=10, seed=0)
    else:
        model = ForestClassifier(3, 2)
        model.fit(X, y, n_trees=6, seed=0)
    norm = Normalizer(np.zeros(3), np.ones(3), ["f0", "f1", "f2"])
    path = tmp_path / "model.json"
    save_model(path, model, ["neg", "pos"], "app", norm)

    back, classes, pname, norm2 = load_model(path)
    assert classes == ["neg", "pos"]
    assert pname == "app"
    assert norm2.names == norm.names
    assert np.array_equal(back.predict_proba(X), model.predict_proba(X))

    payload = load_payload(path)
    assert payload["classes"] == classes
    assert payload["model"].kind == kind
