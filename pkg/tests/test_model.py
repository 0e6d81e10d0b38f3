import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cama.model import (
    Model,
    ModelError,
    encode,
    encode_values,
    encoded_width,
    evaluate,
    load_model,
    log_loss,
    loss_and_grad,
    oracle_model,
    predict_proba,
    save_model,
    sigmoid,
    train,
)
from cama.tabular import (
    BUILTIN_IDS,
    CATEGORICAL,
    NUMERICAL,
    Dataset,
    FeatureSchema,
    Schema,
    builtin_schema,
    generate,
    latent_score,
)

TOY = Schema("toy", (FeatureSchema("a", NUMERICAL, range=(0.0, 1.0)), FeatureSchema("b", NUMERICAL, range=(0.0, 1.0))))


def test_encoding_bounds_and_one_hot():
    s = builtin_schema("loan_default")
    row = np.array([[18, 20000, 300, 1000, 0, 0.0, 0, 1, 0, 0]], dtype=float)
    X = encode_values(s, row)
    assert X.shape == (1, encoded_width(s))
    assert X[0, 0] == 0.0
    row[0, 0] = 70
    assert encode_values(s, row)[0, 0] == 1.0
    home = s.index("Home Ownership")
    start = sum(1 if f.is_numerical else len(f.categories) for f in list(s)[:home])
    assert encode_values(s, row)[0, start:start + 3].tolist() == [0.0, 1.0, 0.0]


def _toy_dataset(rng, n=100, separable=True):
    x = rng.random((n, 2))
    y = (x[:, 0] + x[:, 1] > 1.0).astype(np.int8) if separable else rng.integers(0, 2, n).astype(np.int8)
    return Dataset(TOY, x, y)


def test_separable_toy_is_learned():
    ds = _toy_dataset(np.random.default_rng(0))
    assert evaluate(train(ds, epochs=2000, learning_rate=2.0), ds)["accuracy"] >= 0.95


def test_random_labels_give_chance_accuracy():
    ds = _toy_dataset(np.random.default_rng(1), n=1000, separable=False)
    acc = evaluate(train(ds), ds)["accuracy"]
    assert 0.45 <= acc <= 0.65
    assert acc == pytest.approx(0.545, abs=1e-12)  # pinned regression value


def test_zero_epochs_predicts_one_half():
    ds = _toy_dataset(np.random.default_rng(2))
    m = train(ds, epochs=0)
    assert np.all(predict_proba(m, ds) == 0.5)
    assert evaluate(m, ds)["log_loss"] == pytest.approx(math.log(2), abs=1e-12)


def test_crafted_row_on_decision_boundary():
    m = Model(TOY, np.array([2.0, -2.0]), 0.0)
    ds = Dataset(TOY, np.array([[0.3, 0.3]]), np.array([1], dtype=np.int8))
    assert predict_proba(m, ds)[0] == 0.5


def test_pinned_probability_matches_direct_evaluation():
    m = Model(TOY, np.array([1.25, -0.75]), 0.1)
    ds = Dataset(TOY, np.array([[0.4, 0.9]]))
    z = 1.25 * 0.4 - 0.75 * 0.9 + 0.1
    assert predict_proba(m, ds)[0] == pytest.approx(1.0 / (1.0 + math.exp(-z)), abs=1e-12)


def test_evaluate_on_hand_computed_rows():
    m = Model(TOY, np.array([4.0, 0.0]), -2.0)
    x = np.array([[0.0, 0], [0.25, 0], [0.5, 0], [0.75, 0], [1.0, 0]])
    y = np.array([0, 1, 1, 1, 1], dtype=np.int8)
    res = evaluate(m, Dataset(TOY, x, y))
    p = [1 / (1 + math.exp(-z)) for z in (-2, -1, 0, 1, 2)]
    expected = -sum(math.log(1 - pi) if yi == 0 else math.log(pi) for pi, yi in zip(p, y)) / 5
    assert res["accuracy"] == pytest.approx(0.8)
    assert res["log_loss"] == pytest.approx(expected, abs=1e-12)


def test_perfect_predictions():
    m = Model(TOY, np.array([100.0, 0.0]), -50.0)
    ds = Dataset(TOY, np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([0, 1], dtype=np.int8))
    assert evaluate(m, ds)["accuracy"] == 1.0


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    h = 1e-6
    for _ in range(20):
        n, d = int(rng.integers(5, 30)), int(rng.integers(1, 6))
        X, y = rng.normal(size=(n, d)), rng.integers(0, 2, n).astype(float)
        w, b = rng.normal(size=d), float(rng.normal())
        _, gw, gb = loss_and_grad(w, b, X, y)
        num = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            num.append((loss_and_grad(w + e, b, X, y)[0] - loss_and_grad(w - e, b, X, y)[0]) / (2 * h))
        num.append((loss_and_grad(w, b + h, X, y)[0] - loss_and_grad(w, b - h, X, y)[0]) / (2 * h))
        ana = np.append(gw, gb)
        assert np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12) < 1e-6


def test_training_is_deterministic(loan):
    again = train(loan.train)
    assert again == loan.model


def test_training_requires_two_classes():
    ds = Dataset(TOY, np.zeros((4, 2)), np.zeros(4, dtype=np.int8))
    with pytest.raises(ModelError):
        train(ds)


@settings(max_examples=50, deadline=None)
@given(z=st.floats(-1e4, 1e4))
def test_probability_strictly_inside_unit_interval(z):
    m = Model(TOY, np.array([0.0, 0.0]), z)
    p = predict_proba(m, Dataset(TOY, np.array([[0.5, 0.5]])))[0]
    assert 0.0 < p < 1.0


def test_sigmoid_and_log_loss_edges():
    assert sigmoid(0.0) == 0.5
    assert log_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(math.log(2))


@pytest.mark.parametrize("dataset_id", BUILTIN_IDS)
def test_oracle_model_reproduces_latent_score(dataset_id):
    s = builtin_schema(dataset_id)
    ds = generate(s, 200, 5)
    m = oracle_model(s)
    logits = encode(s, ds) @ m.weights + m.bias
    assert np.allclose(logits, latent_score(s, ds.values), atol=1e-9)
    for name in s.zero_weight_features():
        assert np.all(m.feature_weights(name) == 0.0)


def test_model_file_round_trip(tmp_path, loan):
    path = tmp_path / "m.json"
    save_model(loan.model, path)
    assert load_model(path) == loan.model
