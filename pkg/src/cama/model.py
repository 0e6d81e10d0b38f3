"""Logistic-regression classifier over min-max scaled, one-hot encoded features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .tabular import Dataset, Schema, SchemaError

EPS = 1e-12


class ModelError(ValueError):
    pass


def encoded_width(schema: Schema) -> int:
    return sum(1 if f.is_numerical else len(f.categories) for f in schema)


def feature_slices(schema: Schema) -> dict[str, slice]:
    """Columns of the encoded matrix owned by each feature."""
    out, start = {}, 0
    for f in schema:
        width = 1 if f.is_numerical else len(f.categories)
        out[f.name] = slice(start, start + width)
        start += width
    return out


def encode_values(schema: Schema, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).reshape(-1, len(schema))
    X = np.zeros((values.shape[0], encoded_width(schema)), dtype=np.float64)
    for j, (f, sl) in enumerate(zip(schema, feature_slices(schema).values())):
        col = values[:, j]
        if f.is_numerical:
            lo, hi = f.range
            X[:, sl.start] = (col - lo) / (hi - lo)
        else:
            X[np.arange(len(col)), sl.start + col.astype(np.int64)] = 1.0
    return X


def encode(schema: Schema, dataset: Dataset) -> np.ndarray:
    if dataset.schema != schema:
        raise ModelError(f"dataset schema {dataset.schema.name!r} does not match {schema.name!r}")
    return encode_values(schema, dataset.values)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def log_loss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, EPS, 1.0 - EPS)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def loss_and_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, float]:
    """Mean log-loss and its gradient w.r.t. (w, b), computed from logits for stability."""
    z = X @ w + b
    # log(1 + e^z) - y z, written to avoid overflow
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    r = sigmoid(z) - y
    return loss, X.T @ r / len(y), float(r.mean())


@dataclass(frozen=True, eq=False)
class Model:
    schema: Schema
    weights: np.ndarray
    bias: float
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64, copy=True).ravel()
        if w.shape[0] != encoded_width(self.schema):
            raise ModelError(f"{w.shape[0]} weights for encoded width {encoded_width(self.schema)}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.weights, other.weights)
            and self.bias == other.bias
            and self.metadata == other.metadata
        )

    def feature_weights(self, name: str) -> np.ndarray:
        return self.weights[feature_slices(self.schema)[name]]

    def to_dict(self) -> dict[str, Any]:
        encoder = []
        for f, sl in zip(self.schema, feature_slices(self.schema).values()):
            if f.is_numerical:
                encoder.append({"feature": f.name, "kind": f.kind, "lo": f.range[0], "hi": f.range[1],
                                "columns": [sl.start, sl.stop]})
            else:
                encoder.append({"feature": f.name, "kind": f.kind, "categories": list(f.categories),
                                "columns": [sl.start, sl.stop]})
        return {
            "schema": self.schema.to_dict(),
            "encoder": encoder,
            "weights": [float(x) for x in self.weights],
            "bias": self.bias,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Model":
        schema = Schema.from_dict(d["schema"])
        return cls(schema, np.asarray(d["weights"], dtype=np.float64), d["bias"], d.get("metadata", {}))


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> Model:
    return Model.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def train(train_set: Dataset, epochs: int = 500, learning_rate: float = 0.5, seed: int = 0) -> Model:
    """Full-batch gradient descent from zero weights.

    Zero init and a fixed pass over all rows make the result independent of
    ``seed``; it is kept in the metadata for provenance.
    """
    if train_set.labels is None:
        raise ModelError("training requires labels")
    y = train_set.labels.astype(np.float64)
    if len(np.unique(y)) < 2:
        raise ModelError("training labels contain a single class")
    if epochs < 0:
        raise ModelError("epochs must be >= 0")
    X = encode(train_set.schema, train_set)
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(epochs):
        _, gw, gb = loss_and_grad(w, b, X, y)
        w -= learning_rate * gw
        b -= learning_rate * gb
    final, _, _ = loss_and_grad(w, b, X, y)
    meta = {"epochs": epochs, "learning_rate": learning_rate, "seed": seed, "final_train_log_loss": final,
            "n_train": len(train_set)}
    return Model(train_set.schema, w, b, meta)


def predict_proba(model: Model, dataset: Dataset) -> np.ndarray:
    p = sigmoid(encode(model.schema, dataset) @ model.weights + model.bias)
    return np.clip(p, EPS, 1.0 - EPS)


def evaluate(model: Model, dataset: Dataset) -> dict[str, float]:
    if dataset.labels is None:
        raise ModelError("evaluation requires labels")
    p = predict_proba(model, dataset)
    y = dataset.labels
    return {"accuracy": float(np.mean((p >= 0.5) == (y == 1))), "log_loss": log_loss(y, p)}


def oracle_model(schema: Schema) -> Model:
    """The data-generating labeling rule expressed as a Model.

    The latent score uses ``(x - mid) / (range / 6)``; in min-max units
    ``u = (x - lo) / (hi - lo)`` that equals ``6 u - 3``, so the rule is
    exactly linear in the encoded columns.
    """
    w = np.zeros(encoded_width(schema))
    b = schema.label_bias
    slices = feature_slices(schema)
    for f in schema:
        weight = schema.label_weights.get(f.name)
        if weight is None:
            continue
        sl = slices[f.name]
        if f.is_numerical:
            w[sl.start] = 6.0 * float(weight)
            b -= 3.0 * float(weight)
        else:
            w[sl] = np.asarray(weight, dtype=np.float64)
    return Model(schema, w, b, {"source": "oracle"})


def require_schema(model: Model, dataset: Dataset) -> None:
    if model.schema != dataset.schema:
        raise SchemaError(f"model schema {model.schema.name!r} does not match dataset schema {dataset.schema.name!r}")
