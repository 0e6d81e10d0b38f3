"""Tabular data model, built-in dataset schemas and synthetic generation with drift."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
LABEL_COLUMN = "label"

# Base numerical distribution: normal at the range midpoint, std = range / 6,
# truncated to the range (i.e. at +-3 std).
_TRUNC = 3.0


class SchemaError(ValueError):
    """Dataset content or configuration does not conform to a schema."""


@dataclass(frozen=True)
class FeatureSchema:
    name: str
    kind: str
    range: tuple[float, float] | None = None
    categories: tuple[str, ...] | None = None
    description: str = ""
    integer: bool = False

    def __post_init__(self) -> None:
        if self.kind == NUMERICAL:
            if self.range is None or self.categories is not None:
                raise SchemaError(f"{self.name}: numerical feature needs a range and no categories")
            lo, hi = self.range
            if not lo < hi:
                raise SchemaError(f"{self.name}: range requires lo < hi, got [{lo}, {hi}]")
            object.__setattr__(self, "range", (float(lo), float(hi)))
        elif self.kind == CATEGORICAL:
            if self.categories is None or self.range is not None:
                raise SchemaError(f"{self.name}: categorical feature needs categories and no range")
            cats = tuple(self.categories)
            if len(set(cats)) < 2 or len(set(cats)) != len(cats):
                raise SchemaError(f"{self.name}: needs >= 2 distinct categories, got {list(cats)}")
            object.__setattr__(self, "categories", cats)
        else:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")

    @property
    def is_numerical(self) -> bool:
        return self.kind == NUMERICAL

    @property
    def midpoint(self) -> float:
        lo, hi = self.range
        return 0.5 * (lo + hi)

    @property
    def base_std(self) -> float:
        lo, hi = self.range
        return (hi - lo) / 6.0

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind}
        if self.is_numerical:
            out["range"] = list(self.range)
            if self.integer:
                out["integer"] = True
        else:
            out["categories"] = list(self.categories)
        out["description"] = self.description
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureSchema":
        rng = d.get("range")
        cats = d.get("categories")
        return cls(
            name=d["name"],
            kind=d["kind"],
            range=tuple(rng) if rng is not None else None,
            categories=tuple(cats) if cats is not None else None,
            description=d.get("description", ""),
            integer=bool(d.get("integer", False)),
        )


@dataclass(frozen=True)
class Schema:
    """An ordered feature list plus the latent rule used to label synthetic rows.

    ``label_weights`` maps a numerical feature to the weight of its standardized
    value ``(x - midpoint) / base_std`` and a categorical feature to one additive
    offset per category. Features left out contribute nothing.
    """

    name: str
    features: tuple[FeatureSchema, ...]
    label_weights: Mapping[str, Any] = field(default_factory=dict)
    label_bias: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate feature names: {dupes}")
        if LABEL_COLUMN in names:
            raise SchemaError(f"{LABEL_COLUMN!r} is reserved for the label column")
        for key, w in self.label_weights.items():
            feat = self.feature(key)
            if feat.is_numerical:
                float(w)
            elif len(w) != len(feat.categories):
                raise SchemaError(f"{key}: need one label offset per category")

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def index(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise SchemaError(f"unknown feature {name!r}; schema {self.name!r} has {self.names}")

    def feature(self, name: str) -> FeatureSchema:
        return self.features[self.index(name)]

    def zero_weight_features(self) -> list[str]:
        out = []
        for f in self.features:
            w = self.label_weights.get(f.name)
            if w is None or np.all(np.asarray(w, dtype=float) == 0.0):
                out.append(f.name)
        return out

    def to_dict(self) -> dict[str, Any]:
        weights = {
            k: (float(v) if self.feature(k).is_numerical else [float(x) for x in v])
            for k, v in self.label_weights.items()
        }
        return {
            "name": self.name,
            "features": [f.to_dict() for f in self.features],
            "label_weights": weights,
            "label_bias": self.label_bias,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Schema":
        return cls(
            name=d["name"],
            features=tuple(FeatureSchema.from_dict(f) for f in d["features"]),
            label_weights=dict(d.get("label_weights", {})),
            label_bias=float(d.get("label_bias", 0.0)),
        )


def _num(name, lo, hi, description, integer=False):
    return FeatureSchema(name, NUMERICAL, range=(lo, hi), description=description, integer=integer)


def _cat(name, categories, description):
    return FeatureSchema(name, CATEGORICAL, categories=tuple(categories), description=description)


# Only Age, Income, Credit Score, Loan Amount and Home Ownership are documented
# for the loan dataset; every other name and range below is invented.
_BUILTIN: dict[str, Schema] = {
    "loan_default": Schema(
        name="loan_default",
        features=(
            _num("Age", 18, 70, "Applicant age in years.", integer=True),
            _num("Income", 20_000, 150_000, "Annual applicant income in USD."),
            _num("Credit Score", 300, 850, "Bureau credit score; higher means lower credit risk.", integer=True),
            _num("Loan Amount", 1_000, 50_000, "Requested loan principal in USD."),
            _num("Employment Years", 0, 40, "Years with the current employer.", integer=True),
            _num("Debt-to-Income", 0.0, 0.6, "Monthly debt payments divided by monthly income."),
            _num("Open Accounts", 0, 20, "Number of open credit lines.", integer=True),
            _cat("Home Ownership", ["Rent", "Own", "Mortgage"], "Housing status of the applicant."),
            _cat(
                "Loan Purpose",
                ["Debt Consolidation", "Home Improvement", "Education", "Business"],
                "Stated purpose of the loan.",
            ),
            _cat("Employment Status", ["Employed", "Self-Employed", "Unemployed"], "Current employment status."),
        ),
        label_weights={
            "Age": -0.3,
            "Income": -0.8,
            "Credit Score": -1.2,
            "Loan Amount": 0.6,
            "Employment Years": -0.4,
            "Debt-to-Income": 1.0,
            "Home Ownership": [0.3, -0.3, 0.0],
            "Loan Purpose": [0.2, -0.1, 0.0, 0.4],
            "Employment Status": [-0.3, 0.0, 0.9],
        },
        label_bias=-0.2,
    ),
    "eligibility": Schema(
        name="eligibility",
        features=(
            _num("Household Income", 0, 120_000, "Annual household income in USD."),
            _num("Age", 18, 90, "Applicant age in years.", integer=True),
            _cat("Employment Status", ["Employed", "Unemployed", "Retired", "Student"], "Current employment status."),
            _cat("Education Level", ["High School", "Bachelor", "Master", "Doctorate"], "Highest completed education."),
            _cat("Region", ["Urban", "Suburban", "Rural"], "Residential area type."),
        ),
        label_weights={
            "Household Income": -1.4,
            "Age": 0.5,
            "Employment Status": [-0.6, 0.9, 0.4, 0.2],
            "Education Level": [0.3, 0.0, -0.2, -0.4],
        },
        label_bias=0.0,
    ),
    "chronic": Schema(
        name="chronic",
        features=(
            _num("Age", 18, 90, "Patient age in years.", integer=True),
            _num("BMI", 15, 50, "Body mass index in kg/m^2."),
            _num("Systolic Blood Pressure", 80, 200, "Resting systolic blood pressure in mmHg.", integer=True),
            _num("Cholesterol", 100, 350, "Total serum cholesterol in mg/dL.", integer=True),
            _num("Physical Activity", 0, 20, "Weekly hours of moderate or vigorous exercise."),
            _num("Sleep Hours", 3, 12, "Average nightly sleep duration in hours."),
            _cat("Smoking Status", ["Never", "Former", "Current"], "Tobacco smoking history."),
            _cat("Diet Quality", ["Poor", "Average", "Good"], "Self-reported diet quality."),
            _cat("Income Bracket", ["Low", "Middle", "High"], "Household income bracket."),
            _cat("Sex", ["Female", "Male"], "Sex recorded at intake."),
        ),
        label_weights={
            "Age": 0.9,
            "BMI": 0.8,
            "Systolic Blood Pressure": 0.6,
            "Cholesterol": 0.4,
            "Physical Activity": -0.6,
            "Smoking Status": [-0.4, 0.1, 0.8],
            "Diet Quality": [0.5, 0.0, -0.4],
            "Income Bracket": [0.3, 0.0, -0.2],
            "Sex": [-0.1, 0.1],
        },
        label_bias=-0.3,
    ),
}

BUILTIN_IDS = tuple(_BUILTIN)


def builtin_schema(dataset_id: str) -> Schema:
    try:
        return _BUILTIN[dataset_id]
    except KeyError:
        raise SchemaError(f"unknown dataset id {dataset_id!r}; valid ids: {', '.join(BUILTIN_IDS)}") from None


def load_schema(path: str | Path) -> Schema:
    return Schema.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_schema(schema: Schema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------- drift


@dataclass(frozen=True)
class FeatureDrift:
    feature: str
    shift: float = 0.0
    scale: float = 1.0
    weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise SchemaError(f"{self.feature}: drift scale must be > 0, got {self.scale}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
                raise SchemaError(f"{self.feature}: re-weighting vector must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", tuple(float(x) for x in w))

    def to_dict(self) -> dict[str, Any]:
        if self.weights is not None:
            return {"feature": self.feature, "weights": list(self.weights)}
        return {"feature": self.feature, "shift": self.shift, "scale": self.scale}


@dataclass(frozen=True)
class DriftSpec:
    id: str
    entries: tuple[FeatureDrift, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.feature for e in self.entries]
        if len(set(names)) != len(names):
            raise SchemaError(f"drift spec {self.id!r} lists a feature twice")

    def get(self, feature: str) -> FeatureDrift | None:
        for e in self.entries:
            if e.feature == feature:
                return e
        return None

    def validate(self, schema: Schema) -> None:
        for e in self.entries:
            feat = schema.feature(e.feature)
            if feat.is_numerical and e.weights is not None:
                raise SchemaError(f"{e.feature}: numerical feature takes shift/scale, not weights")
            if not feat.is_numerical:
                if e.weights is None:
                    raise SchemaError(f"{e.feature}: categorical feature needs a weights vector")
                if len(e.weights) != len(feat.categories):
                    raise SchemaError(
                        f"{e.feature}: {len(e.weights)} weights for {len(feat.categories)} categories"
                    )

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DriftSpec":
        entries = []
        for e in d.get("entries", []):
            w = e.get("weights")
            entries.append(
                FeatureDrift(
                    feature=e["feature"],
                    shift=float(e.get("shift", 0.0)),
                    scale=float(e.get("scale", 1.0)),
                    weights=tuple(w) if w is not None else None,
                )
            )
        return cls(id=d["id"], entries=tuple(entries))


def load_drift(path: str | Path) -> DriftSpec:
    return DriftSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_drift(spec: DriftSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")


_DEFAULT_DRIFT = {
    "loan_default": DriftSpec(
        "loan_default-default",
        (FeatureDrift("Income", shift=2.0), FeatureDrift("Home Ownership", weights=(0.1, 0.1, 0.8))),
    ),
    "eligibility": DriftSpec(
        "eligibility-default",
        (
            FeatureDrift("Household Income", shift=-1.5),
            FeatureDrift("Employment Status", weights=(0.1, 0.7, 0.1, 0.1)),
        ),
    ),
    "chronic": DriftSpec(
        "chronic-default",
        (
            FeatureDrift("BMI", shift=2.0),
            FeatureDrift("Physical Activity", shift=-1.0, scale=0.7),
            FeatureDrift("Smoking Status", weights=(0.1, 0.2, 0.7)),
        ),
    ),
}


def default_drift(dataset_id: str) -> DriftSpec:
    """The drift scenario shipped with each built-in dataset (an artifact choice)."""
    builtin_schema(dataset_id)
    return _DEFAULT_DRIFT[dataset_id]


# ------------------------------------------------------------------------- dataset


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows are stored as floats; categorical cells hold the category index."""

    schema: Schema
    values: np.ndarray
    labels: np.ndarray | None = None
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1, len(self.schema))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64, copy=True).ravel()
            if labels.shape[0] != values.shape[0]:
                raise SchemaError(f"{labels.shape[0]} labels for {values.shape[0]} rows")
            if np.any((labels != 0) & (labels != 1)):
                raise SchemaError("labels must be binary 0/1")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", dict(self.provenance))
        validate_values(self.schema, values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.schema != other.schema or not np.array_equal(self.values, other.values):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.schema.index(name)]

    def category_labels(self, name: str) -> list[str]:
        feat = self.schema.feature(name)
        if feat.is_numerical:
            raise SchemaError(f"{name} is numerical")
        return [feat.categories[int(i)] for i in self.column(name)]

    def take(self, indices: Sequence[int], **provenance: Any) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        prov = {**self.provenance, **provenance}
        return Dataset(self.schema, self.values[idx], labels, prov)


def validate_values(schema: Schema, values: np.ndarray, row_offset: int = 0) -> None:
    for j, feat in enumerate(schema):
        col = values[:, j]
        if feat.is_numerical:
            lo, hi = feat.range
            bad = np.flatnonzero(~((col >= lo) & (col <= hi)))
        else:
            k = len(feat.categories)
            bad = np.flatnonzero(~((col >= 0) & (col < k) & (col == np.floor(col))))
        if bad.size:
            i = int(bad[0])
            raise SchemaError(
                f"row {i + row_offset}: feature {feat.name!r} value {col[i]!r} violates schema"
            )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def latent_score(schema: Schema, values: np.ndarray) -> np.ndarray:
    score = np.full(values.shape[0], schema.label_bias, dtype=np.float64)
    for j, feat in enumerate(schema):
        w = schema.label_weights.get(feat.name)
        if w is None:
            continue
        col = values[:, j]
        if feat.is_numerical:
            score += float(w) * (col - feat.midpoint) / feat.base_std
        else:
            score += np.asarray(w, dtype=np.float64)[col.astype(np.int64)]
    return score


def _base_probs(k: int) -> np.ndarray:
    # mild linear skew toward the first category
    p = 1.0 + 0.25 * (k - 1 - np.arange(k)) / (k - 1)
    return p / p.sum()


def category_probs(feat: FeatureSchema, drift: FeatureDrift | None = None) -> np.ndarray:
    p = _base_probs(len(feat.categories))
    if drift is not None and drift.weights is not None:
        p = p * np.asarray(drift.weights)
        if p.sum() <= 0:
            raise SchemaError(f"{feat.name}: re-weighting leaves no probability mass")
        p = p / p.sum()
    return p


def generate(schema: Schema, n: int, seed: int, drift: DriftSpec | None = None) -> Dataset:
    """Draw ``n`` labeled rows.

    One uniform matrix is drawn per seed and pushed through each feature's
    inverse CDF, so a drifted and an undrifted call with the same seed share
    their underlying randomness.
    """
    if n < 1:
        raise SchemaError(f"n must be >= 1, got {n}")
    if drift is not None:
        drift.validate(schema)
    rng = np.random.default_rng(seed)
    u = rng.random((n, len(schema)))
    u_label = rng.random(n)

    lo_cdf, hi_cdf = ndtr(-_TRUNC), ndtr(_TRUNC)
    values = np.empty((n, len(schema)), dtype=np.float64)
    for j, feat in enumerate(schema):
        d = drift.get(feat.name) if drift is not None else None
        if feat.is_numerical:
            z = ndtri(lo_cdf + u[:, j] * (hi_cdf - lo_cdf))
            x = feat.midpoint + feat.base_std * z
            if d is not None:
                x = feat.midpoint + d.scale * (x - feat.midpoint) + d.shift * feat.base_std
            lo, hi = feat.range
            if feat.integer:
                x = np.round(x)
            values[:, j] = np.clip(x, lo, hi)
        else:
            cdf = np.cumsum(category_probs(feat, d))
            values[:, j] = np.minimum(np.searchsorted(cdf, u[:, j], side="right"), len(cdf) - 1)

    labels = (u_label < _sigmoid(latent_score(schema, values))).astype(np.int64)
    prov = {"generator": "cama.tabular.generate", "schema": schema.name, "n": n, "seed": seed,
            "drift": drift.id if drift is not None else None}
    return Dataset(schema, values, labels, prov)


# ---------------------------------------------------------------------- summaries


@dataclass(frozen=True)
class FeatureStats:
    kind: str
    mean: float | None = None
    std: float | None = None
    min: float | None = None
    max: float | None = None
    q1: float | None = None
    q2: float | None = None
    q3: float | None = None
    frequencies: Mapping[str, float] | None = None

    def to_dict(self) -> dict[str, Any]:
        if self.kind == NUMERICAL:
            return {k: getattr(self, k) for k in ("mean", "std", "min", "max", "q1", "q2", "q3")}
        return {"frequencies": dict(self.frequencies)}


def summarize(dataset: Dataset, feature_name: str) -> FeatureStats:
    feat = dataset.schema.feature(feature_name)
    if len(dataset) == 0:
        raise SchemaError("cannot summarize an empty dataset")
    col = dataset.column(feature_name)
    if feat.is_numerical:
        # numpy's default "linear" method interpolates between order statistics
        q1, q2, q3 = np.quantile(col, [0.25, 0.5, 0.75])
        return FeatureStats(
            kind=NUMERICAL,
            mean=float(col.mean()),
            std=float(col.std()),
            min=float(col.min()),
            max=float(col.max()),
            q1=float(q1),
            q2=float(q2),
            q3=float(q3),
        )
    counts = np.bincount(col.astype(np.int64), minlength=len(feat.categories))
    freqs = {c: float(k) / len(col) for c, k in zip(feat.categories, counts)}
    return FeatureStats(kind=CATEGORICAL, frequencies=freqs)


def category_counts(dataset: Dataset, feature_name: str) -> np.ndarray:
    feat = dataset.schema.feature(feature_name)
    return np.bincount(dataset.column(feature_name).astype(np.int64), minlength=len(feat.categories))


def monitoring_sample(dataset: Dataset, m: int = 100, seed: int = 0) -> Dataset:
    """Uniform subsample without replacement; rows keep their original order."""
    n = len(dataset)
    if m > n:
        raise SchemaError(f"monitoring sample of {m} rows requested from {n} rows")
    if m < 0:
        raise SchemaError(f"sample size must be >= 0, got {m}")
    idx = np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))
    return dataset.take(idx, sample_seed=seed, sample_size=m)


def sample_indices(n: int, m: int, seed: int) -> np.ndarray:
    return np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))


# ---------------------------------------------------------------------------- csv


def _fmt(feat: FeatureSchema, v: float) -> str:
    if feat.is_numerical:
        return repr(float(v))
    return feat.categories[int(v)]


def to_csv_text(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = dataset.schema.names + ([LABEL_COLUMN] if dataset.labels is not None else [])
    w.writerow(header)
    for i in range(len(dataset)):
        row = [_fmt(f, v) for f, v in zip(dataset.schema, dataset.values[i])]
        if dataset.labels is not None:
            row.append(str(int(dataset.labels[i])))
        w.writerow(row)
    return buf.getvalue()


def save_csv(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(to_csv_text(dataset).encode("utf-8"))


def load_csv(path: str | Path, schema: Schema) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    return from_csv_text(text, schema, provenance={"path": str(path)})


def from_csv_text(text: str, schema: Schema, provenance: Mapping[str, Any] | None = None) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty CSV: no header row") from None
    missing = [n for n in schema.names if n not in header]
    if missing:
        raise SchemaError(f"CSV is missing feature columns: {missing}")
    cols = [header.index(n) for n in schema.names]
    label_col = header.index(LABEL_COLUMN) if LABEL_COLUMN in header else None

    rows, labels = [], []
    for i, rec in enumerate(reader):
        if not rec:
            continue
        row = []
        for feat, c in zip(schema, cols):
            cell = rec[c]
            if feat.is_numerical:
                try:
                    v = float(cell)
                except ValueError:
                    raise SchemaError(f"row {i}: feature {feat.name!r} value {cell!r} is not a number") from None
                lo, hi = feat.range
                if not lo <= v <= hi:
                    raise SchemaError(
                        f"row {i}: feature {feat.name!r} value {cell!r} outside range [{lo:g}, {hi:g}]"
                    )
            else:
                if cell not in feat.categories:
                    raise SchemaError(
                        f"row {i}: feature {feat.name!r} value {cell!r} not in {list(feat.categories)}"
                    )
                v = float(feat.categories.index(cell))
            row.append(v)
        rows.append(row)
        if label_col is not None:
            if rec[label_col] not in ("0", "1"):
                raise SchemaError(f"row {i}: label value {rec[label_col]!r} is not 0 or 1")
            labels.append(int(rec[label_col]))
    values = np.asarray(rows, dtype=np.float64).reshape(-1, len(schema))
    return Dataset(schema, values, np.asarray(labels) if label_col is not None else None, provenance or {})
