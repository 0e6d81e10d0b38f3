"""Monitoring tools: per-feature drift tests and permutation feature attribution."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from scipy.special import gammaincc

from .model import EPS, Model, encode, feature_slices, log_loss, sigmoid
from .tabular import Dataset, SchemaError, category_counts


class ToolError(ValueError):
    pass


@dataclass(frozen=True)
class KSResult:
    statistic: float
    p_value: float


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    p_value: float
    df: int
    excluded: tuple[int, ...] = ()

    @property
    def warning(self) -> bool:
        return bool(self.excluded)


def kolmogorov_q(lam: float) -> float:
    """Asymptotic survival function Q(lam) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lam^2)."""
    if lam < 0.2:
        # the series does not converge usefully here and Q is 1 to double precision
        return 1.0
    total, sign = 0.0, 1.0
    a2 = -2.0 * lam * lam
    for k in range(1, 101):
        term = sign * 2.0 * math.exp(a2 * k * k)
        total += term
        if abs(term) <= 1e-16 * total or abs(term) <= 1e-300:
            return min(max(total, 0.0), 1.0)
        sign = -sign
    return 1.0


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    pooled = np.concatenate([a, b])
    # right-continuous ECDFs evaluated at every pooled point
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_two_sample(a, b) -> KSResult:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ToolError("KS test needs two nonempty samples")
    d = ks_statistic(a, b)
    ne = a.size * b.size / (a.size + b.size)
    sq = math.sqrt(ne)
    lam = (sq + 0.12 + 0.11 / sq) * d
    return KSResult(d, kolmogorov_q(lam))


def chi_square_drift(ref_counts, test_counts) -> ChiSquareResult:
    """Goodness of fit of test counts against reference proportions.

    Categories whose expected count is zero are excluded and reported in
    ``excluded``; degrees of freedom shrink accordingly.
    """
    ref = np.asarray(ref_counts, dtype=np.float64).ravel()
    obs = np.asarray(test_counts, dtype=np.float64).ravel()
    if ref.shape != obs.shape:
        raise ToolError(f"category sets differ: {ref.size} reference vs {obs.size} test categories")
    if ref.sum() <= 0:
        raise ToolError("reference counts total zero")
    if obs.sum() <= 0:
        raise ToolError("test counts total zero")
    expected = ref * obs.sum() / ref.sum()
    keep = expected > 0
    excluded = tuple(int(i) for i in np.flatnonzero(~keep))
    stat = float(np.sum((obs[keep] - expected[keep]) ** 2 / expected[keep]))
    df = int(keep.sum()) - 1
    if df <= 0:
        return ChiSquareResult(stat, 1.0, max(df, 0), excluded)
    p = float(gammaincc(df / 2.0, stat / 2.0))
    return ChiSquareResult(stat, min(max(p, 0.0), 1.0), df, excluded)


# ------------------------------------------------------------------------ reports


@dataclass(frozen=True)
class FeatureDriftResult:
    feature: str
    test: str
    statistic: float
    p_value: float
    drifted: bool
    warning: bool = False

    def line(self) -> str:
        flag = "yes" if self.drifted else "no"
        return (f"drift[{self.feature}]: test={self.test} statistic={self.statistic:.4f} "
                f"p_value={self.p_value:.4g} drifted={flag}")

    def to_dict(self) -> dict[str, Any]:
        return {"feature": self.feature, "test": self.test, "statistic": self.statistic,
                "p_value": self.p_value, "drifted": self.drifted, "warning": self.warning}


@dataclass(frozen=True)
class DriftReport:
    features: tuple[FeatureDriftResult, ...]
    n_ref: int
    n_test: int
    alpha: float

    def __len__(self) -> int:
        return len(self.features)

    def get(self, name: str) -> FeatureDriftResult:
        for f in self.features:
            if f.feature == name:
                return f
        raise KeyError(name)

    @property
    def drifted(self) -> list[str]:
        return [f.feature for f in self.features if f.drifted]

    def to_dict(self) -> dict[str, Any]:
        return {"n_ref": self.n_ref, "n_test": self.n_test, "alpha": self.alpha,
                "features": [f.to_dict() for f in self.features]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DriftReport":
        return cls(tuple(FeatureDriftResult(**f) for f in d["features"]), d["n_ref"], d["n_test"], d["alpha"])


def drift_report(reference: Dataset, test: Dataset, alpha: float = 0.05) -> DriftReport:
    if reference.schema != test.schema:
        raise SchemaError(f"schema mismatch: {reference.schema.name!r} vs {test.schema.name!r}")
    results = []
    for feat in reference.schema:
        if feat.is_numerical:
            r = ks_two_sample(reference.column(feat.name), test.column(feat.name))
            results.append(FeatureDriftResult(feat.name, "ks", r.statistic, r.p_value, r.p_value < alpha))
        else:
            c = chi_square_drift(category_counts(reference, feat.name), category_counts(test, feat.name))
            results.append(FeatureDriftResult(feat.name, "chi_square", c.statistic, c.p_value,
                                              c.p_value < alpha, c.warning))
    return DriftReport(tuple(results), len(reference), len(test), alpha)


@dataclass(frozen=True)
class FeatureAttribution:
    feature: str
    importance: float
    rank: int

    def line(self) -> str:
        return f"attribution[{self.feature}]: importance={self.importance:.4g} rank={self.rank}"

    def to_dict(self) -> dict[str, Any]:
        return {"feature": self.feature, "importance": self.importance, "rank": self.rank}


@dataclass(frozen=True)
class AttributionReport:
    features: tuple[FeatureAttribution, ...]
    n_repeats: int
    seed: int

    def __len__(self) -> int:
        return len(self.features)

    def get(self, name: str) -> FeatureAttribution:
        for f in self.features:
            if f.feature == name:
                return f
        raise KeyError(name)

    def importances(self) -> np.ndarray:
        return np.array([f.importance for f in self.features])

    def to_dict(self) -> dict[str, Any]:
        return {"n_repeats": self.n_repeats, "seed": self.seed, "features": [f.to_dict() for f in self.features]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AttributionReport":
        return cls(tuple(FeatureAttribution(**f) for f in d["features"]), d["n_repeats"], d["seed"])


def _rows_log_loss(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(sigmoid(X @ model.weights + model.bias), EPS, 1.0 - EPS)
    return log_loss(y, p)


def permutation_importance(model: Model, dataset: Dataset, n_repeats: int = 5, seed: int = 0) -> AttributionReport:
    """Mean increase in log-loss when one feature's encoded block is row-permuted."""
    if dataset.labels is None:
        raise ToolError("permutation importance requires labels")
    if n_repeats < 1:
        raise ToolError("n_repeats must be >= 1")
    if model.schema != dataset.schema:
        raise SchemaError(f"model schema {model.schema.name!r} does not match dataset schema")
    X = encode(model.schema, dataset)
    y = dataset.labels.astype(np.float64)
    base = _rows_log_loss(model, X, y)
    rng = np.random.default_rng(seed)
    slices = list(feature_slices(model.schema).values())
    deltas = np.zeros((n_repeats, len(slices)))
    for r in range(n_repeats):
        for j, sl in enumerate(slices):
            perm = rng.permutation(len(y))
            Xp = X.copy()
            Xp[:, sl] = X[perm, sl]
            deltas[r, j] = _rows_log_loss(model, Xp, y) - base
    importance = np.maximum(deltas.mean(axis=0), 0.0)
    order = np.argsort(-importance, kind="stable")
    ranks = np.empty(len(order), dtype=np.int64)
    ranks[order] = np.arange(1, len(order) + 1)
    feats = tuple(
        FeatureAttribution(f.name, float(importance[j]), int(ranks[j])) for j, f in enumerate(model.schema)
    )
    return AttributionReport(feats, n_repeats, seed)
