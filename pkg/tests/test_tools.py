import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from cama.model import oracle_model
from cama.tabular import BUILTIN_IDS, builtin_schema, generate, monitoring_sample
from cama.tools import (
    AttributionReport,
    DriftReport,
    ToolError,
    chi_square_drift,
    drift_report,
    kolmogorov_q,
    ks_statistic,
    ks_two_sample,
    permutation_importance,
)


def brute_force_ks(a, b):
    """Double loop over pooled points with right-continuous ECDFs."""
    best = 0.0
    for t in list(a) + list(b):
        fa = sum(1 for x in a if x <= t) / len(a)
        fb = sum(1 for x in b if x <= t) / len(b)
        best = max(best, abs(fa - fb))
    return best


def test_ks_worked_cases():
    assert ks_two_sample([1, 2, 3], [1, 2, 3]).statistic == 0.0
    assert ks_two_sample([1, 2, 3], [1, 2, 3]).p_value == 1.0
    assert ks_two_sample([0, 0, 0, 0], [1, 1, 1, 1]).statistic == 1.0
    assert ks_two_sample([1, 2, 3, 4], [2, 3, 4, 5]).statistic == 0.25


def test_ks_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.integers(0, 8, int(rng.integers(1, 51))).astype(float)
        b = (rng.integers(0, 8, int(rng.integers(1, 51))) + rng.integers(0, 2)).astype(float)
        assert abs(ks_statistic(a, b) - brute_force_ks(a, b)) <= 1e-12


def test_ks_p_value_matches_kolmogorov_distribution():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n, m = int(rng.integers(5, 120)), int(rng.integers(5, 120))
        a, b = rng.normal(size=n), rng.normal(loc=rng.uniform(0, 1), size=m)
        res = ks_two_sample(a, b)
        ne = n * m / (n + m)
        lam = (math.sqrt(ne) + 0.12 + 0.11 / math.sqrt(ne)) * res.statistic
        assert res.p_value == pytest.approx(min(1.0, scipy.stats.kstwobign.sf(lam)), abs=1e-10)


def test_kolmogorov_q_limits():
    assert kolmogorov_q(0.0) == 1.0
    assert kolmogorov_q(10.0) < 1e-80


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=30), st.lists(st.integers(-5, 5), min_size=1, max_size=30))
def test_ks_is_symmetric(a, b):
    assert ks_two_sample(a, b).statistic == ks_two_sample(b, a).statistic
    assert 0.0 <= ks_two_sample(a, b).p_value <= 1.0


def direct_chi_square(ref, test):
    ref, test = np.asarray(ref, float), np.asarray(test, float)
    expected = ref / ref.sum() * test.sum()
    keep = expected > 0
    stat = float(((test[keep] - expected[keep]) ** 2 / expected[keep]).sum())
    df = int(keep.sum()) - 1
    return stat, df


def test_chi_square_worked_cases():
    assert chi_square_drift([50, 50], [30, 70]).statistic == 16.0
    same = chi_square_drift([10, 10], [10, 10])
    assert same.statistic == 0.0 and same.p_value == 1.0


def test_chi_square_excluded_category_warns():
    res = chi_square_drift([1, 0], [3, 2])
    assert res.warning and res.excluded == (1,) and res.df == 0


def test_chi_square_matches_direct_formula():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        ref = rng.integers(1, 40, k)
        test = rng.integers(0, 40, k)
        if test.sum() == 0:
            test[0] = 1
        res = chi_square_drift(ref, test)
        stat, df = direct_chi_square(ref, test)
        assert abs(res.statistic - stat) <= 1e-12 * max(1.0, stat)
        assert res.df == df
        assert res.p_value == pytest.approx(scipy.stats.chi2.sf(stat, df), rel=1e-9, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=2, max_size=6), st.integers(1, 50))
def test_chi_square_zero_for_equal_proportions(ref, scale):
    assert chi_square_drift(ref, [c * scale for c in ref]).statistic == pytest.approx(0.0, abs=1e-9)


def test_chi_square_rejects_bad_input():
    with pytest.raises(ToolError):
        chi_square_drift([1, 2], [1, 2, 3])
    with pytest.raises(ToolError):
        chi_square_drift([0, 0], [1, 1])


def test_drift_report_identical_samples():
    ds = monitoring_sample(generate(builtin_schema("loan_default"), 1000, 7), 100, 0)
    rep = drift_report(ds, ds)
    assert len(rep) == 10 and rep.drifted == []
    assert all(f.statistic == 0.0 for f in rep.features)


def test_pinned_loan_default_drift_statistics(loan):
    ref = monitoring_sample(loan.train, 100, 0)
    rep = drift_report(ref, monitoring_sample(loan.test, 100, 0))
    pinned = {
        "Age": 0.14, "Income": 0.74, "Credit Score": 0.13, "Loan Amount": 0.09, "Employment Years": 0.09,
        "Debt-to-Income": 0.11, "Open Accounts": 0.11, "Home Ownership": 152.30699004564707,
        "Loan Purpose": 0.5076692423019252, "Employment Status": 7.250123348500632,
    }
    for name, value in pinned.items():
        assert rep.get(name).statistic == pytest.approx(value, abs=1e-12)
    ks = [f for f in rep.features if f.test == "ks"]
    assert max(ks, key=lambda f: f.statistic).feature == "Income"
    assert rep.get("Income").p_value < 0.01
    assert rep.drifted == ["Income", "Home Ownership", "Employment Status"]
    assert DriftReport.from_dict(rep.to_dict()) == rep


def test_drift_line_format(loan):
    ref = monitoring_sample(loan.train, 100, 0)
    line = drift_report(ref, monitoring_sample(loan.test, 100, 0)).get("Income").line()
    assert line == "drift[Income]: test=ks statistic=0.7400 p_value=3.967e-25 drifted=yes"


@pytest.mark.parametrize("dataset_id", BUILTIN_IDS)
@pytest.mark.parametrize("n_repeats", [1, 5])
def test_zero_weight_feature_has_null_importance(dataset_id, n_repeats):
    s = builtin_schema(dataset_id)
    ds = generate(s, 300, 4)
    rep = permutation_importance(oracle_model(s), ds, n_repeats=n_repeats, seed=0)
    for name in s.zero_weight_features():
        assert rep.get(name).importance <= 1e-9


def test_pinned_importances(loan):
    rep = permutation_importance(loan.model, monitoring_sample(loan.test, 100, 0), 5, 0)
    pinned = {
        "Age": (0.00481783061362705, 6), "Income": (0.02075372255557444, 4),
        "Credit Score": (0.08981959229996443, 1), "Loan Amount": (0.00420602313318913, 7),
        "Employment Years": (0.001522445292290986, 8), "Debt-to-Income": (0.03608381666795035, 2),
        "Open Accounts": (0.0, 9), "Home Ownership": (0.0, 10),
        "Loan Purpose": (0.011183250042947946, 5), "Employment Status": (0.023785142003916515, 3),
    }
    for name, (imp, rank) in pinned.items():
        assert rep.get(name).importance == pytest.approx(imp, abs=1e-12)
        assert rep.get(name).rank == rank
    assert sorted(f.rank for f in rep.features) == list(range(1, 11))
    assert AttributionReport.from_dict(rep.to_dict()) == rep


def test_importance_needs_labels(loan):
    unlabeled = type(loan.test)(loan.test.schema, loan.test.values)
    with pytest.raises(ToolError):
        permutation_importance(loan.model, unlabeled)
