import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cama.tabular import (
    BUILTIN_IDS,
    CATEGORICAL,
    NUMERICAL,
    Dataset,
    DriftSpec,
    FeatureDrift,
    FeatureSchema,
    Schema,
    SchemaError,
    builtin_schema,
    default_drift,
    from_csv_text,
    generate,
    load_csv,
    monitoring_sample,
    sample_indices,
    save_csv,
    summarize,
    to_csv_text,
)
from cama.tools import ks_two_sample


def kinds(schema):
    return [f.kind for f in schema]


def test_builtin_schemas_have_documented_shape():
    loan = builtin_schema("loan_default")
    assert loan.feature("Credit Score").range == (300, 850)
    assert kinds(loan).count(NUMERICAL) + kinds(loan).count(CATEGORICAL) == 10
    elig = builtin_schema("eligibility")
    assert kinds(elig).count(NUMERICAL) == 2 and kinds(elig).count(CATEGORICAL) == 3
    chronic = builtin_schema("chronic")
    assert kinds(chronic).count(NUMERICAL) == 6 and kinds(chronic).count(CATEGORICAL) == 4


@pytest.mark.parametrize("dataset_id", BUILTIN_IDS)
def test_each_schema_has_exactly_one_zero_weight_feature(dataset_id):
    assert len(builtin_schema(dataset_id).zero_weight_features()) == 1


def test_unknown_schema_names_valid_ids():
    with pytest.raises(SchemaError, match="loan_default"):
        builtin_schema("nope")


def test_schema_round_trip():
    for dataset_id in BUILTIN_IDS:
        s = builtin_schema(dataset_id)
        assert Schema.from_dict(s.to_dict()) == s


def test_feature_schema_rejects_bad_range():
    with pytest.raises(SchemaError):
        FeatureSchema("x", NUMERICAL, range=(3.0, 1.0))


def test_generate_respects_ranges_and_is_deterministic():
    s = builtin_schema("loan_default")
    a = generate(s, 1000, seed=7)
    assert len(a) == 1000
    age = a.column("Age")
    assert age.min() >= 18 and age.max() <= 70
    b = generate(s, 1000, seed=7)
    assert a == b
    assert to_csv_text(a) == to_csv_text(b)


def test_income_shift_fixture():
    # Regression fixture from the generator (seed 7, n=1000). The shift in
    # units of the no-drift sample std must lie in [1, 3].
    s = builtin_schema("loan_default")
    base = generate(s, 1000, seed=7).column("Income")
    drifted = generate(s, 1000, seed=7, drift=DriftSpec("d", (FeatureDrift("Income", shift=2.0),))).column("Income")
    assert base.mean() == pytest.approx(85167.29178220317, rel=1e-12)
    assert drifted.mean() == pytest.approx(126776.25919024779, rel=1e-12)
    z = (drifted.mean() - base.mean()) / base.std()
    assert 1.0 <= z <= 3.0


def test_drift_spec_validation():
    s = builtin_schema("loan_default")
    with pytest.raises(SchemaError):
        DriftSpec("d", (FeatureDrift("Nope", shift=1.0),)).validate(s)
    with pytest.raises(SchemaError):
        DriftSpec("d", (FeatureDrift("Home Ownership", weights=(0.5, 0.5)),)).validate(s)
    with pytest.raises(ValueError):
        FeatureDrift("Income", scale=0.0)
    for dataset_id in BUILTIN_IDS:
        default_drift(dataset_id).validate(builtin_schema(dataset_id))


def test_drift_spec_round_trip():
    spec = default_drift("chronic")
    assert DriftSpec.from_dict(spec.to_dict()) == spec


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-4, 4), scale=st.floats(0.2, 3.0))
def test_range_safety_under_any_drift(seed, shift, scale):
    s = builtin_schema("chronic")
    spec = DriftSpec("d", tuple(FeatureDrift(f.name, shift=shift, scale=scale) for f in s if f.is_numerical))
    ds = generate(s, 200, seed, spec)
    for f in s:
        col = ds.column(f.name)
        if f.is_numerical:
            assert col.min() >= f.range[0] and col.max() <= f.range[1]
        else:
            assert set(np.unique(col)) <= set(range(len(f.categories)))


def test_drift_monotone_in_shift_on_pinned_seeds():
    s = builtin_schema("loan_default")
    for seed in range(10):
        ref = generate(s, 100, seed + 1000).column("Income")
        stats = []
        for delta in (0, 1, 2, 3):
            spec = DriftSpec("d", (FeatureDrift("Income", shift=float(delta)),))
            stats.append(ks_two_sample(ref, generate(s, 100, seed, spec).column("Income")).statistic)
        assert stats == sorted(stats), (seed, stats)


def _quantile_oracle(values, q):
    xs = sorted(values)
    pos = q * (len(xs) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])


def _numeric_dataset(values):
    schema = Schema("t", (FeatureSchema("x", NUMERICAL, range=(-1e6, 1e6)),))
    return Dataset(schema, np.asarray(values, dtype=float).reshape(-1, 1))


def test_summarize_constant_and_even_median():
    st_ = summarize(_numeric_dataset([5, 5, 5, 5]), "x")
    assert (st_.mean, st_.std, st_.q1, st_.q2, st_.q3) == (5, 0, 5, 5, 5)
    assert summarize(_numeric_dataset(range(1, 9)), "x").q2 == 4.5


def test_summarize_categorical_frequencies():
    schema = Schema("t", (FeatureSchema("c", CATEGORICAL, categories=("A", "B")),))
    ds = Dataset(schema, np.array([[0], [0], [1], [1]], dtype=float))
    assert summarize(ds, "c").frequencies == {"A": 0.5, "B": 0.5}


def test_quantile_oracle_on_random_columns():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        values = rng.normal(size=int(rng.integers(1, 30))) * 100
        st_ = summarize(_numeric_dataset(values), "x")
        for q, got in ((0.25, st_.q1), (0.5, st_.q2), (0.75, st_.q3)):
            assert abs(got - _quantile_oracle(values, q)) <= 1e-12 * max(1.0, abs(got))
        assert abs(st_.mean - sum(values) / len(values)) <= 1e-9


def test_monitoring_sample_sizes_and_pinned_indices():
    s = builtin_schema("loan_default")
    ds = generate(s, 1000, 7)
    assert len(monitoring_sample(ds, 100, seed=1)) == 100
    i0, i1 = sample_indices(1000, 100, 0), sample_indices(1000, 100, 1)
    assert i0[:10].tolist() == [2, 5, 7, 15, 20, 26, 31, 37, 48, 68] and int(i0.sum()) == 51076
    assert i1[:10].tolist() == [18, 25, 31, 38, 53, 58, 61, 78, 87, 110] and int(i1.sum()) == 50672
    assert set(i0.tolist()) != set(i1.tolist())


def test_monitoring_sample_of_full_set_keeps_every_row():
    ds = generate(builtin_schema("eligibility"), 100, 3)
    for seed in (0, 1, 99):
        assert monitoring_sample(ds, 100, seed).values.tobytes() == ds.values.tobytes()


def test_csv_round_trip(tmp_path):
    ds = generate(builtin_schema("chronic"), 50, 2, default_drift("chronic"))
    path = tmp_path / "x.csv"
    save_csv(ds, path)
    back = load_csv(path, ds.schema)
    assert np.array_equal(back.values, ds.values) and np.array_equal(back.labels, ds.labels)


def test_csv_range_violation_is_reported():
    s = builtin_schema("loan_default")
    text = to_csv_text(generate(s, 3, 1))
    header, first, *rest = text.splitlines()
    cells = first.split(",")
    cells[header.split(",").index("Age")] = "17"
    with pytest.raises(SchemaError, match="Age"):
        from_csv_text("\n".join([header, ",".join(cells), *rest]) + "\n", s)


def test_csv_missing_columns_are_listed():
    s = builtin_schema("loan_default")
    lines = to_csv_text(generate(s, 3, 1)).splitlines()
    header = lines[0].split(",")
    drop = [header.index("Age"), header.index("Loan Purpose")]
    cut = [",".join(c for j, c in enumerate(line.split(",")) if j not in drop) for line in lines]
    with pytest.raises(SchemaError) as err:
        from_csv_text("\n".join(cut) + "\n", s)
    assert "Age" in str(err.value) and "Loan Purpose" in str(err.value)


def test_dataset_is_read_only():
    ds = generate(builtin_schema("eligibility"), 10, 0)
    with pytest.raises(ValueError):
        ds.values[0, 0] = 1.0
