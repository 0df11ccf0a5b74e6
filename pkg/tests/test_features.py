import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cyclelife.dataset import CycleCurve, CycleLifeLabel, Dataset, label_dataset
from cyclelife.errors import (
    ConfigError,
    ConstantColumnError,
    CoverageError,
    DataError,
    FeatureDomainError,
    MissingCycleError,
)
from cyclelife.features import (
    FeatureMatrix,
    FeatureSpec,
    VoltageGrid,
    assemble_feature_matrix,
    delta_q,
    delta_q_matrix,
    interp_q_on_grid,
    pearson_correlation,
    read_feature_matrix,
    scalar_feature,
    standardize,
    transform_feature,
    write_delta_q,
    write_feature_matrix,
)

from conftest import make_cell


def test_grid_defaults():
    v = VoltageGrid().voltages
    assert v.size == 1000 and v[0] == 3.5 and v[-1] == 2.0
    assert np.all(np.diff(v) < 0)


@pytest.mark.parametrize("kw", [dict(v_high=2.0, v_low=3.0), dict(n_points=1)])
def test_grid_invalid(kw):
    with pytest.raises(ConfigError):
        VoltageGrid(**kw)


def test_interp_at_knots():
    grid = VoltageGrid(3.0, 2.0, 11)
    q = np.linspace(0, 1, 11) ** 2
    out = interp_q_on_grid(CycleCurve(1, grid.voltages, q), grid)
    assert np.array_equal(out, q)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(2.05, 2.5), st.floats(3.0, 3.4), st.integers(2, 300))
def test_interp_affine_exact(a, b, lo, hi, n):
    v = np.sort(np.random.default_rng(n).uniform(1.9, 3.6, 40))[::-1]
    v = np.concatenate([[3.6], v, [1.9]])
    grid = VoltageGrid(hi, lo, n)
    out = interp_q_on_grid(CycleCurve(1, v, a + b * v), grid)
    assert np.max(np.abs(out - (a + b * grid.voltages))) <= 1e-12


def test_interp_clamps_within_tolerance():
    v = np.linspace(3.4995, 2.0, 20)
    out = interp_q_on_grid(CycleCurve(1, v, 3.6 - v), VoltageGrid(3.5, 2.0, 5))
    assert out[0] == pytest.approx(3.6 - 3.4995)


def test_interp_coverage_error():
    v = np.linspace(3.5, 2.05, 20)
    with pytest.raises(CoverageError, match="cell c7 cycle 3"):
        interp_q_on_grid(CycleCurve(3, v, 3.6 - v), VoltageGrid(3.5, 2.0, 10), "c7")


def test_delta_q_self_difference():
    c = make_cell()
    cell = make_cell(curves={10: c.cycles[10], 100: CycleCurve(100, c.cycles[10].voltage,
                                                               c.cycles[10].discharge_capacity)})
    assert np.all(delta_q(cell, VoltageGrid(3.5, 2.0, 20)).values == 0)


def test_delta_q_hand_example():
    v = np.array([1.0, 0.5, 0.0])
    cell = make_cell(curves={100: CycleCurve(100, v, 1 - 0.5 * v), 10: CycleCurve(10, v, 1 - 0.4 * v)})
    grid = VoltageGrid(1.0, 0.0, 3)
    dq = delta_q(cell, grid)
    assert np.allclose(dq.values, [-0.1, -0.05, 0.0], atol=1e-15)
    assert dq.cycle_a == 100 and dq.cycle_b == 10


def test_delta_q_antisymmetric(small_synth):
    ds, _ = small_synth
    grid = VoltageGrid()
    for cell in list(ds)[:5]:
        a = delta_q(cell, grid, 100, 10).values
        b = delta_q(cell, grid, 10, 100).values
        assert np.array_equal(a, -b)


def test_delta_q_missing_cycle():
    c = make_cell()
    cell = make_cell("lonely", curves={10: c.cycles[10]})
    with pytest.raises(MissingCycleError, match="lonely.*100"):
        delta_q(cell, VoltageGrid())


def test_scalar_features():
    assert scalar_feature(np.zeros(5), "variance") == 0.0
    assert scalar_feature([1, 2, 3], "mean") == 2.0
    assert scalar_feature([1, 2, 3], "variance") == pytest.approx(2 / 3, abs=1e-15)
    assert scalar_feature([-0.1, -0.05, 0.0], "minimum") == -0.1


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.integers(2, 50), elements=st.floats(-1, 1)), st.floats(-10, 10))
def test_variance_translation_invariant(x, c):
    assert abs(scalar_feature(x + c, "variance") - scalar_feature(x, "variance")) <= 1e-12


def test_transforms():
    assert transform_feature(0.01, "log10_abs") == -2.0
    assert transform_feature(-0.01, "log10_abs") == -2.0
    assert transform_feature(4, "reciprocal") == 0.25
    assert transform_feature(-9, "sqrt_abs") == 3.0
    assert transform_feature(-1.5, "identity") == -1.5
    with pytest.raises(FeatureDomainError, match="log10_abs"):
        transform_feature(0.0, "log10_abs", "var(dQ)")
    with pytest.raises(FeatureDomainError, match="reciprocal"):
        transform_feature(0.0, "reciprocal")


def _fm(values, target=None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    n, p = values.shape
    target = np.arange(n, dtype=float) if target is None else target
    return FeatureMatrix([f"r{i}" for i in range(n)], [f"x{j}" for j in range(p)], values, target)


def test_standardize_hand_example():
    out = standardize(_fm([1, 2, 3]))
    assert np.allclose(out.values[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)
    assert out.scaling.mean[0] == 2.0


def test_standardize_idempotent_on_normalized():
    z = np.array([-1.2247448713915890, 0.0, 1.2247448713915890])
    out = standardize(_fm(z))
    assert np.max(np.abs(out.values[:, 0] - z)) <= 1e-10


def test_standardize_constant_column():
    with pytest.raises(ConstantColumnError, match="x1"):
        standardize(_fm(np.column_stack([[1, 2, 3], [5, 5, 5]])))


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 30), st.integers(1, 6), st.integers(0, 10_000))
def test_standardize_round_trip(n, p, seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, p)) * rng.uniform(0.1, 100, p) + rng.normal(size=p) * 50
    out = standardize(_fm(raw))
    assert np.max(np.abs(out.values.mean(axis=0))) <= 1e-10
    assert np.max(np.abs(out.values.std(axis=0) - 1)) <= 1e-10
    assert np.max(np.abs(out.scaling.invert(out.values) - raw)) <= 1e-10 * max(1, np.abs(raw).max())


def test_pearson_examples():
    t = np.array([1.0, 3, 2, 4])
    assert pearson_correlation(t, t) == 1.0
    assert pearson_correlation(-t, t) == -1.0
    assert pearson_correlation([1, 2, 3, 4], t) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(DataError):
        pearson_correlation([1, 1, 1], [1, 2, 3])
    with pytest.raises(DataError):
        pearson_correlation([1, 2], [1, 2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_affine_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 12))
    r = pearson_correlation(x, y)
    assert abs(pearson_correlation(a * x + b, y) - r) <= 1e-12
    assert abs(pearson_correlation(x, a * y + b) - r) <= 1e-12


def test_assemble_shape_and_order(small_synth):
    ds, _ = small_synth
    sub = ds.subset(ds.cell_ids[:3])
    fm = assemble_feature_matrix(sub, label_dataset(sub), [FeatureSpec()])
    assert fm.shape == (3, 1)
    assert fm.rows == sorted(fm.rows)
    assert fm.columns == ["log10_abs(variance(dQ_100-10))"]
    labels = label_dataset(sub)
    assert np.allclose(fm.target, np.log10([labels[c].cycle_life for c in fm.rows]))


def test_assemble_raw_mode(small_synth):
    ds, _ = small_synth
    grid = VoltageGrid()
    fm = assemble_feature_matrix(ds, label_dataset(ds), [FeatureSpec("raw", "identity")], grid)
    assert fm.shape == (len(ds), 1000)
    assert len(set(fm.columns)) == 1000
    assert np.array_equal(fm.voltages, grid.voltages)
    ids, dq = delta_q_matrix(ds, grid)
    assert np.array_equal(dq, fm.values)


def test_assemble_missing_cycle_names_cell():
    c = make_cell()
    cells = (make_cell("ok"), make_cell("broken", curves={10: c.cycles[10]}))
    ds = Dataset(cells)
    with pytest.raises(MissingCycleError, match="broken"):
        assemble_feature_matrix(ds, label_dataset(ds), [FeatureSpec()], VoltageGrid(3.5, 2.0, 50))


def test_assemble_skips_censored():
    ds = Dataset((make_cell("a"), make_cell("b")))
    labels = {"a": CycleLifeLabel("a", 300.0, False), "b": CycleLifeLabel("b", 500.0, True)}
    fm = assemble_feature_matrix(ds, labels, [FeatureSpec()], VoltageGrid(3.5, 2.0, 50))
    assert fm.rows == ["a"]


def test_feature_spec_names_and_dict():
    spec = FeatureSpec("minimum", "sqrt_abs", 200, 5)
    assert spec.name == "sqrt_abs(minimum(dQ_200-5))"
    assert FeatureSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError, match="reduction"):
        FeatureSpec("median")
    with pytest.raises(ConfigError):
        FeatureSpec.from_dict({"reduction": "variance", "bogus": 1})


def test_feature_matrix_invariants():
    with pytest.raises(DataError):
        FeatureMatrix(["a", "b"], ["x", "x"], np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(DataError):
        FeatureMatrix(["a", "b"], ["x"], np.zeros((3, 1)), np.zeros(2))


def test_export_round_trip(tmp_path, small_synth):
    ds, _ = small_synth
    fm = assemble_feature_matrix(ds, label_dataset(ds), [FeatureSpec(), FeatureSpec("mean", "identity")])
    path = tmp_path / "fm.csv"
    write_feature_matrix(fm, path)
    assert path.read_text().splitlines()[0] == "cell_id,log10_abs(variance(dQ_100-10)),mean(dQ_100-10),target"
    back = read_feature_matrix(path)
    assert back.rows == fm.rows and np.array_equal(back.values, fm.values)
    assert np.array_equal(back.target, fm.target)
    # a scaled matrix is exported in raw units
    write_feature_matrix(standardize(fm), path)
    assert np.allclose(read_feature_matrix(path).values, fm.values, rtol=1e-12, atol=1e-15)

    grid = VoltageGrid(3.5, 2.0, 4)
    ids, dq = delta_q_matrix(ds, grid)
    write_delta_q(ids, dq, grid, tmp_path / "dq.csv")
    head = (tmp_path / "dq.csv").read_text().splitlines()[0]
    assert head == "cell_id,3.5000,3.0000,2.5000,2.0000"
