import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pvdse import pv_models as pm
from pvdse import sindy
from pvdse.errors import InvalidInputError, SingularityError
from pvdse.preprocessing import DataMatrices
from pvdse.sindy import LibrarySpec, SparseModel, Term

GAMMAS = (5, 8, 10, 15, 20, 25, 30)


def linear_data(rng, coef, m=200):
    x = rng.normal(size=(m, len(coef)))
    y = x @ np.asarray(coef, dtype=float)
    return DataMatrices(x, np.column_stack([y] + [np.zeros(m)] * (len(coef) - 1)), np.zeros((m, 0)), 1.0)


def enumerate_terms(n_vars, prod, cubic, n_sin, n_rational):
    """Count library terms by brute-force enumeration of sorted index tuples."""
    count = 1 + n_vars
    count += len({tuple(sorted(c)) for c in itertools.product(prod, repeat=2)})
    count += len({tuple(sorted(c)) for c in itertools.product(cubic, repeat=3)})
    return count + n_sin + n_rational


def test_library_rows():
    spec = sindy.polynomial_library(1, 1, degree=2)
    assert spec.names == ["1", "x1", "u1", "x1 x1", "x1 u1", "u1 u1"]
    np.testing.assert_array_equal(spec.evaluate(np.array([2.0]), np.array([3.0])), [1, 2, 3, 4, 6, 9])


def test_rational_term():
    spec = LibrarySpec([Term("rational", (2, 4, 6))], 7, 6)
    x = np.zeros(7)
    x[2], x[4], x[6] = 1.0, 800.0, 800.0
    assert spec.evaluate(x, np.zeros(6))[0] == 1.0
    x[6] = 0.5
    with pytest.raises(SingularityError):
        spec.evaluate(x, np.zeros(6))


@pytest.mark.parametrize("kind,size", [(pm.SINGLE_STAGE, 184), (pm.TWO_STAGE, 249)])
def test_default_library_size(kind, size):
    n, d = pm.n_states(kind), pm.n_inputs(kind)
    prod = [i for i in range(n + d) if i != n + 4]
    assert len(sindy.default_pv_library(kind)) == enumerate_terms(n + d, prod, range(n), 4, 4) == size


def test_library_validation():
    with pytest.raises(InvalidInputError):
        LibrarySpec([Term("lin", (0,)), Term("lin", (0,))], 1, 0)
    with pytest.raises(InvalidInputError):
        LibrarySpec([Term("lin", (3,))], 1, 1)
    with pytest.raises(InvalidInputError):
        Term("poly2", (0,))
    with pytest.raises(InvalidInputError):
        Term("cos", (0,))


def test_centered_basis_is_exact(rng):
    spec = sindy.polynomial_library(2, 1, degree=3)
    z = rng.normal(size=(20, 3)) + [800, -5, 30]
    center = np.array([790.0, -4.0, 31.0])
    shift, m = spec.centered(center)
    raw = spec.evaluate(z[:, :2], z[:, 2:])
    shifted = spec.evaluate(z[:, :2] - shift[:2], z[:, 2:] - shift[2:])
    np.testing.assert_allclose(shifted @ m, raw, rtol=1e-10)


def test_stls_recovers_decay():
    t = np.linspace(0, 2, 400)
    x = np.exp(-2 * t)[:, None]
    spec = sindy.polynomial_library(1, 0, degree=3, include_const=False)
    theta = spec.evaluate(x, np.zeros((400, 0)))
    xi = sindy.stls(theta, -2 * x, 0.1)
    np.testing.assert_allclose(xi[:, 0], [-2, 0, 0], atol=1e-8)


def test_stls_zero_threshold_is_lstsq(rng):
    theta = rng.normal(size=(50, 4))
    y = rng.normal(size=(50, 2))
    np.testing.assert_allclose(sindy.stls(theta, y, 0.0), np.linalg.lstsq(theta, y, rcond=None)[0], rtol=1e-10)


def test_stls_flags_rank_deficiency(rng):
    a = rng.normal(size=(30, 1))
    theta = np.hstack([a, a])
    diag = {}
    with pytest.warns(RuntimeWarning):
        xi = sindy.stls(theta, 2 * a, 0.0, diagnostics=diag)
    assert diag["rank_deficient"]
    np.testing.assert_allclose(xi[:, 0], [1, 1], atol=1e-10)
    with pytest.raises(InvalidInputError):
        sindy.stls(np.full((3, 1), np.nan), np.zeros(3), 0.1)


@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_stls_fixed_point(seed, lam):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=(40, 6))
    y = theta @ rng.choice([0.0, 0.5, 2.0, -3.0], size=(6, 2)) + 0.01 * rng.normal(size=(40, 2))
    xi = sindy.stls(theta, y, lam)
    again = sindy.stls(theta, theta @ xi, lam)
    np.testing.assert_allclose(again, xi, rtol=1e-8, atol=1e-10)


@given(st.integers(0, 10_000), st.floats(-100, 100).filter(lambda c: abs(c) > 1e-3))
def test_lstsq_scale_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=(30, 5))
    y = rng.normal(size=(30, 3))
    base = sindy.stls(theta, y, 0.0)
    y2 = y.copy()
    y2[:, 1] *= c
    scaled = sindy.stls(theta, y2, 0.0)
    np.testing.assert_allclose(scaled[:, 1], c * base[:, 1], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(scaled[:, [0, 2]], base[:, [0, 2]], rtol=1e-12)


def test_threshold_arithmetic(rng):
    data = linear_data(rng, [100, 10, 0.5])
    spec = LibrarySpec([Term("lin", (i,)) for i in range(3)], 3, 0)
    model = sindy.feature_select_sparse_regression(data, spec, 8)
    assert model.diagnostics["mu"][0] == pytest.approx(100)
    np.testing.assert_allclose(model.xi[:, 0], [100, 0, 0], atol=1e-9)
    # refit on the survivor absorbs what the removed terms explained
    refit = sindy.feature_select_sparse_regression(data, spec, 8, refit=True)
    x = data.x
    expect = (x[:, 0] @ data.xdot[:, 0]) / (x[:, 0] @ x[:, 0])
    assert refit.xi[0, 0] == pytest.approx(expect, rel=1e-10)
    assert model.diagnostics["degenerate_columns"] == [1, 2]


def test_gamma_must_exceed_one(ident_data):
    with pytest.raises(InvalidInputError):
        sindy.feature_select_sparse_regression(ident_data[pm.SINGLE_STAGE], sindy.default_pv_library(pm.SINGLE_STAGE), 1.0)


@given(st.integers(0, 10_000), st.sampled_from(GAMMAS))
def test_post_threshold_invariant(seed, gamma):
    rng = np.random.default_rng(seed)
    coef = rng.normal(size=(6, 2)) * rng.choice([0.01, 1, 100], size=(6, 2))
    x = rng.normal(size=(60, 6))
    data = DataMatrices(x[:, :2], x @ coef, x[:, 2:], 1.0)
    spec = sindy.polynomial_library(2, 4, degree=1, include_const=False)
    xi = sindy.feature_select_sparse_regression(data, spec, gamma).xi
    mu = np.abs(sindy.stls(spec.evaluate(data.x, data.u), data.xdot, 0.0)).max(axis=0)
    assert np.all((xi == 0) | (np.abs(xi) >= mu / gamma - 1e-9))


@given(st.integers(0, 10_000))
def test_nonzero_count_monotone_in_gamma(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(80, 8))
    coef = rng.normal(size=(8, 2)) * 10.0 ** rng.uniform(-3, 2, size=(8, 2))
    data = DataMatrices(x[:, :2], x @ coef, x[:, 2:], 1.0)
    spec = sindy.polynomial_library(2, 6, degree=1, include_const=False)
    counts = [sindy.feature_select_sparse_regression(data, spec, g).nonzero_count for g in GAMMAS]
    assert counts == sorted(counts)


@pytest.mark.parametrize("kind", pm.KINDS)
def test_noiseless_recovery(kind, ident_data):
    spec = sindy.default_pv_library(kind)
    model = sindy.feature_select_sparse_regression(ident_data[kind], spec, 15)
    truth = sindy.physics_coefficients(kind, pm.default_params(kind), spec)
    assert np.array_equal(model.xi != 0, truth != 0)
    assert np.abs(model.xi - truth).max() / np.abs(truth).max() < 1e-6


def test_table_pattern_at_gamma_8(ident_data):
    model = sindy.feature_select_sparse_regression(ident_data[pm.SINGLE_STAGE], sindy.default_pv_library(pm.SINGLE_STAGE), 8)
    boxed = {("x1", 1): -133.58, ("x2", 1): 377, ("x1", 2): -377, ("x1", 5): 4000, ("x3", 5): -4000,
             ("x3", 3): -133.58, ("x2", 6): 4000, ("u6", 7): 166.66, ("x3 u3/x7", 7): -250}
    for (term, col), value in boxed.items():
        assert model.coefficient(term, col) == pytest.approx(value, rel=0.01)
    nz = np.abs(model.xi[model.xi != 0])
    assert not np.any(np.isclose(nz, 2.31, rtol=0.05)) and not np.any(np.isclose(nz, 8.52, rtol=0.05))


def test_model_evaluation(ident_data, held_out_data, rng):
    kind = pm.SINGLE_STAGE
    p = pm.default_params(kind)
    spec = sindy.default_pv_library(kind)
    zero = SparseModel(np.zeros((len(spec), 7)), spec)
    data = held_out_data[kind]
    assert np.all(sindy.evaluate_model(zero, data.x[:5], data.u[:5]) == 0)
    assert sindy.validation_error(zero, data) == 1.0
    truth = SparseModel(sindy.physics_coefficients(kind, p, spec), spec)
    ref = pm.single_stage_derivative(data.x, data.u, p)
    np.testing.assert_allclose(sindy.evaluate_model(truth, data.x, data.u), ref, rtol=1e-10, atol=1e-7)
    exact = DataMatrices(data.x, ref, data.u, data.dt)
    assert sindy.validation_error(truth, exact) < 1e-10
    model = sindy.feature_select_sparse_regression(ident_data[kind], spec, 15)
    assert sindy.validation_error(model, ident_data[kind]) < 1e-3
    pred = sindy.evaluate_model(model, data.x, data.u)
    rel = np.linalg.norm(pred - ref, axis=1) / np.linalg.norm(ref, axis=1)
    assert rel.mean() < 0.01
    with pytest.raises(InvalidInputError):
        sindy.validation_error(zero, DataMatrices(data.x, np.zeros_like(data.x), data.u, data.dt))


def test_json_roundtrip(ident_data, tmp_path):
    model = sindy.feature_select_sparse_regression(ident_data[pm.TWO_STAGE], sindy.default_pv_library(pm.TWO_STAGE), 15)
    text = model.to_json()
    assert len(model.to_dict()["coefficients"]) == model.nonzero_count
    back = SparseModel.from_json(text)
    assert np.array_equal(back.xi, model.xi) and back.library == model.library and back.gamma == 15
    model.save(tmp_path / "m.json")
    x = ident_data[pm.TWO_STAGE].x[:10]
    u = ident_data[pm.TWO_STAGE].u[:10]
    np.testing.assert_array_equal(SparseModel.load(tmp_path / "m.json")(x, u), model(x, u))


def test_gamma_sweep_on_two_stage_data(ident_data, held_out_data):
    spec = sindy.default_pv_library(pm.TWO_STAGE)
    counts, errors = [], []
    for g in GAMMAS:
        model = sindy.feature_select_sparse_regression(ident_data[pm.TWO_STAGE], spec, g)
        counts.append(model.nonzero_count)
        errors.append(sindy.validation_error(model, held_out_data[pm.TWO_STAGE]))
    assert counts == sorted(counts)
    assert errors[0] > 1.0 and min(errors) < 1e-6
