import numpy as np
import pytest
from hypothesis import given, strategies as st

from pvdse import pv_models as pm
from pvdse.errors import InvalidInputError
from pvdse.observability import (
    ac_observability, check_observability, linearized_observability, numerical_rank, observability_matrix,
    selection_matrix, validate_selector,
)

A_AC, _ = pm.build_ac_matrices(pm.default_params())


def test_double_integrator():
    o = observability_matrix([[0, 1], [0, 0]], [[1, 0]])
    np.testing.assert_array_equal(o, [[1, 0], [0, 1]])


def test_identity_output_full_rank(rng):
    a = rng.normal(size=(4, 4))
    o = observability_matrix(a, np.eye(4))
    np.testing.assert_array_equal(o[:4], np.eye(4))
    assert check_observability(a, np.eye(4)).full_rank


def test_zero_output_rank_zero():
    rep = check_observability(A_AC, np.zeros((2, 6)))
    assert rep.rank == 0 and not rep.full_rank


def test_single_current_matches_svd_oracle():
    c = selection_matrix([1], 6)
    o = np.vstack([c @ np.linalg.matrix_power(A_AC / np.linalg.norm(A_AC, 2), k) for k in range(6)])
    s = np.linalg.svd(o, compute_uv=False)
    expect = int(np.sum(s > 1e-8 * s[0]))
    rep = check_observability(A_AC, c)
    assert rep.rank == expect
    assert rep.full_rank == (expect == 6)


def test_pcc_voltages_on_equal_sides():
    # identical converter-side and grid-side R/L leave the common mode I1 + Io unseen by Vo
    rep = ac_observability(pm.SINGLE_STAGE, [5, 6])
    assert rep.rank == 4 and not rep.full_rank
    v = np.zeros(6)
    v[[0, 2]] = 1.0
    o = observability_matrix(A_AC, selection_matrix([5, 6], 6))
    assert np.linalg.norm(o @ v) < 1e-9 * np.linalg.norm(o)
    # distinct grid-side resistance restores full rank
    rep = ac_observability(pm.SINGLE_STAGE, [5, 6], pm.default_params().replace(r_g=2.9))
    assert rep.rank == 6 and rep.full_rank


def test_linearized_rank_with_dc_link():
    assert linearized_observability(pm.SINGLE_STAGE, [5, 6, 7]).rank == 7
    assert linearized_observability(pm.TWO_STAGE, [5, 6, 8]).rank == 8
    assert linearized_observability(pm.SINGLE_STAGE, [5, 6]).rank == 4


def test_validate_selector_examples():
    assert validate_selector(pm.SINGLE_STAGE, [5, 6, 7])[0]
    ok, why = validate_selector(pm.SINGLE_STAGE, [5, 6])
    assert not ok and "x7" in why
    assert validate_selector(pm.TWO_STAGE, [5, 6, 8])[0]
    assert validate_selector(pm.TWO_STAGE, [5, 6, 7])[0]
    assert not validate_selector(pm.TWO_STAGE, [5, 6])[0]
    with pytest.raises(InvalidInputError):
        validate_selector(pm.SINGLE_STAGE, [5, 9])


def test_dimension_errors():
    with pytest.raises(InvalidInputError):
        observability_matrix(np.eye(3), np.eye(2))
    with pytest.raises(InvalidInputError):
        observability_matrix(np.ones((2, 3)), np.ones((1, 3)))
    with pytest.raises(InvalidInputError):
        check_observability(np.eye(2), np.eye(2), tol=0)


def test_report_json():
    rep = ac_observability(pm.SINGLE_STAGE, [5, 6, 7])
    assert '"rank": 4' in rep.to_json()


@pytest.mark.parametrize("tol", [1e-12, 1e-10, 1e-8, 1e-6])
def test_rank_stable_across_tolerances(tol):
    p = pm.default_params().replace(r_g=2.9)
    a, _ = pm.build_ac_matrices(p)
    assert check_observability(a, selection_matrix([5, 6], 6), tol).full_rank
    assert ac_observability(pm.SINGLE_STAGE, [5, 6], tol=tol).rank == 4


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_rank_invariant_under_coordinate_change(seed, rows):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(5, 5))
    c = rng.normal(size=(rows, 5))
    if rows == 1:
        c[:, 3:] = 0.0
    t = rng.normal(size=(5, 5)) + 3 * np.eye(5)
    ti = np.linalg.inv(t)
    r1 = check_observability(a, c).rank
    r2 = check_observability(t @ a @ ti, c @ ti).rank
    assert r1 == r2


@given(st.integers(0, 10_000))
def test_adding_rows_never_lowers_rank(seed):
    rng = np.random.default_rng(seed)
    a = np.diag(rng.choice([-1.0, -2.0, -3.0], 5)) + np.triu(rng.normal(size=(5, 5)) * rng.integers(0, 2, (5, 5)), 1)
    c = rng.normal(size=(1, 5)) * rng.integers(0, 2, (1, 5))
    extra = rng.normal(size=(1, 5))
    assert check_observability(a, np.vstack([c, extra])).rank >= check_observability(a, c).rank


def test_numerical_rank_empty():
    assert numerical_rank(np.zeros((3, 3)))[0] == 0
