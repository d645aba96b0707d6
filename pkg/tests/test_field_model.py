import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochshape.field_model import (
    Mode, StreamSpec, check_conditions, default_field_family, eval_field, eval_jacobian,
    eval_stream, ito_drift, shear_spec, torus_quadrature,
)
from stochshape.flow_integrator import step_heun

from conftest import single

TWO_PI = 2 * np.pi
coord = st.floats(-3.0, 3.0, allow_nan=False)


def test_stream_examples():
    s = single(Mode(1.0, 0, 1))
    assert eval_stream(s, 1, (0.3, 0.0)) == pytest.approx(1.0)
    assert eval_stream(s, 1, (0.3, 0.25)) == pytest.approx(0.0, abs=1e-15)
    pair = StreamSpec(((Mode(1.0, 1, 0), Mode(1.0, 0, 1)),))
    assert eval_stream(pair, 1, (0.0, 0.0)) == pytest.approx(2.0)


def test_field_examples():
    s = single(Mode(1.0, 0, 1))
    np.testing.assert_allclose(eval_field(s, 1, (0.0, 0.25)), (TWO_PI, 0.0), atol=1e-14)
    np.testing.assert_allclose(eval_field(s, 1, (0.0, 0.0)), (0.0, 0.0), atol=1e-14)
    pair = StreamSpec(((Mode(1.0, 1, 0), Mode(1.0, 0, 1)),))
    np.testing.assert_allclose(eval_field(pair, 1, (0.25, 0.25)), (TWO_PI, -TWO_PI), atol=1e-13)


def test_index_out_of_range():
    s = single(Mode(1.0, 0, 1))
    with pytest.raises((IndexError, ValueError)):
        eval_field(s, 2, (0.0, 0.0))


def test_zero_wavevector_rejected():
    with pytest.raises(ValueError):
        Mode(1.0, 0, 0)


@given(coord, coord)
def test_shear_jacobian_closed_form(x, y):
    s = single(Mode(1.0, 0, 1))
    J = eval_jacobian(s, 1, (x, y))
    np.testing.assert_allclose(J, [[0.0, 4 * np.pi**2 * np.cos(TWO_PI * y)], [0.0, 0.0]],
                               atol=1e-12)


def test_trace_zero(spec, rng):
    pts = rng.uniform(-2, 2, (100, 2))
    for k in range(1, spec.d + 1):
        J = eval_jacobian(spec, k, pts)
        assert np.max(np.abs(J[:, 0, 0] + J[:, 1, 1])) <= 1e-12


def test_jacobian_finite_difference_order(spec, rng):
    x = rng.uniform(0, 1, 2)
    errs = []
    for delta in (1e-4, 1e-5):
        J = eval_jacobian(spec, 1, x)
        fd = np.empty((2, 2))
        for i in range(2):
            e = np.zeros(2)
            e[i] = delta
            fd[:, i] = (eval_field(spec, 1, x + e) - eval_field(spec, 1, x - e)) / (2 * delta)
        errs.append(np.abs(fd - J).max())
    assert errs[1] < 1e-8
    # second order: the error drops about 100x until rounding takes over
    assert errs[1] < errs[0] / 20 or errs[1] < 1e-9


@given(coord, coord, st.integers(-5, 5), st.integers(-5, 5))
def test_periodicity(x, y, n1, n2):
    s = default_field_family()
    a = eval_field(s, 2, (x, y))
    b = eval_field(s, 2, (x + n1, y + n2))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_mean_quadrature(spec):
    for n in (4, 8, 16):
        for k in range(1, spec.d + 1):
            m = torus_quadrature(lambda p: eval_field(spec, k, p), n)
            assert np.abs(m).max() <= 1e-12


def test_shear_ito_drift_vanishes(rng):
    s = shear_spec()
    pts = rng.uniform(0, 1, (20, 2))
    assert np.abs(ito_drift(s, pts)).max() <= 1e-12


def test_default_drift_quadrature(spec):
    assert np.abs(torus_quadrature(lambda p: ito_drift(spec, p), 32)).max() <= 1e-8


def test_heun_one_step_mean_matches_ito_drift(spec):
    # Monte Carlo oracle: E[step] - x = ito_drift(x) h + O(h^2)
    rng = np.random.default_rng(5)
    x = np.array([0.13, 0.71])
    h = 0.01
    n = 100_000
    inc = rng.standard_normal((n, spec.d)) * np.sqrt(h)
    from stochshape import _kernels as K
    pts = np.repeat(x[None, :], n, axis=0)
    out = K.heun_points_independent(spec.packed, pts, np.ascontiguousarray(inc[:, None, :]), h)
    d = out - x
    se = d.std(axis=0, ddof=1) / np.sqrt(n)
    np.testing.assert_array_less(np.abs(d.mean(0) - ito_drift(spec, x) * h), 4 * se + 1e-4)


def test_default_family_passes():
    diag = check_conditions(default_field_family(), grid_n=64)
    assert diag.all_ok, diag.table()
    assert diag.min_value_gap >= 1e-3


def test_cellular_single_fails_E():
    H = StreamSpec(((Mode(1.0, 1, 0), Mode(1.0, 0, 1)),))
    diag = check_conditions(H, grid_n=32)
    assert not diag.condition_E_ok


def test_shear_pair_fails_E():
    H = StreamSpec(((Mode(1.0, 0, 1),), (Mode(1.0, 1, 0),)))
    diag = check_conditions(H, grid_n=32)
    assert not diag.condition_E_ok


def test_condition_E_stable_under_seed_halving(spec):
    a = check_conditions(spec, grid_n=64)
    b = check_conditions(spec, grid_n=32)
    assert a.condition_E_ok == b.condition_E_ok
    assert [len(c) for c in a.critical_points] == [len(c) for c in b.critical_points]


def test_displacement_bound_contract(spec):
    assert spec.step_displacement_bound(0.01) <= 0.1
    assert spec.step_displacement_bound(0.04) > spec.step_displacement_bound(0.01)
