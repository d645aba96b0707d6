import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochshape.field_model import shear_spec
from stochshape.flow_integrator import (
    Integrator, NoisePath, TangentState, compare_schemes, displacement_stats, flow_two_point,
    lyapunov_estimate, n_steps_for, realization_seed, run_points, run_tangent, step_heun,
    step_point, step_tangent, strong_convergence,
)



def test_zero_increments_identity(spec):
    x = np.array([0.3, 0.7])
    np.testing.assert_array_equal(step_point(spec, x, np.zeros(spec.d), 0.01), x)
    np.testing.assert_array_equal(step_heun(spec, x, np.zeros(spec.d), 0.01), x)
    st0 = TangentState(x.copy())
    st1 = step_tangent(spec, st0, np.zeros(spec.d), 0.01)
    np.testing.assert_array_equal(st1.M, np.eye(2))


@given(st.floats(-0.05, 0.05))
def test_shear_closed_form(s):
    sp = shear_spec()
    out = step_point(sp, (0.0, 0.25), [s], 0.01)
    np.testing.assert_allclose(out, (2 * np.pi * s, 0.25), atol=1e-12)


def test_shear_tangent_unchanged():
    sp = shear_spec()
    st1 = step_tangent(sp, TangentState(np.array([0.0, 0.25])), [0.03], 0.01)
    np.testing.assert_allclose(st1.M, np.eye(2), atol=1e-12)


@given(st.integers(-4, 4), st.integers(-4, 4), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_translation_equivariance(n1, n2, seed):
    from stochshape.field_model import default_field_family
    spec = default_field_family()
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, 2)
    inc = rng.standard_normal(spec.d) * 0.1
    a = step_point(spec, x, inc, 0.01)
    b = step_point(spec, x + (n1, n2), inc, 0.01)
    np.testing.assert_allclose(b - a, (n1, n2), atol=1e-9)


def test_h_must_be_positive(spec):
    with pytest.raises(ValueError):
        step_point(spec, (0, 0), np.zeros(spec.d), 0.0)
    with pytest.raises(ValueError):
        Integrator(h=-1)


def test_noise_reproducible_and_chunk_independent():
    a = NoisePath(42, 0.01, 4)
    b = NoisePath(42, 0.01, 4)
    first = a.increments(0, 5000).copy()
    parts = np.concatenate([b.increments(0, 7), b.increments(7, 3000), b.increments(3000, 5000)])
    np.testing.assert_array_equal(first, parts)


def test_noise_distribution():
    inc = NoisePath(3, 0.04, 2).increments(0, 50_000)
    assert abs(inc.mean()) < 4 * 0.2 / np.sqrt(100_000)
    assert inc.var() == pytest.approx(0.04, rel=0.03)


def test_realization_seed_independent_of_order():
    seeds = [realization_seed(9, i) for i in range(5)]
    assert len(set(seeds)) == 5
    assert realization_seed(9, 3) == seeds[3]
    assert realization_seed(10, 3) != seeds[3]


def test_coarsen_sums():
    p = NoisePath(1, 0.005, 2)
    c = p.coarsen(2, 10)
    np.testing.assert_allclose(c.increments(0, 10), p.increments(0, 20).reshape(10, 2, 2).sum(1))
    assert c.h == 0.01


def test_n_steps_for():
    assert n_steps_for(1.0, 0.01) == 100
    with pytest.raises(ValueError):
        n_steps_for(1.005, 0.01)


def test_determinism(spec):
    a = run_points(spec, [[0.1, 0.2]], NoisePath(5, 0.01, spec.d), 300)
    b = run_points(spec, [[0.1, 0.2]], NoisePath(5, 0.01, spec.d), 300)
    np.testing.assert_array_equal(a, b)


def test_two_point_diagonal_and_shift(spec):
    noise = NoisePath(11, 0.01, spec.d)
    _, p = flow_two_point(spec, (0.2, 0.3), (0.2, 0.3), noise, 2.0)
    np.testing.assert_array_equal(p[:, 0], p[:, 1])
    _, q = flow_two_point(spec, (0.2, 0.3), (1.2, 0.3), noise, 2.0)
    np.testing.assert_allclose(q[:, 1] - q[:, 0], np.tile([1.0, 0.0], (q.shape[0], 1)), atol=1e-9)


def test_two_point_separation_rate(spec):
    # near-diagonal log separation grows at roughly lambda_1 before saturation
    slopes = []
    for i in range(40):
        noise = NoisePath.for_realization(77, i, 0.01, spec.d)
        t, p = flow_two_point(spec, (0.3, 0.4), (0.3 + 1e-6, 0.4), noise, 8.0, sample_every=100)
        r = np.log(np.linalg.norm(p[:, 1] - p[:, 0], axis=1))
        slopes.append((r[-1] - r[0]) / t[-1])
    lam = lyapunov_estimate(spec, (0.3, 0.4), (1, 0), 100.0, 0.01, 3)
    se = np.std(slopes, ddof=1) / np.sqrt(len(slopes))
    assert abs(np.mean(slopes) - lam.lambda1) <= 2 * np.hypot(se, lam.stderr) + 0.1


def test_lyapunov_degenerate_shear():
    sp = shear_spec(0.05)
    res = lyapunov_estimate(sp, (0.1, 0.2), (1, 0), 20.0, 0.01, 1)
    # a single shear stretches at most linearly in time
    assert abs(res.lambda1) < 0.2


def test_lyapunov_sum_zero(spec):
    res = lyapunov_estimate(spec, (0.1, 0.2), (1, 0), 50.0, 0.01, 2)
    assert res.lambda1 > 0
    assert abs(res.lambda1 + res.lambda2) <= 1e-6
    with pytest.raises(ValueError):
        lyapunov_estimate(spec, (0, 0), (1, 0), 5.0, 0.01, 2)


def test_det_after_steps(spec):
    noise = NoisePath(8, 1e-3, spec.d)
    st1 = run_tangent(spec, TangentState(np.array([0.2, 0.1])), noise, 2000)
    assert abs(st1.det - 1) <= 1e-6


def test_displacement_stats_shapes(spec):
    res = displacement_stats(spec, 100, 2.0, 0.01, 4)
    assert res.cov_over_t.shape == (2, 2)
    assert res.at(1.0).T == pytest.approx(1.0)
    with pytest.raises(ValueError):
        displacement_stats(spec, 50, 2.0, 0.01, 4)


def test_compare_schemes_small(spec):
    c = compare_schemes(spec, 500, 1.0, 0.01, 3)
    assert np.all(c.z < 4)
    assert np.all(np.abs(c.paired_diff) < 4 * c.paired_se + 1e-3)


def test_strong_convergence_errors_shrink(spec):
    a = strong_convergence(spec, 50, 1.0, 0.02, 1)
    assert a.err_h.mean() > a.err_h2.mean() > 0
    assert a.factor > 1.1
