import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochshape.curve_tracker import (
    BudgetExhausted, CurveRun, Polyline, Target, advect_step, diameter, dist_to_point,
    track_growth, write_curve_csv,
)
from stochshape.field_model import shear_spec
from stochshape.flow_integrator import NoisePath, run_points
from stochshape.pruning import RadialPruner, TargetPruner


def brute_diameter(p):
    d = p[:, None, :] - p[None, :, :]
    return np.sqrt((d**2).sum(-1)).max()


def test_diameter_examples():
    assert diameter(np.array([[0.0, 0.0], [3.0, 4.0]])) == pytest.approx(5.0)
    seg = Polyline.segment()
    assert seg.diameter() == pytest.approx(1.0)
    assert seg.is_long()
    with pytest.raises(ValueError):
        diameter(np.array([[0.0, 0.0]]))


@given(st.integers(0, 2**32 - 1), st.integers(3, 3000))
@settings(max_examples=25, deadline=None)
def test_diameter_hull_matches_brute_force(seed, n):
    p = np.random.default_rng(seed).normal(size=(n, 2))
    assert diameter(p) == pytest.approx(brute_diameter(p), abs=1e-12)


def test_dist_examples():
    seg = Polyline(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    assert dist_to_point(seg, (0.0, 1.0)) == pytest.approx(1.0)
    assert dist_to_point(seg, (1.0, 0.0)) == 0.0


def _sampled_dist(a, b, A, levels=5, k=201):
    # dense sampling of the parameter, zoomed in around the best sample at each level
    lo, hi = 0.0, 1.0
    for _ in range(levels):
        s = np.linspace(lo, hi, k)
        p = (1 - s)[:, None] * a + s[:, None] * b
        d = np.hypot(*(p - A).T)
        i = int(np.argmin(d))
        step = (hi - lo) / (k - 1)
        lo, hi = max(0.0, s[i] - step), min(1.0, s[i] + step)
    return d[i]


def test_dist_dense_sampling_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = rng.normal(size=(4, 2))
        A = rng.normal(size=2) * 2
        oracle = min(_sampled_dist(a, b, A) for a, b in zip(v[:-1], v[1:]))
        assert abs(dist_to_point(Polyline(v), A) - oracle) <= 1e-9


def test_zero_increment_identity(spec):
    c = Polyline.segment()
    out = advect_step(spec, c, np.zeros(spec.d), 0.01)
    np.testing.assert_array_equal(out.vertices, c.vertices)


def test_shear_doubling_inserts_one_midpoint():
    dm = 0.05
    L = 0.9 * dm
    # shear H = cos(2 pi y); increment chosen so the vertical segment doubles in length
    s = np.sqrt(3) * L / (4 * np.pi * np.sin(np.pi * L))
    c = Polyline(np.array([[0.0, -L / 2], [0.0, L / 2]]), delta_max=dm)
    out = advect_step(shear_spec(), c, [s], 0.01)
    assert len(out) == 3
    assert out.arc_length() == pytest.approx(2 * L, rel=1e-9)
    assert out.max_segment() <= dm
    np.testing.assert_allclose(out.vertices[1], (0.0, 0.0), atol=1e-15)
    assert not out.orig[1]


def test_refinement_soundness_subsequence(spec):
    c0 = Polyline.segment(delta_max=0.05)
    noise = NoisePath(21, 0.01, spec.d)
    c = c0
    for s in range(200):
        c = advect_step(spec, c, noise.increment(s), 0.01)
    assert len(c) > len(c0)
    coarse = run_points(spec, c0.vertices, noise, 200)
    np.testing.assert_array_equal(c.vertices[c.orig], coarse)
    # order preserved: original vertices appear in their initial order
    idx = np.flatnonzero(c.orig)
    assert np.all(np.diff(idx) > 0)
    assert c.max_segment() <= c.delta_max * (1 + 1e-9)


def test_curverun_matches_advect_step(spec):
    noise = NoisePath(4, 0.01, spec.d)
    c = Polyline.segment()
    for s in range(150):
        c = advect_step(spec, c, noise.increment(s), 0.01)
    run = CurveRun(spec, Polyline.segment(), noise)
    run.advance(150)
    np.testing.assert_array_equal(run.curve.vertices, c.vertices)


def test_budget_exhaustion_carries_curve(spec):
    c = Polyline.segment(vertex_budget=40)
    noise = NoisePath(2, 0.01, spec.d)
    with pytest.raises(BudgetExhausted) as err:
        for s in range(2000):
            c = advect_step(spec, c, noise.increment(s), 0.01)
    assert err.value.partial is not None and len(err.value.partial) <= 40


def test_track_growth_basics(spec):
    tr = track_growth(spec, Polyline.segment(), NoisePath(3, 0.01, spec.d), 0.0)
    assert tr.t == [0.0] and tr.phi == [0.0]
    tr = track_growth(spec, Polyline.segment(), NoisePath(3, 0.01, spec.d), 5.0)
    a = tr.as_arrays()
    assert np.all(np.diff(a["phi"]) >= 0)
    assert np.all(np.diff(a["phi_orig"]) >= 0)
    assert np.all(a["phi_orig"] <= a["phi"] + 1e-15)
    assert np.all(a["length"] > 0)
    assert a["t"][-1] == pytest.approx(5.0)


def test_reach_brackets_phi(spec):
    # without refinement every vertex is original, so reach <= Phi <= reach + diam
    c0 = Polyline.segment(delta_max=10.0)
    tr = track_growth(spec, c0, NoisePath(8, 0.01, spec.d), 5.0)
    a = tr.as_arrays()
    assert a["n_vertices"][-1] == len(c0)
    assert a["reach"][0] == 0.0
    assert np.all(np.diff(a["reach"]) >= 0)
    assert np.all(a["reach"] <= a["phi_orig"] + 1e-12)
    assert np.all(a["phi_orig"] <= a["reach"] + tr.base_diameter + 1e-12)
    assert tr.base_diameter == pytest.approx(1.0)


def test_diameter_sanity_band(spec):
    noise = NoisePath(6, 0.01, spec.d)
    c = Polyline.segment()
    for s in range(100):
        inc = noise.increment(s)
        out = advect_step(spec, c, inc, 0.01)
        bound = 2 * (spec.sup_speed[0] * 0.01 + spec.sup_speed[1:] @ np.abs(inc))
        assert out.diameter() <= c.diameter() + bound + 1e-12
        c = out


def _rows(c):
    return {tuple(v) for v in c.vertices}


@pytest.mark.parametrize("pruner", [TargetPruner(1.0, 20), RadialPruner(1.0, 10, 8)])
def test_pruned_is_subset_of_unpruned(spec, pruner):
    noise = NoisePath(13, 0.01, spec.d)
    tg = [Target.point((3.0, 0.0), 0.5)]
    full = CurveRun(spec, Polyline.segment(), noise, targets=tg)
    cut = CurveRun(spec, Polyline.segment(), noise, pruner=pruner, targets=tg)
    full.advance(500)
    cut.advance(500)
    assert cut.n_vertices < full.n_vertices
    assert _rows(cut.curve) <= _rows(full.curve)


def test_target_distance_line():
    c = Polyline.segment()
    t = Target.line((0.0, 1.0), 2.0, 0.5)
    assert t.distance(c) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        Target.point((0, 0), 0.0)


def test_curve_csv(tmp_path):
    p = tmp_path / "c.csv"
    write_curve_csv(p, [Polyline.segment(delta_max=0.5)])
    lines = p.read_text().splitlines()
    assert lines[0].split(",")[:2] == ["t", "vertex"]
    assert len(lines) == 1 + 3
