"""Stable norm, limit shape and passage statistics.

Two routes to the limit shape are provided. The norm route measures passage
times to targets ``t v`` on a ladder of distances, extrapolates
``E tau(t v) / t = |v| + b / t`` and takes ``{v : |v| <= 1}``. The swept
route reads the radial extent of the swept set ``W_T / T`` directly.

Long runs use pruning (:mod:`stochshape.pruning`), which makes passage times
upper bounds and swept sets lower bounds of the exact ones. Routes that are
compared with each other should use the same pruning policy; every result
records the policy it was produced with.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull
from scipy.stats import binomtest
from sklearn.base import BaseEstimator

from .curve_tracker import BudgetExhausted, CurveRun, Polyline, Target
from .field_model import StreamSpec
from .flow_integrator import DEFAULT_H, Integrator, NoisePath, n_steps_for, realization_seed
from .pruning import RadialPruner, TargetPruner
from .swept_set import OccupancyGrid

DEFAULT_LADDER = (10.0, 20.0, 40.0)
DEFAULT_DIRECTIONS = 32
DEFAULT_N = 50
UNRELIABLE_FRACTION = 0.05
Z95 = 1.959963984540054


def default_survey_pruner() -> TargetPruner:
    return TargetPruner(lag=3.0, cap=100, every=4)


def default_sweep_pruner(n_bins: int = DEFAULT_DIRECTIONS) -> RadialPruner:
    return RadialPruner(lag=3.0, cap=100, n_bins=n_bins, every=4)


def directions(m: int, offset: float = 0.0) -> np.ndarray:
    """``m`` equally spaced unit vectors starting at angle ``offset``."""
    ang = offset + 2 * np.pi * np.arange(m) / m
    return np.c_[np.cos(ang), np.sin(ang)]


def _map(fn, args, jobs: int):
    if jobs <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*args)))


# ---------------------------------------------------------------------------
# norm estimates

@dataclass
class NormEstimate:
    """Extrapolated passage-time norm in one direction (or to one line).

    ``samples[i, k]`` is the passage time of realization ``i`` to rung
    ``ladder[k]`` (``nan`` when not reached). ``per_realization`` holds each
    realization's extrapolated value (``nan`` for rows with a missing rung). The fit ``tau / t = value + b / t``
    is weighted least squares on the rung means; ``stderr`` comes from the
    same linear combination applied to every realization, so correlations
    between rungs of one run are accounted for.
    """

    direction: np.ndarray
    ladder: np.ndarray
    samples: np.ndarray
    R: float
    value: float
    stderr: float
    b: float
    rung_mean: np.ndarray
    rung_se: np.ndarray
    coef: np.ndarray
    per_realization: np.ndarray
    residual: float
    subadditivity_defect: float
    not_reached: float
    kind: str = "point"

    @property
    def unreliable(self) -> bool:
        return bool(self.not_reached > UNRELIABLE_FRACTION or not np.isfinite(self.value))

    @property
    def n_used(self) -> int:
        return int(np.isfinite(self.per_realization).sum())

    def ci(self, z: float = Z95) -> tuple[float, float]:
        return self.value - z * self.stderr, self.value + z * self.stderr

    def ladder_bound_ok(self, C: float = 0.0, z: float = 2.0) -> bool:
        """``value <= min_k (mean tau(t_k) + C) / t_k + z stderr`` for an additive constant ``C``."""
        m = (self.rung_mean * self.ladder + C) / self.ladder
        return bool(self.value <= np.nanmin(m) + z * self.stderr)

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "direction": [float(x) for x in self.direction],
            "R": self.R,
            "ladder": self.ladder.tolist(),
            "value": self.value,
            "stderr": self.stderr,
            "b": self.b,
            "rung_mean": self.rung_mean.tolist(),
            "rung_se": self.rung_se.tolist(),
            "residual": self.residual,
            "subadditivity_defect": self.subadditivity_defect,
            "not_reached": self.not_reached,
            "unreliable": self.unreliable,
            "n_used": self.n_used,
        }


def fit_norm(samples, ladder, direction=(1.0, 0.0), R: float = 1.0,
             kind: str = "point") -> NormEstimate:
    """Fit ``tau / t = value + b / t`` from passage samples of shape ``(n, len(ladder))``."""
    tau = np.asarray(samples, dtype=float)
    lad = np.asarray(ladder, dtype=float)
    if tau.ndim != 2 or tau.shape[1] != lad.size:
        raise ValueError("samples must have one column per ladder rung")
    if np.any(np.diff(lad) <= 0):
        raise ValueError("ladder must be increasing")
    not_reached = float(np.isnan(tau).mean()) if tau.size else 1.0
    y = tau / lad
    full = np.all(np.isfinite(y), axis=1)
    yc = y[full]
    n = len(yc)
    nan = float("nan")
    mean = np.nanmean(y, axis=0) if np.isfinite(y).any() else np.full(lad.size, nan)
    se = np.full(lad.size, nan)
    if n >= 2:
        se = yc.std(axis=0, ddof=1) / math.sqrt(n)
    per = np.full(tau.shape[0], nan)
    if n < 2 or lad.size < 2:
        if lad.size:
            per[full] = yc[:, -1]
        value = float(yc[:, -1].mean()) if n and lad.size else nan
        err = float(yc[:, -1].std(ddof=1) / math.sqrt(n)) if n >= 2 and lad.size else nan
        return NormEstimate(np.asarray(direction, float), lad, tau, float(R), value, err, 0.0,
                            mean, se, np.eye(lad.size)[-1] if lad.size else np.zeros(0),
                            per, nan, _subadd(tau, lad), not_reached, kind)
    X = np.c_[np.ones(lad.size), 1.0 / lad]
    w = 1.0 / np.maximum(yc.var(axis=0, ddof=1) / n, 1e-300)
    XtW = X.T * w
    P = np.linalg.solve(XtW @ X, XtW)      # (2, k): parameters = P @ rung means
    per[full] = yc @ P[0]
    value = float(per[full].mean())
    b = float((yc.mean(axis=0)) @ P[1])
    err = float(per[full].std(ddof=1) / math.sqrt(n))
    fitted = X @ np.array([value, b])
    resid = yc.mean(axis=0) - fitted
    dof = max(lad.size - 2, 1)
    chi2 = float(np.sum(w * resid ** 2) / dof) if lad.size > 2 else 0.0
    return NormEstimate(np.asarray(direction, float), lad, tau, float(R), value, err, b,
                        yc.mean(axis=0), se, P[0], per, chi2, _subadd(tau, lad),
                        not_reached, kind)


def _subadd(tau, lad) -> float:
    """Largest ``E tau(t2) - E tau(t1) - E tau(t2 - t1)`` over ladder pairs whose difference is a rung."""
    with np.errstate(all="ignore"):
        m = np.nanmean(tau, axis=0) if np.isfinite(tau).any() else None
    if m is None:
        return float("nan")
    worst = -np.inf
    for i in range(lad.size):
        for j in range(i + 1, lad.size):
            k = np.flatnonzero(np.isclose(lad, lad[j] - lad[i]))
            if k.size:
                worst = max(worst, m[j] - m[i] - m[k[0]])
    return float(worst) if np.isfinite(worst) else float("nan")


# ---------------------------------------------------------------------------
# passage surveys

@dataclass
class PassageSurvey:
    """Passage times of ``n`` runs to a common set of targets.

    Point targets are ``t u_j`` for every direction ``u_j``, rung ``t`` and
    radius in ``radii``; line targets are ``{x . n_l = t}`` with radius
    ``line_radius``. Each realization is one run that carries all targets, so
    estimates for different targets are positively correlated.
    """

    directions: np.ndarray
    ladder: np.ndarray
    radii: np.ndarray
    point_tau: np.ndarray          # (n, n_radii, n_ladder, m)
    line_normals: np.ndarray
    line_radius: float
    line_tau: np.ndarray           # (n, n_lines, n_ladder)
    T_max: float
    seeds: list
    exhausted: np.ndarray
    max_step_disp: float
    wall: float
    pruner: dict | None
    grids: list | None = None

    @property
    def n(self) -> int:
        return self.point_tau.shape[0]

    def norm(self, j: int, r: int = 0) -> NormEstimate:
        return fit_norm(self.point_tau[:, r, :, j], self.ladder, self.directions[j],
                        float(self.radii[r]))

    def norms(self, r: int = 0) -> list[NormEstimate]:
        return [self.norm(j, r) for j in range(len(self.directions))]

    def line_norm(self, l: int) -> NormEstimate:
        return fit_norm(self.line_tau[:, l], self.ladder, self.line_normals[l],
                        self.line_radius, kind="line")


def _survey_one(spec, curve0, seed, targets, n_steps, pruner, integ, grid_steps, eta):
    t0 = time.perf_counter()
    noise = NoisePath(seed, integ.h, spec.d)
    grid = None
    if grid_steps is not None:
        v = curve0.vertices
        grid = OccupancyGrid(eta, (v[:, 0].min() - 1, v[:, 1].min() - 1,
                                   v[:, 0].max() + 1, v[:, 1].max() + 1))
    run = CurveRun(spec, curve0, noise, integ, pruner, targets=targets, grid=grid,
                   stop_when_reached=grid_steps is None)
    exhausted = False
    try:
        rest = n_steps
        if grid_steps is not None:
            run.advance(grid_steps)
            grid = grid.at_time(run.t)
            run.grid = None
            run.stop_when_reached = True
            rest = n_steps - grid_steps
        if rest > 0 and not run.all_reached:
            run.advance(rest)
    except BudgetExhausted:
        exhausted = True
    tau = np.array([np.nan if run.tau(j) is None else run.tau(j) for j in range(len(targets))])
    return tau, exhausted, run.max_step_disp, time.perf_counter() - t0, grid


def passage_survey(spec: StreamSpec, dirs=None, ladder=DEFAULT_LADDER, radii=(1.0,),
                   n: int = DEFAULT_N, master_seed: int = 0, line_normals=(),
                   line_radius: float = 1.0, curve0: Polyline | None = None,
                   T_max: float | None = None, pruner=None, h: float = DEFAULT_H,
                   integ: Integrator | None = None, grid_T: float | None = None,
                   eta: float = 0.1, jobs: int = 1) -> PassageSurvey:
    """Run ``n`` realizations carrying point targets (directions x ladder x radii) and line targets.

    ``T_max`` defaults to ``12 max(ladder)``, well beyond the expected passage
    time, and is rounded up to a whole number of steps. With ``grid_T`` set, the swept set of each run up to ``grid_T`` is
    also recorded (in ``grids``). Realization ``i`` uses
    ``realization_seed(master_seed, i)``.
    """
    dirs = directions(DEFAULT_DIRECTIONS) if dirs is None else np.atleast_2d(np.asarray(dirs, float))
    dirs = dirs.reshape(-1, 2)
    dirs = dirs / np.linalg.norm(dirs, axis=1)[:, None]
    lad = np.asarray(ladder, dtype=float)
    if np.any(np.diff(lad) <= 0) or lad[0] <= 0:
        raise ValueError("ladder must be positive and increasing")
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    normals = np.asarray(line_normals, dtype=float).reshape(-1, 2)
    if n < 2:
        raise ValueError("need at least two realizations")
    curve0 = curve0 if curve0 is not None else Polyline.segment()
    T_max = 12.0 * lad[-1] if T_max is None else float(T_max)
    integ = integ or Integrator(h=h)
    pruner = default_survey_pruner() if pruner is None else (pruner or None)
    targets = [Target.point(t * u, R) for R in radii for t in lad for u in dirs]
    targets += [Target.line(nl, t, line_radius) for nl in normals for t in lad]
    seeds = [realization_seed(master_seed, i) for i in range(n)]
    n_steps = math.ceil(T_max / integ.h - 1e-9)
    T_max = n_steps * integ.h
    grid_steps = None if grid_T is None else min(n_steps_for(grid_T, integ.h), n_steps)
    t0 = time.perf_counter()
    out = _map(_survey_one, [(spec, curve0, s, targets, n_steps, pruner, integ, grid_steps, eta)
                             for s in seeds], jobs)
    tau = np.array([o[0] for o in out])
    npt = len(radii) * len(lad) * len(dirs)
    return PassageSurvey(
        dirs, lad, radii, tau[:, :npt].reshape(n, len(radii), len(lad), len(dirs)),
        normals, float(line_radius), tau[:, npt:].reshape(n, len(normals), len(lad)),
        T_max, seeds, np.array([o[1] for o in out]), float(max(o[2] for o in out)),
        time.perf_counter() - t0, pruner.describe() if pruner else None,
        [o[4] for o in out] if grid_T is not None else None)


def estimate_norm(spec: StreamSpec, v, t_ladder=DEFAULT_LADDER, n_per_t: int = DEFAULT_N,
                  R: float = 1.0, master_seed: int = 0, **kw) -> NormEstimate:
    """Passage-time norm in direction ``v``; all rungs are carried by each realization."""
    if n_per_t < 20:
        raise ValueError("n_per_t must be at least 20")
    s = passage_survey(spec, [v], t_ladder, (R,), n_per_t, master_seed, **kw)
    return s.norm(0)


def line_passage(spec: StreamSpec, normal, t_ladder=DEFAULT_LADDER, n_per_t: int = DEFAULT_N,
                 R: float = 1.0, master_seed: int = 0, **kw) -> NormEstimate:
    """Passage-time norm ``rho`` to the lines ``{x . normal = t}``.

    The lines are the only targets of the survey. To compare with point
    norms under the same pruning, put both in one :func:`passage_survey`.
    """
    if n_per_t < 20:
        raise ValueError("n_per_t must be at least 20")
    s = passage_survey(spec, np.zeros((0, 2)), t_ladder, (R,), n_per_t, master_seed,
                       line_normals=[normal], line_radius=R, **kw)
    return s.line_norm(0)


def point_norm_on_line(norms: list[NormEstimate], normal) -> tuple[float, float, int]:
    """``min`` over sampled directions ``u`` with ``u . n > 0`` of ``|u| / (u . n)``.

    By homogeneity ``|u| / (u . n)`` is the norm of the point where the ray
    through ``u`` meets the line ``{x . n = 1}``. Returns the minimum, its
    standard error and the index of the minimizing direction.
    """
    nrm = np.asarray(normal, float) / np.linalg.norm(normal)
    best, se, arg = np.inf, np.nan, -1
    for j, e in enumerate(norms):
        c = float(e.direction @ nrm)
        if c <= 1e-9 or not np.isfinite(e.value):
            continue
        val = e.value / c
        if val < best:
            best, se, arg = val, e.stderr / c, j
    return float(best), float(se), arg


# ---------------------------------------------------------------------------
# shapes

def _point_in_polygon(p: np.ndarray, poly: np.ndarray) -> np.ndarray:
    x, y = p[:, 0:1], p[:, 1:2]
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    cond = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return (np.sum(cond & (x < xi), axis=1) % 2) == 1


def _dist_to_boundary(p: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a
    L2 = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    ap = p[:, None, :] - a[None, :, :]
    s = np.clip(np.einsum("nij,ij->ni", ap, ab) / L2, 0.0, 1.0)
    d = ap - s[..., None] * ab[None]
    return np.sqrt(np.einsum("nij,nij->ni", d, d)).min(axis=1)


def _densify(poly: np.ndarray, per_edge: int) -> np.ndarray:
    a = poly
    b = np.roll(poly, -1, axis=0)
    s = np.arange(per_edge) / per_edge
    return (a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]).reshape(-1, 2)


def hausdorff(P, Q, per_edge: int = 64) -> float:
    """Hausdorff distance between the closed regions bounded by polygons ``P`` and ``Q``.

    The supremum over each boundary is taken on a dense sample
    (``per_edge`` points per edge); distances from the samples are exact.
    """
    P = np.asarray(P, float)
    Q = np.asarray(Q, float)

    def directed(A, B):
        s = _densify(A, per_edge)
        d = _dist_to_boundary(s, B)
        d[_point_in_polygon(s, B)] = 0.0
        return float(d.max())

    return max(directed(P, Q), directed(Q, P))


def convex_hull_polygon(P) -> np.ndarray:
    P = np.asarray(P, float)
    return P[ConvexHull(P).vertices]


@dataclass
class ShapeEstimate:
    """Star-shaped estimate of the limit shape from radii along fixed directions."""

    angles: np.ndarray
    radius: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    provenance: str
    unreliable: np.ndarray = None
    spread: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.unreliable is None:
            self.unreliable = np.zeros(len(self.angles), dtype=bool)
        if np.any(~np.isfinite(self.radius)) or np.any(self.radius <= 0):
            raise ValueError("shape radii must be finite and positive")

    @property
    def polygon(self) -> np.ndarray:
        return self.radius[:, None] * np.c_[np.cos(self.angles), np.sin(self.angles)]

    @property
    def mean_radius(self) -> float:
        return float(self.radius.mean())

    @property
    def ci_halfwidth(self) -> np.ndarray:
        return 0.5 * (self.ci_hi - self.ci_lo)

    @property
    def convexity_defect(self) -> float:
        """Hausdorff distance to the convex hull, relative to the mean radius."""
        P = self.polygon
        return hausdorff(P, convex_hull_polygon(P)) / self.mean_radius

    def support(self, angles=None) -> np.ndarray:
        """Support function ``max_x x . u`` of the polygon along ``angles`` (default: its own)."""
        a = self.angles if angles is None else np.asarray(angles, float)
        u = np.c_[np.cos(a), np.sin(a)]
        return (self.polygon @ u.T).max(axis=0)

    def hausdorff(self, other: "ShapeEstimate") -> float:
        return hausdorff(self.polygon, other.polygon)

    def radius_at(self, angles) -> np.ndarray:
        """Radius along arbitrary angles, interpolating ``1 / radius`` linearly in angle."""
        a = np.asarray(angles, float)
        order = np.argsort(self.angles)
        ang = self.angles[order]
        inv = 1.0 / self.radius[order]
        ang = np.r_[ang[-1] - 2 * np.pi, ang, ang[0] + 2 * np.pi]
        inv = np.r_[inv[-1], inv, inv[0]]
        return 1.0 / np.interp(np.mod(a - ang[1], 2 * np.pi) + ang[1], ang, inv)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("angle,radius,ci_lo,ci_hi,unreliable\n")
            for a, r, lo, hi, u in zip(self.angles, self.radius, self.ci_lo, self.ci_hi,
                                       self.unreliable):
                fh.write(",".join(repr(float(x)) for x in (a, r, lo, hi)) + f",{int(u)}\n")

    def as_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "angles": self.angles.tolist(),
            "radius": self.radius.tolist(),
            "ci_lo": self.ci_lo.tolist(),
            "ci_hi": self.ci_hi.tolist(),
            "unreliable": self.unreliable.astype(bool).tolist(),
            "mean_radius": self.mean_radius,
            "convexity_defect": self.convexity_defect,
            **self.info,
        }


def shape_from_norms(norms: list[NormEstimate], info: dict | None = None) -> ShapeEstimate:
    """Boundary vertices ``u_j / |u_j|``; the CI maps the norm CI through ``1 / x``."""
    ang = np.array([math.atan2(e.direction[1], e.direction[0]) for e in norms])
    val = np.array([e.value for e in norms])
    se = np.array([e.stderr for e in norms])
    lo_n = val - Z95 * se
    hi_n = val + Z95 * se
    return ShapeEstimate(np.mod(ang, 2 * np.pi), 1.0 / val,
                         1.0 / hi_n, np.where(lo_n > 0, 1.0 / np.maximum(lo_n, 1e-300), np.inf),
                         "norm-based", np.array([e.unreliable for e in norms]),
                         info=dict(info or {}))


def build_shape_from_norm(spec: StreamSpec, m_directions: int = DEFAULT_DIRECTIONS,
                          t_ladder=DEFAULT_LADDER, n_per_t: int = DEFAULT_N, R: float = 1.0,
                          master_seed: int = 0, survey: PassageSurvey | None = None,
                          radius_index: int = 0, **kw) -> ShapeEstimate:
    """Norm-based shape on ``m_directions`` equally spaced directions.

    Pass an existing ``survey`` to reuse its passage times (``radius_index``
    selects among its target radii).
    """
    if survey is None:
        if m_directions < 8:
            raise ValueError("m_directions must be at least 8")
        survey = passage_survey(spec, directions(m_directions), t_ladder, (R,), n_per_t,
                                master_seed, **kw)
    norms = survey.norms(radius_index)
    return shape_from_norms(norms, {"R": float(survey.radii[radius_index]),
                                    "ladder": survey.ladder.tolist(), "n": survey.n,
                                    "pruner": survey.pruner,
                                    "max_step_disp": survey.max_step_disp})


@dataclass
class SweptSurvey:
    """Radial extents ``(n, m)`` of ``n`` swept sets at time ``T``."""

    T: float
    eta: float
    dilation: float
    extents: np.ndarray
    grids: list
    seeds: list
    exhausted: np.ndarray
    max_step_disp: float
    wall: float
    pruner: dict | None

    @property
    def n(self) -> int:
        return self.extents.shape[0]


def _sweep_one(spec, curve0, seed, T, eta, pruner, integ, m, dilation, keep_grid):
    t0 = time.perf_counter()
    noise = NoisePath(seed, integ.h, spec.d)
    v = curve0.vertices
    grid = OccupancyGrid(eta, (v[:, 0].min() - 1, v[:, 1].min() - 1,
                               v[:, 0].max() + 1, v[:, 1].max() + 1))
    run = CurveRun(spec, curve0, noise, integ, pruner, grid=grid)
    exhausted = False
    try:
        run.advance(n_steps_for(T, integ.h))
    except BudgetExhausted:
        exhausted = True
    g = grid.dilate(dilation) if dilation > 0 else grid
    ext = g.radial_extent(m)
    return ext, exhausted, run.max_step_disp, time.perf_counter() - t0, (grid if keep_grid else None)


def swept_survey(spec: StreamSpec, n: int = DEFAULT_N, T: float = 50.0, eta: float = 0.1,
                 master_seed: int = 0, curve0: Polyline | None = None,
                 m: int = DEFAULT_DIRECTIONS, dilation: float = 0.0, pruner=None,
                 h: float = DEFAULT_H, integ: Integrator | None = None,
                 keep_grids: bool = True, jobs: int = 1) -> SweptSurvey:
    """Sweep ``n`` realizations to time ``T`` and record radial extents on ``m`` bins."""
    integ = integ or Integrator(h=h)
    curve0 = curve0 if curve0 is not None else Polyline.segment()
    pruner = default_sweep_pruner(m) if pruner is None else (pruner or None)
    seeds = [realization_seed(master_seed, i) for i in range(n)]
    t0 = time.perf_counter()
    out = _map(_sweep_one, [(spec, curve0, s, T, eta, pruner, integ, m, dilation, keep_grids)
                            for s in seeds], jobs)
    return SweptSurvey(float(T), float(eta), float(dilation), np.array([o[0] for o in out]),
                       [o[4] for o in out], seeds, np.array([o[1] for o in out]),
                       float(max(o[2] for o in out)), time.perf_counter() - t0,
                       pruner.describe() if pruner else None)


MIN_SWEEP_T = 5.0


def shape_from_swept(s: SweptSurvey) -> ShapeEstimate:
    ok = ~s.exhausted
    if not ok.any():
        raise BudgetExhausted("every sweep exhausted its vertex budget", None)
    r = s.extents[ok] / s.T
    n = r.shape[0]
    mean = np.nanmean(r, axis=0)
    sd = np.nanstd(r, axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
    se = sd / math.sqrt(max(n, 1))
    m = r.shape[1]
    ang = 2 * np.pi * np.arange(m) / m
    return ShapeEstimate(ang, mean, mean - Z95 * se, mean + Z95 * se, "swept-based",
                         np.isnan(r).mean(axis=0) > UNRELIABLE_FRACTION, sd / mean,
                         {"T": s.T, "eta": s.eta, "dilation": s.dilation, "n": n,
                          "exhausted": int(s.exhausted.sum()), "pruner": s.pruner,
                          "max_step_disp": s.max_step_disp})


def build_shape_from_swept(spec: StreamSpec, n: int = DEFAULT_N, T: float = 50.0,
                           R: float = 0.0, eta: float = 0.1, master_seed: int = 0,
                           **kw) -> ShapeEstimate:
    """Swept-based shape: mean over realizations of the radial extent of ``W_T`` (dilated by ``R``) over ``T``.

    ``spread`` holds the per-direction relative standard deviation across
    realizations, an empirical version of the sandwich tolerance.
    """
    if n < 20:
        raise ValueError("n must be at least 20")
    if T < MIN_SWEEP_T:
        raise ValueError(f"T = {T} is too short for a non-degenerate scaled shape "
                         f"(need T >= {MIN_SWEEP_T})")
    return shape_from_swept(swept_survey(spec, n, T, eta, master_seed, dilation=R, **kw))


def d4_defect(shape: ShapeEstimate) -> float:
    """Largest relative change of the radius under quarter turns and reflection in the x axis.

    Requires the directions to be invariant under the group (``m`` divisible by 4).
    """
    m = len(shape.angles)
    if m % 4:
        raise ValueError("direction count must be divisible by 4")
    r = shape.radius
    worst = 0.0
    for k in range(1, 4):
        worst = max(worst, np.max(np.abs(np.roll(r, k * m // 4) - r)))
    worst = max(worst, np.max(np.abs(r[(-np.arange(m)) % m] - r)))
    return float(worst / r.mean())


# ---------------------------------------------------------------------------
# passage tails and occupation

def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(int(k), int(n)).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class SurvivalRow:
    d: float
    beta: float
    survived: int
    n: int
    p: float
    ci_lo: float
    ci_hi: float


def survival_table(tau, d_list, betas) -> list[SurvivalRow]:
    """Empirical ``P(tau > beta d)`` per distance and ``beta``; ``nan`` (not reached) counts as surviving."""
    tau = np.asarray(tau, float)
    rows = []
    for k, d in enumerate(d_list):
        col = tau[:, k]
        for beta in np.atleast_1d(betas):
            thr = beta * d
            surv = int(np.sum(np.isnan(col) | (col > thr)))
            lo, hi = wilson_interval(surv, len(col))
            rows.append(SurvivalRow(float(d), float(beta), surv, len(col), surv / len(col), lo, hi))
    return rows


def passage_tail(spec: StreamSpec, d_list, beta, n: int = 100, R: float = 1.0,
                 direction=(1.0, 0.0), master_seed: int = 0, T_max: float | None = None,
                 **kw) -> tuple[list[SurvivalRow], PassageSurvey]:
    """Survival ``P(tau^R(d v) > beta d)`` for every ``d`` in ``d_list``.

    Runs continue until ``T_max`` (default ``max(beta) max(d)``), so that a
    sample not reached by then is known to survive.
    """
    d = np.asarray(d_list, float)
    if np.any(np.diff(d) <= 0):
        raise ValueError("d_list must be increasing")
    if n < 50:
        raise ValueError("n must be at least 50")
    betas = np.atleast_1d(np.asarray(beta, float))
    T_needed = float(betas.max() * d[-1])
    T_max = T_needed if T_max is None else float(T_max)
    if T_max < T_needed:
        raise ValueError("T_max must cover beta * max(d)")
    s = passage_survey(spec, [direction], d, (R,), n, master_seed, T_max=T_max, **kw)
    return survival_table(s.point_tau[:, 0, :, 0], d, betas), s


def occupation_record(spec: StreamSpec, A, T: float, noise: NoisePath,
                      curve0: Polyline | None = None, pruner=None,
                      integ: Integrator | None = None) -> np.ndarray:
    """Distance from the curve to ``A`` after every step up to ``T``."""
    curve0 = curve0 if curve0 is not None else Polyline.segment()
    tgt = Target.point(A, 1e-9)
    pruner = TargetPruner(lag=3.0, cap=100, every=1) if pruner is None else (pruner or None)
    run = CurveRun(spec, curve0, noise, integ, pruner, targets=[tgt], track=0)
    run.advance(n_steps_for(T, noise.h))
    return run.distance_record()


def occupation_fraction(spec: StreamSpec, A, R_star, T: float, noise: NoisePath, **kw):
    """Fraction of sampled times ``0 < t <= T`` with ``dist(curve_t, A) <= R_star``.

    ``R_star`` may be an array; the fractions then come from one run.
    """
    if T < 10:
        raise ValueError("T must be at least 10")
    rec = occupation_record(spec, A, T, noise, **kw)
    r = np.asarray(R_star, float)
    frac = (rec[None, :] <= r.reshape(-1, 1)).mean(axis=1)
    return float(frac[0]) if r.ndim == 0 else frac


def ball_inside(grid: OccupancyGrid, radius: float, R: float = 1.0, center=(0.0, 0.0)) -> bool:
    """Whether the disk of ``radius`` about ``center`` lies in ``grid`` dilated by ``R``."""
    return grid.dilate(R).inscribed_radius(center) >= radius


# ---------------------------------------------------------------------------
# estimator interface

class StableNormEstimator(BaseEstimator):
    """Estimator wrapper: ``fit(directions)`` runs a passage survey, ``predict(V)`` returns norms.

    ``predict`` uses positive homogeneity and interpolates ``|u|`` linearly in
    angle between fitted directions.
    """

    def __init__(self, spec=None, t_ladder=DEFAULT_LADDER, n_per_t=DEFAULT_N, R=1.0,
                 master_seed=0, pruner=None, h=DEFAULT_H, jobs=1):
        self.spec = spec
        self.t_ladder = t_ladder
        self.n_per_t = n_per_t
        self.R = R
        self.master_seed = master_seed
        self.pruner = pruner
        self.h = h
        self.jobs = jobs

    def fit(self, X=None, y=None):
        from .field_model import default_field_family
        spec = self.spec if self.spec is not None else default_field_family()
        X = directions(DEFAULT_DIRECTIONS) if X is None else np.atleast_2d(np.asarray(X, float))
        self.survey_ = passage_survey(spec, X, self.t_ladder, (self.R,), self.n_per_t,
                                      self.master_seed, pruner=self.pruner, h=self.h,
                                      jobs=self.jobs)
        self.norms_ = self.survey_.norms(0)
        self.shape_ = shape_from_norms(self.norms_)
        return self

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        ang = np.arctan2(X[:, 1], X[:, 0])
        return np.linalg.norm(X, axis=1) / self.shape_.radius_at(ang)


class SweptShapeEstimator(BaseEstimator):
    """Estimator wrapper for the swept route: ``predict(V)`` returns the gauge of ``W_T / T``."""

    def __init__(self, spec=None, n=DEFAULT_N, T=50.0, eta=0.1, m=DEFAULT_DIRECTIONS,
                 master_seed=0, pruner=None, h=DEFAULT_H, jobs=1):
        self.spec = spec
        self.n = n
        self.T = T
        self.eta = eta
        self.m = m
        self.master_seed = master_seed
        self.pruner = pruner
        self.h = h
        self.jobs = jobs

    def fit(self, X=None, y=None):
        """``X`` is an optional initial curve (a :class:`Polyline` or vertex array)."""
        from .field_model import default_field_family
        spec = self.spec if self.spec is not None else default_field_family()
        curve0 = X if isinstance(X, Polyline) or X is None else Polyline(np.asarray(X, float))
        self.survey_ = swept_survey(spec, self.n, self.T, self.eta, self.master_seed, curve0,
                                    self.m, pruner=self.pruner, h=self.h, jobs=self.jobs)
        self.shape_ = shape_from_swept(self.survey_)
        return self

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        ang = np.arctan2(X[:, 1], X[:, 0])
        return np.linalg.norm(X, axis=1) / self.shape_.radius_at(ang)
