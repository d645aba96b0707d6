"""Polyline images of a curve under the flow.

A :class:`Polyline` stores plane vertices together with a per-vertex ``link``
flag (``link[i]`` is true when the segment ``i -> i+1`` belongs to the curve),
the pre-image proxy ``born`` used for the growth functional, and an ``orig``
flag marking vertices of the initial discretisation. Without pruning the curve
is a single piece and every ``link`` except the last is set.

Optional frontier pruning (see :mod:`stochshape.pruning`) removes vertices
that cannot influence a given observable. It splits the curve into several
pieces; a pruned curve is always an exact subset of the unpruned one under
the same noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import _engine as E
from . import _kernels as K
from .field_model import StreamSpec
from .flow_integrator import Integrator, NoisePath, n_steps_for

DEFAULT_DELTA_MAX = 0.05
DEFAULT_VERTEX_BUDGET = 2_000_000
BRUTE_FORCE_DIAMETER = 2048


class BudgetExhausted(RuntimeError):
    """Refinement needed more vertices than the budget allows.

    ``partial`` holds the curve as it was before the failing step, ``t`` its time.
    """

    def __init__(self, message: str, partial: "Polyline"):
        super().__init__(message)
        self.partial = partial
        self.t = partial.t


class RefinementError(RuntimeError):
    """A stretched segment could not be split further in floating point."""


@dataclass
class Polyline:
    vertices: np.ndarray
    link: np.ndarray = None
    born: np.ndarray = None
    orig: np.ndarray = None
    t: float = 0.0
    delta_max: float = DEFAULT_DELTA_MAX
    vertex_budget: int = DEFAULT_VERTEX_BUDGET

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] == 0:
            raise ValueError("vertices must be a non-empty (n, 2) array")
        n = v.shape[0]
        self.vertices = v
        if self.link is None:
            self.link = np.ones(n, dtype=np.bool_)
            self.link[-1] = False
        self.link = np.ascontiguousarray(self.link, dtype=np.bool_)
        if self.link.shape != (n,):
            raise ValueError("link must have one flag per vertex")
        self.link[-1] = False
        self.born = v.copy() if self.born is None else np.ascontiguousarray(self.born, dtype=float)
        self.orig = (np.ones(n, dtype=np.bool_) if self.orig is None
                     else np.ascontiguousarray(self.orig, dtype=np.bool_))
        if not self.delta_max > 0:
            raise ValueError("delta_max must be positive")
        if n > self.vertex_budget:
            raise ValueError(f"{n} vertices exceed the budget {self.vertex_budget}")

    # construction -----------------------------------------------------------
    @classmethod
    def segment(cls, a=(-0.5, 0.0), b=(0.5, 0.0), delta_max: float = DEFAULT_DELTA_MAX,
                vertex_budget: int = DEFAULT_VERTEX_BUDGET) -> "Polyline":
        """Straight segment from ``a`` to ``b`` split into pieces of length at most ``delta_max``.

        The default is the unit horizontal segment centred at the origin.
        """
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / delta_max)))
        s = np.linspace(0.0, 1.0, n + 1)[:, None]
        return cls((1 - s) * a + s * b, delta_max=delta_max, vertex_budget=vertex_budget)

    @classmethod
    def arc(cls, center=(0.0, 0.0), radius: float = 1.0, theta0: float = -np.pi / 4,
            theta1: float = np.pi / 4, delta_max: float = DEFAULT_DELTA_MAX,
            vertex_budget: int = DEFAULT_VERTEX_BUDGET) -> "Polyline":
        """Circular arc; chords are at most ``delta_max`` long."""
        span = abs(theta1 - theta0) * radius
        n = max(1, int(np.ceil(span / delta_max)))
        th = np.linspace(theta0, theta1, n + 1)
        c = np.asarray(center, dtype=float)
        return cls(c + radius * np.column_stack([np.cos(th), np.sin(th)]),
                   delta_max=delta_max, vertex_budget=vertex_budget)

    def copy(self) -> "Polyline":
        return Polyline(self.vertices.copy(), self.link.copy(), self.born.copy(),
                        self.orig.copy(), self.t, self.delta_max, self.vertex_budget)

    # observables ------------------------------------------------------------
    def __len__(self):
        return self.vertices.shape[0]

    @property
    def n_pieces(self) -> int:
        return int(len(self) - self.link[:-1].sum())

    def segment_lengths(self) -> np.ndarray:
        d = np.diff(self.vertices, axis=0)
        return np.hypot(d[:, 0], d[:, 1])[self.link[:-1]]

    def arc_length(self) -> float:
        return float(self.segment_lengths().sum())

    def max_segment(self) -> float:
        s = self.segment_lengths()
        return float(s.max()) if s.size else 0.0

    def diameter(self) -> float:
        return diameter(self.vertices)

    def is_long(self) -> bool:
        return self.diameter() >= 1.0

    def dist_to_point(self, A) -> float:
        return dist_to_point(self, A)

    def original_vertices(self) -> np.ndarray:
        return self.vertices[self.orig]

    def pieces(self) -> list[np.ndarray]:
        cuts = np.flatnonzero(~self.link) + 1
        return np.split(self.vertices, cuts[:-1])

    def restrict(self, keep: np.ndarray) -> "Polyline":
        """Sub-curve on the vertices where ``keep`` is true; segments touching a dropped vertex are cut."""
        keep = np.asarray(keep, dtype=np.bool_)
        if keep.all():
            return self
        if not keep.any():
            raise ValueError("restriction would remove every vertex")
        link = self.link & keep
        link[:-1] &= keep[1:]
        return Polyline(self.vertices[keep], link[keep], self.born[keep], self.orig[keep],
                        self.t, self.delta_max, self.vertex_budget)

    def to_rows(self):
        """``(t, vertex index, x, y)`` rows; pieces are separated by the ``link`` flag."""
        for i, (x, y) in enumerate(self.vertices):
            yield self.t, i, float(x), float(y)


def diameter(points) -> float:
    """Largest pairwise distance; exact brute force up to 2048 points, hull calipers above."""
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ValueError("diameter needs at least 2 vertices")
    if p.shape[0] > BRUTE_FORCE_DIAMETER:
        try:
            p = p[ConvexHull(p).vertices]
        except QhullError:
            # collinear or degenerate: the extreme points along the principal axis suffice
            c = p - p.mean(axis=0)
            axis = np.linalg.svd(c, full_matrices=False)[2][0]
            proj = c @ axis
            p = p[[np.argmin(proj), np.argmax(proj)]]
        return _calipers(p) if p.shape[0] > 3 else _brute_diameter(p)
    return _brute_diameter(p)


def _brute_diameter(p: np.ndarray) -> float:
    best = 0.0
    for i in range(p.shape[0] - 1):
        d = p[i + 1:] - p[i]
        best = max(best, float(np.max(d[:, 0] ** 2 + d[:, 1] ** 2)))
    return float(np.sqrt(best))


def _calipers(h: np.ndarray) -> float:
    # h: convex polygon in counter-clockwise order (as returned by qhull in 2-d)
    n = h.shape[0]

    def area2(i, j, k):
        return abs((h[j, 0] - h[i, 0]) * (h[k, 1] - h[i, 1])
                   - (h[j, 1] - h[i, 1]) * (h[k, 0] - h[i, 0]))

    best = 0.0
    j = 1
    for i in range(n):
        i2 = (i + 1) % n
        while area2(i, i2, (j + 1) % n) > area2(i, i2, j):
            j = (j + 1) % n
        for a in (i, i2):
            d = h[a] - h[j]
            best = max(best, float(d @ d))
    return float(np.sqrt(best))


def dist_to_point(curve: Polyline, A) -> float:
    """Minimum distance from ``A`` to the curve's segments (and isolated vertices)."""
    A = np.asarray(A, dtype=float)
    return float(K.min_dist_segments(curve.vertices, curve.link, A[0], A[1]))


def advect_step(spec: StreamSpec, curve: Polyline, incr, h: float,
                integ: Integrator | None = None, disp_out: np.ndarray | None = None) -> Polyline:
    """Advance every vertex with the same increments, then refine.

    A segment whose image is longer than ``delta_max`` gets the midpoint of
    its pre-step endpoints inserted and advanced with the same increments,
    recursively. Inserted vertices record that pre-step midpoint as ``born``.
    If given, ``disp_out[0]`` receives the largest displacement of a pre-step vertex.
    """
    integ = integ or Integrator(h=h)
    incr = np.ascontiguousarray(incr, dtype=float).reshape(-1)
    if incr.shape[0] != spec.d:
        raise ValueError(f"increment must have {spec.d} entries")
    n = len(curve)
    cap = curve.vertex_budget
    size = min(cap, max(2 * n + 16, 64))
    if disp_out is None:
        disp_out = np.zeros(1)
    while True:
        out_p = np.empty((size, 2))
        out_l = np.empty(size, dtype=np.bool_)
        out_b = np.empty((size, 2))
        out_o = np.empty(size, dtype=np.bool_)
        cnt = K.advect_refine(spec.packed, spec.sup_speed, spec.sup_jacobian, curve.vertices,
                              curve.link, curve.born, curve.orig, incr, float(h),
                              curve.delta_max, *integ.kernel_opts(), size,
                              out_p, out_l, out_b, out_o, disp_out)
        if cnt >= 0:
            break
        if cnt == -2:
            raise RefinementError(f"segment could not be refined at t={curve.t}")
        if size >= cap:
            raise BudgetExhausted(
                f"vertex budget {cap} exhausted at t={curve.t + h:.6g}", curve)
        size = min(cap, 4 * size)
    return Polyline(out_p[:cnt].copy(), out_l[:cnt].copy(), out_b[:cnt].copy(),
                    out_o[:cnt].copy(), curve.t + h, curve.delta_max, curve.vertex_budget)


@dataclass
class GrowthTrace:
    """Unit-time samples of diameter, arc length and the growth functional ``Phi_t``.

    ``phi`` is the running supremum over every vertex ever alive; inserted
    vertices use their insertion-time position as the starting point.
    ``phi_orig`` uses the original vertices only.

    ``reach`` is the running maximum over samples of the largest distance
    from a vertex to the initial curve. Since every vertex is the image of a
    point of that curve, ``reach <= Phi_t <= reach + diam(gamma_0)`` up to
    sampling, for the exact curve.
    """

    t: list = field(default_factory=list)
    diameter: list = field(default_factory=list)
    length: list = field(default_factory=list)
    n_vertices: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    phi_orig: list = field(default_factory=list)
    reach: list = field(default_factory=list)
    max_step_disp: float = 0.0
    budget_exhausted: bool = False
    base: tuple | None = field(default=None, repr=False)
    base_diameter: float = 0.0

    def append(self, curve: Polyline, phi: float, phi_orig: float):
        if self.base is None:
            v = curve.vertices
            a, b = v[:-1][curve.link[:-1]], v[1:][curve.link[:-1]]
            if a.shape[0] == 0:
                a = b = v
            self.base = (a, b)
            self.base_diameter = curve.diameter() if len(curve) > 1 else 0.0
        r = float(_dist_to_segments(curve.vertices, *self.base).max())
        self.reach.append(max(r, self.reach[-1]) if self.reach else r)
        self.t.append(float(curve.t))
        self.diameter.append(curve.diameter() if len(curve) > 1 else 0.0)
        self.length.append(curve.arc_length())
        self.n_vertices.append(len(curve))
        self.phi.append(float(phi))
        self.phi_orig.append(float(phi_orig))

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(getattr(self, k)) for k in
                ("t", "diameter", "length", "n_vertices", "phi", "phi_orig", "reach")}


def _dist_to_segments(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each row of ``p`` to the union of segments ``a[k] b[k]``."""
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    out = np.full(p.shape[0], np.inf)
    for k in range(a.shape[0]):
        ap = p - a[k]
        s = 0.0 if L2[k] == 0 else np.clip(ap @ ab[k] / L2[k], 0.0, 1.0)
        d = ap - np.multiply.outer(s, ab[k]) if np.ndim(s) else ap
        out = np.minimum(out, np.hypot(d[:, 0], d[:, 1]))
    return out


def _phi(curve: Polyline) -> tuple[float, float]:
    d = curve.vertices - curve.born
    r = np.hypot(d[:, 0], d[:, 1])
    ro = r[curve.orig]
    return float(r.max()), float(ro.max()) if ro.size else 0.0


@dataclass(frozen=True)
class Target:
    """Passage target: the point ``A`` or the line ``{x : x . normal = offset}``, with radius."""

    kind: str
    a: tuple
    radius: float
    offset: float = 0.0

    @classmethod
    def point(cls, A, radius: float) -> "Target":
        return cls("point", (float(A[0]), float(A[1])), float(radius))

    @classmethod
    def line(cls, normal, offset: float, radius: float) -> "Target":
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        return cls("line", (float(n[0]), float(n[1])), float(radius), float(offset))

    def __post_init__(self):
        if self.kind not in ("point", "line"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("target radius must be positive")

    def row(self) -> np.ndarray:
        return np.array([0.0 if self.kind == "point" else 1.0, self.a[0], self.a[1], self.offset])

    def distance(self, curve: Polyline) -> float:
        return float(E.target_dist(curve.vertices, curve.link, len(curve), self.row()))


class CurveRun:
    """Compiled step driver shared by growth tracking, sweeping and passage detection.

    Holds the current curve in preallocated buffers and advances it in blocks
    of increments. Optional extras, all evaluated on the refined curve before
    pruning: passage targets (first step with distance <= radius and
    diameter >= 1), a per-step distance record for one target, and stamping
    into an occupancy grid (the initial curve is stamped on construction).
    ``on_hit(run)`` is called with the unpruned curve in place right after any
    target is reached.
    """

    BLOCK = 2048

    def __init__(self, spec: StreamSpec, curve: Polyline, noise: NoisePath,
                 integ: Integrator | None = None, pruner=None, targets=(),
                 track: int | None = None, grid=None, stop_when_reached: bool = False,
                 on_hit=None):
        if noise.d != spec.d:
            raise ValueError("noise dimension does not match the field spec")
        self.spec = spec
        self.noise = noise
        self.integ = integ or Integrator(h=noise.h)
        if abs(self.integ.h - noise.h) > 1e-15:
            raise ValueError("integrator step differs from the noise step")
        self.targets = list(targets)
        self._rows = (np.array([t.row() for t in self.targets]) if self.targets
                      else np.zeros((0, 4)))
        self._radii = np.array([t.radius for t in self.targets], dtype=float)
        self.tau_step = np.full(len(self.targets), -1, dtype=np.int64)
        self._slack = np.full(len(self.targets), -np.inf)
        if track is not None and not 0 <= track < len(self.targets):
            raise ValueError("track must index a target")
        self.track = -1 if track is None else int(track)
        self.distances: list[np.ndarray] = []
        self.pruner = pruner
        if pruner is not None and pruner.mode == E.PRUNE_TARGETS and not self.targets:
            raise ValueError("target pruning needs at least one target")
        self._rmax = np.zeros(pruner.n_bins if pruner is not None and
                              pruner.mode == E.PRUNE_RADIAL else 1)
        self.grid = grid
        self.stop_when_reached = bool(stop_when_reached)
        self.on_hit = on_hit
        self.delta_max = curve.delta_max
        self.vertex_budget = curve.vertex_budget
        self.step_index = 0
        self.t0 = float(curve.t)
        self.stats = np.zeros(4)
        self.stats[0], self.stats[1] = _phi(curve)
        self._disp = np.zeros(1)
        self._alloc(max(4 * len(curve), 1024))
        self._n = len(curve)
        self._pts[: self._n] = curve.vertices
        self._link[: self._n] = curve.link
        self._born[: self._n] = curve.born
        self._orig[: self._n] = curve.orig
        if grid is not None:
            v = curve.vertices
            grid.ensure(v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max())
            grid.stamp(curve)

    def _alloc(self, size: int, keep: int = 0):
        size = int(min(size, self.vertex_budget))
        bufs = (np.empty((size, 2)), np.empty(size, dtype=np.bool_), np.empty((size, 2)),
                np.empty(size, dtype=np.bool_))
        if keep:
            bufs[0][:keep] = self._pts[:keep]
            bufs[1][:keep] = self._link[:keep]
            bufs[2][:keep] = self._born[:keep]
            bufs[3][:keep] = self._orig[:keep]
        self._pts, self._link, self._born, self._orig = bufs
        self._tp = np.empty((size, 2))
        self._tl = np.empty(size, dtype=np.bool_)
        self._tb = np.empty((size, 2))
        self._to = np.empty(size, dtype=np.bool_)

    # state ------------------------------------------------------------------
    @property
    def t(self) -> float:
        return self.t0 + self.step_index * self.noise.h

    @property
    def curve(self) -> Polyline:
        n = self._n
        return Polyline(self._pts[:n].copy(), self._link[:n].copy(), self._born[:n].copy(),
                        self._orig[:n].copy(), self.t, self.delta_max, self.vertex_budget)

    @property
    def n_vertices(self) -> int:
        return self._n

    @property
    def phi(self) -> float:
        return float(self.stats[0])

    @property
    def phi_orig(self) -> float:
        return float(self.stats[1])

    @property
    def max_step_disp(self) -> float:
        return float(self.stats[2])

    def tau(self, j: int = 0) -> float | None:
        """Passage time of target ``j`` (``None`` while not reached)."""
        s = int(self.tau_step[j])
        return None if s < 0 else self.t0 + s * self.noise.h

    @property
    def all_reached(self) -> bool:
        return bool(len(self.targets)) and bool(np.all(self.tau_step >= 0))

    def distance_record(self) -> np.ndarray:
        return np.concatenate(self.distances) if self.distances else np.zeros(0)

    # stepping ---------------------------------------------------------------
    def step(self) -> Polyline:
        self.advance(1)
        return self.curve

    def advance(self, n_steps: int) -> int:
        """Take up to ``n_steps`` steps; returns the number taken (fewer if all targets were reached)."""
        taken = 0
        while taken < n_steps:
            m = min(self.BLOCK, n_steps - taken)
            done = self._block(m)
            taken += done
            if self.stop_when_reached and self.all_reached:
                break
        return taken

    def _block(self, m: int) -> int:
        inc = np.ascontiguousarray(self.noise.increments(self.step_index, self.step_index + m))
        p = self.pruner
        mode, lag, cap, protect, every = (
            (p.mode, p.lag, p.cap or 0, p.protect_orig, p.every) if p is not None
            else (E.PRUNE_NONE, 0.0, 0, False, 1))
        rec = np.empty(m)
        done = 0
        while done < m:
            g = self.grid
            if g is not None:
                eta, i0, j0, bits, times, win = (g.eta, g.i0, g.j0, g.bits, g.times,
                                                 np.array(g.window))
            else:
                eta, i0, j0 = 0.0, 0, 0
                bits = np.zeros((1, 1), dtype=np.uint8)
                times = np.zeros((1, 1))
                win = np.zeros(4)
            status, n, k = E.run_block(
                self.spec.packed, self.spec.sup_speed, self.spec.sup_jacobian, self.noise.h,
                self.delta_max, *self.integ.kernel_opts(), inc[done:],
                self._pts, self._link, self._born, self._orig, self._n,
                self._tp, self._tl, self._tb, self._to,
                mode, lag, cap, protect, self._rmax, every,
                self._rows, self._radii, self.tau_step, self._slack, self.stop_when_reached,
                self.on_hit is not None,
                self.step_index, self.track, rec[done:],
                eta, i0, j0, bits, times, win, self.stats, self._disp)
            self._n = n
            self.step_index += k
            done += k
            if status == E.DONE:
                break
            if status == E.ALL_REACHED:
                break
            if status == E.HIT:
                self.on_hit(self)
                if self.stop_when_reached and self.all_reached:
                    break
                continue
            if status == E.WINDOW:
                v = self._pts[:n]
                inc_row = inc[done]
                bound = self.spec.sup_speed[0] * self.noise.h + float(
                    self.spec.sup_speed[1:] @ np.abs(inc_row))
                g.ensure(v[:, 0].min() - bound, v[:, 1].min() - bound,
                         v[:, 0].max() + bound, v[:, 1].max() + bound)
                continue
            if status == E.BUDGET:
                if self._pts.shape[0] < self.vertex_budget:
                    self._alloc(4 * self._pts.shape[0], keep=n)
                    continue
                if self.track >= 0:
                    self.distances.append(rec[:done].copy())
                raise BudgetExhausted(
                    f"vertex budget {self.vertex_budget} exhausted at t={self.t + self.noise.h:.6g}",
                    self.curve)
            raise RefinementError(f"segment could not be refined at t={self.t:.6g}")
        if self.track >= 0:
            self.distances.append(rec[:done].copy())
        return done


def track_growth(spec: StreamSpec, curve: Polyline, noise: NoisePath, T: float,
                 integ: Integrator | None = None, pruner=None,
                 sample_every: float = 1.0) -> GrowthTrace:
    """Advect to time ``T`` recording ``(t, diameter, length, Phi_t)`` at unit-time samples.

    Budget exhaustion propagates as :class:`BudgetExhausted`.
    """
    n = n_steps_for(T, noise.h)
    every = n_steps_for(sample_every, noise.h) if T > 0 else 1
    run = CurveRun(spec, curve, noise, integ, pruner)
    trace = GrowthTrace()
    trace.append(run.curve, run.phi, run.phi_orig)
    done = 0
    while done < n:
        k = min(every, n - done)
        run.advance(k)
        done += k
        trace.append(run.curve, run.phi, run.phi_orig)
    trace.max_step_disp = run.max_step_disp
    return trace


def write_curve_csv(path, snapshots) -> None:
    """Write ``t,vertex,x,y,link`` rows for an iterable of curves."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "vertex", "x", "y", "link"])
        for c in snapshots:
            for i in range(len(c)):
                w.writerow([repr(float(c.t)), i, repr(float(c.vertices[i, 0])),
                            repr(float(c.vertices[i, 1])), int(c.link[i])])
