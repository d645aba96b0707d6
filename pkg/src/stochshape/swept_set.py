"""Occupancy grids for the swept set, its dilation, and first-passage times.

The plane is tiled by half-open cells ``[i eta, (i+1) eta) x [j eta, (j+1) eta)``;
a grid stores a window of whole cells ``i0 <= i < i0 + nx``, ``j0 <= j < j0 + ny``
as a ``uint8`` bit array indexed ``[j - j0, i - i0]`` together with the time
each cell was first stamped. Windows only ever grow, by whole cells, so world
coordinates of set cells never move.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels as K
from .curve_tracker import CurveRun, GrowthTrace, Polyline, Target
from .field_model import StreamSpec
from .flow_integrator import Integrator, NoisePath, n_steps_for

DEFAULT_ETA = 0.1
DEFAULT_R = 1.0
GRID_MAGIC = "# stochshape occupancy grid v1"


class OccupancyGrid:
    """Monotone bitset of stamped cells with first-hit times.

    Parameters
    ----------
    eta : float
        Cell size.
    window : tuple, optional
        ``(xmin, ymin, xmax, ymax)`` hint; rounded outwards to whole cells.
    """

    def __init__(self, eta: float = DEFAULT_ETA, window=(-1.0, -1.0, 1.0, 1.0)):
        if not eta > 0:
            raise ValueError("eta must be positive")
        self.eta = float(eta)
        xmin, ymin, xmax, ymax = window
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("window must have positive extent")
        self.i0 = math.floor(xmin / self.eta)
        self.j0 = math.floor(ymin / self.eta)
        nx = math.floor(xmax / self.eta) + 1 - self.i0
        ny = math.floor(ymax / self.eta) + 1 - self.j0
        self.bits = np.zeros((ny, nx), dtype=np.uint8)
        self.times = np.full((ny, nx), np.inf)
        self.t_latest = 0.0

    # geometry ---------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def window(self) -> tuple[float, float, float, float]:
        ny, nx = self.bits.shape
        e = self.eta
        return (self.i0 * e, self.j0 * e, (self.i0 + nx) * e, (self.j0 + ny) * e)

    def ensure(self, xmin, ymin, xmax, ymax, pad: int = 8) -> bool:
        """Grow the window (by whole cells, with some headroom) to contain the box."""
        ny, nx = self.bits.shape
        e = self.eta
        lo_i = math.floor(xmin / e)
        lo_j = math.floor(ymin / e)
        hi_i = math.floor(xmax / e)
        hi_j = math.floor(ymax / e)
        if lo_i >= self.i0 and lo_j >= self.j0 and hi_i < self.i0 + nx and hi_j < self.j0 + ny:
            return False
        grow_x = max(pad, nx // 4)
        grow_y = max(pad, ny // 4)
        ni0 = min(self.i0, lo_i - grow_x) if lo_i < self.i0 else self.i0
        nj0 = min(self.j0, lo_j - grow_y) if lo_j < self.j0 else self.j0
        ni1 = max(self.i0 + nx, hi_i + 1 + grow_x) if hi_i >= self.i0 + nx else self.i0 + nx
        nj1 = max(self.j0 + ny, hi_j + 1 + grow_y) if hi_j >= self.j0 + ny else self.j0 + ny
        self._reframe(ni0, nj0, ni1 - ni0, nj1 - nj0)
        return True

    def _reframe(self, i0, j0, nx, ny):
        bits = np.zeros((ny, nx), dtype=np.uint8)
        times = np.full((ny, nx), np.inf)
        oy, ox = self.j0 - j0, self.i0 - i0
        h, w = self.bits.shape
        bits[oy:oy + h, ox:ox + w] = self.bits
        times[oy:oy + h, ox:ox + w] = self.times
        self.bits, self.times, self.i0, self.j0 = bits, times, i0, j0

    def cell_of(self, p) -> tuple[int, int]:
        return math.floor(p[0] / self.eta), math.floor(p[1] / self.eta)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        ny, nx = self.bits.shape
        x = (self.i0 + np.arange(nx) + 0.5) * self.eta
        y = (self.j0 + np.arange(ny) + 0.5) * self.eta
        return x, y

    # contents ---------------------------------------------------------------
    def count(self) -> int:
        return int(self.bits.sum())

    def cells(self) -> set[tuple[int, int]]:
        jj, ii = np.nonzero(self.bits)
        return set(zip((ii + self.i0).tolist(), (jj + self.j0).tolist()))

    def is_set(self, i: int, j: int) -> bool:
        li, lj = i - self.i0, j - self.j0
        ny, nx = self.bits.shape
        return 0 <= li < nx and 0 <= lj < ny and bool(self.bits[lj, li])

    def stamp(self, curve: Polyline, t: float | None = None) -> int:
        """Set every cell touched by the curve's segments (exact supercover); returns new cells."""
        if len(curve) == 0:
            return 0
        t = curve.t if t is None else float(t)
        v = curve.vertices
        self.ensure(v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max())
        added = K.stamp_segments(v, curve.link, self.eta, self.i0, self.j0,
                                 self.bits, self.times, t)
        self.t_latest = max(self.t_latest, t)
        return int(added)

    def copy(self) -> "OccupancyGrid":
        g = OccupancyGrid.__new__(OccupancyGrid)
        g.eta, g.i0, g.j0, g.t_latest = self.eta, self.i0, self.j0, self.t_latest
        g.bits, g.times = self.bits.copy(), self.times.copy()
        return g

    def at_time(self, t: float) -> "OccupancyGrid":
        """Cells first stamped at or before ``t`` (the swept set ``W_t`` of the same run)."""
        g = self.copy()
        late = g.times > t
        g.bits[late] = 0
        g.times[late] = np.inf
        g.t_latest = min(self.t_latest, t)
        return g

    def issubset(self, other: "OccupancyGrid") -> bool:
        _check_compatible(self, other)
        return self.cells() <= other.cells()

    def merge(self, other: "OccupancyGrid") -> "OccupancyGrid":
        """Cellwise OR on the union window; first-hit times take the minimum."""
        _check_compatible(self, other)
        g = self.copy()
        ox0, oy0, ox1, oy1 = other.window
        e = self.eta
        g.ensure(ox0 + 0.5 * e, oy0 + 0.5 * e, ox1 - 0.5 * e, oy1 - 0.5 * e, pad=0)
        h, w = other.bits.shape
        sl = np.s_[other.j0 - g.j0:other.j0 - g.j0 + h, other.i0 - g.i0:other.i0 - g.i0 + w]
        g.bits[sl] |= other.bits
        g.times[sl] = np.minimum(g.times[sl], other.times)
        g.t_latest = max(self.t_latest, other.t_latest)
        return g

    # derived sets -----------------------------------------------------------
    def dilate(self, R: float) -> "OccupancyGrid":
        """Disk dilation: a cell is set when its centre lies within ``R`` of a set cell's centre.

        Centre-to-centre distances make the result exact on the lattice; the
        continuous R-neighbourhood of the stamped cells differs from it by at
        most half a cell diagonal.
        """
        if R < 0:
            raise ValueError("R must be non-negative")
        g = self.copy()
        if R == 0 or not self.bits.any():
            return g
        r = int(math.floor(R / self.eta + 1e-9))
        g._reframe(self.i0 - r - 1, self.j0 - r - 1, self.bits.shape[1] + 2 * r + 2,
                   self.bits.shape[0] + 2 * r + 2)
        dist = ndimage.distance_transform_edt(g.bits == 0)
        g.bits = ((dist * self.eta) <= R * (1 + 1e-12)).astype(np.uint8)
        g.times = np.where(g.bits == 1, np.nan, np.inf)
        return g

    def radial_extent(self, n_bins: int, center=(0.0, 0.0)) -> np.ndarray:
        """Largest cell-centre radius per angular bin (``nan`` for empty bins).

        Bin ``k`` covers angles ``[2 pi k / n - pi / n, 2 pi k / n + pi / n)``, so
        bin centres are the directions ``2 pi k / n``.
        """
        x, y = self.cell_centers()
        jj, ii = np.nonzero(self.bits)
        px = x[ii] - center[0]
        py = y[jj] - center[1]
        r = np.hypot(px, py)
        ang = np.mod(np.arctan2(py, px) + np.pi / n_bins, 2 * np.pi)
        b = np.minimum((ang / (2 * np.pi) * n_bins).astype(np.int64), n_bins - 1)
        out = np.full(n_bins, -np.inf)
        np.maximum.at(out, b, r)
        out[np.isinf(out)] = np.nan
        return out

    def inscribed_radius(self, center=(0.0, 0.0)) -> float:
        """Radius of the largest disk about ``center`` whose cell centres are all set."""
        x, y = self.cell_centers()
        X, Y = np.meshgrid(x - center[0], y - center[1])
        d = np.hypot(X, Y)
        unset = self.bits == 0
        xmin, ymin, xmax, ymax = self.window
        edge = min(center[0] - xmin, xmax - center[0], center[1] - ymin, ymax - center[1])
        inside = float(d[unset].min()) if unset.any() else np.inf
        return max(0.0, min(inside, edge))

    # serialisation ----------------------------------------------------------
    def to_text(self) -> str:
        """Header plus row-major run-length encoding (alternating runs, starting with zeros)."""
        ny, nx = self.bits.shape
        flat = self.bits.ravel()
        change = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate([[0], change, [flat.size]])
        runs = np.diff(bounds).tolist()
        if flat.size and flat[0] == 1:
            runs = [0] + runs
        xmin, ymin, xmax, ymax = (float(v) for v in self.window)
        lines = [GRID_MAGIC,
                 f"eta = {float(self.eta)!r}",
                 f"window = {xmin!r} {ymin!r} {xmax!r} {ymax!r}",
                 f"origin_cell = {self.i0} {self.j0}",
                 f"size = {nx} {ny}",
                 f"t_latest = {float(self.t_latest)!r}",
                 "rle ="]
        for k in range(0, len(runs), 32):
            lines.append(" ".join(str(r) for r in runs[k:k + 32]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OccupancyGrid":
        lines = text.splitlines()
        if not lines or lines[0].strip() != GRID_MAGIC:
            raise ValueError("not an occupancy grid file")
        head = {}
        k = 1
        while k < len(lines) and lines[k].strip() != "rle =":
            key, _, val = lines[k].partition("=")
            head[key.strip()] = val.split()
            k += 1
        runs = [int(v) for ln in lines[k + 1:] for v in ln.split()]
        g = cls.__new__(cls)
        g.eta = float(head["eta"][0])
        g.i0, g.j0 = (int(v) for v in head["origin_cell"])
        nx, ny = (int(v) for v in head["size"])
        g.t_latest = float(head["t_latest"][0])
        flat = np.repeat(np.arange(len(runs)) % 2, runs).astype(np.uint8)
        if flat.size != nx * ny:
            raise ValueError("run lengths do not match the grid size")
        g.bits = flat.reshape(ny, nx)
        g.times = np.where(g.bits == 1, np.nan, np.inf)
        return g

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "OccupancyGrid":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _check_compatible(a: OccupancyGrid, b: OccupancyGrid):
    if a.eta != b.eta:
        raise ValueError("grids have different cell sizes")


def stamp(grid: OccupancyGrid, curve: Polyline) -> OccupancyGrid:
    grid.stamp(curve)
    return grid


def dilate(grid: OccupancyGrid, R: float) -> OccupancyGrid:
    return grid.dilate(R)


def dilate_bruteforce(grid: OccupancyGrid, R: float) -> OccupancyGrid:
    """Quadratic reference implementation of :meth:`OccupancyGrid.dilate`."""
    g = grid.copy()
    if R == 0 or not grid.bits.any():
        return g
    r = int(math.floor(R / grid.eta + 1e-9))
    g._reframe(grid.i0 - r - 1, grid.j0 - r - 1, grid.bits.shape[1] + 2 * r + 2,
               grid.bits.shape[0] + 2 * r + 2)
    src = np.argwhere(g.bits == 1)
    out = np.zeros_like(g.bits)
    ny, nx = g.bits.shape
    for j in range(ny):
        for i in range(nx):
            d2 = (src[:, 0] - j) ** 2 + (src[:, 1] - i) ** 2
            if np.sqrt(d2.min()) * grid.eta <= R * (1 + 1e-12):
                out[j, i] = 1
    g.bits = out
    g.times = np.where(out == 1, np.nan, np.inf)
    return g


def run_sweep(spec: StreamSpec, curve0: Polyline, noise: NoisePath, T: float,
              eta: float = DEFAULT_ETA, integ: Integrator | None = None, pruner=None,
              grid: OccupancyGrid | None = None) -> tuple[OccupancyGrid, GrowthTrace]:
    """Advect ``curve0`` to time ``T`` stamping the curve before and after every step.

    Every step's refined image is stamped (before pruning), which together
    with the initial stamp covers the pre- and post-step curve of each step.
    Returns the grid and a unit-time :class:`GrowthTrace`; the trace's
    ``max_step_disp`` is the largest realized per-step vertex displacement.
    Budget exhaustion propagates as :class:`~stochshape.curve_tracker.BudgetExhausted`.
    """
    if grid is None:
        v = curve0.vertices
        grid = OccupancyGrid(eta, (v[:, 0].min() - 1, v[:, 1].min() - 1,
                                   v[:, 0].max() + 1, v[:, 1].max() + 1))
    elif grid.eta != eta:
        raise ValueError("grid cell size differs from eta")
    run = CurveRun(spec, curve0, noise, integ, pruner, grid=grid)
    trace = GrowthTrace()
    trace.append(run.curve, run.phi, run.phi_orig)
    n = n_steps_for(T, noise.h)
    every = n_steps_for(1.0, noise.h)
    done = 0
    while done < n:
        k = min(every, n - done)
        run.advance(k)
        done += k
        trace.append(run.curve, run.phi, run.phi_orig)
    trace.max_step_disp = run.max_step_disp
    grid.t_latest = max(grid.t_latest, run.t)
    return grid, trace


@dataclass
class PassageRecord:
    """First passage of the curve to within ``R`` of ``A`` while long.

    ``tau`` is ``None`` when not reached by ``t_max``. ``diameter`` and
    ``distance`` are re-measured on the stored snapshot at ``tau``.
    """

    A: tuple
    R: float
    tau: float | None
    t_max: float
    diameter: float | None = None
    distance: float | None = None

    @property
    def reached(self) -> bool:
        return self.tau is not None

    def verify(self) -> bool:
        if self.tau is None:
            return True
        return self.distance <= self.R + 1e-12 and self.diameter >= 1.0


class _Snapshots:
    """``on_hit`` callback recording diameter and distance for newly reached targets."""

    def __init__(self, n):
        self.seen = np.zeros(n, dtype=bool)
        self.diameter = np.full(n, np.nan)
        self.distance = np.full(n, np.nan)

    def __call__(self, run: CurveRun):
        new = np.flatnonzero((run.tau_step >= 0) & ~self.seen)
        if not new.size:
            return
        c = run.curve
        d = c.diameter()
        for j in new:
            self.seen[j] = True
            self.diameter[j] = d
            self.distance[j] = run.targets[j].distance(c)


def first_passage(spec: StreamSpec, curve0: Polyline, noise: NoisePath, A, R: float,
                  T_max: float, integ: Integrator | None = None,
                  pruner=None) -> PassageRecord:
    """First sampled step ``t > 0`` with ``dist(curve, A) <= R`` and ``diameter >= 1``."""
    if not R > 0:
        raise ValueError("R must be positive")
    snaps = _Snapshots(1)
    run = CurveRun(spec, curve0, noise, integ, pruner, targets=[Target.point(A, R)],
                   stop_when_reached=True, on_hit=snaps)
    run.advance(n_steps_for(T_max, noise.h))
    tau = run.tau(0)
    return PassageRecord((float(A[0]), float(A[1])), float(R), tau, float(T_max),
                         None if tau is None else float(snaps.diameter[0]),
                         None if tau is None else float(snaps.distance[0]))


def passage_times(spec: StreamSpec, curve0: Polyline, noise: NoisePath, targets, T_max: float,
                  integ: Integrator | None = None, pruner=None):
    """Passage times of one run to several targets at once.

    Returns ``(tau, diameter, distance)`` arrays (``nan`` where not reached).
    """
    targets = list(targets)
    snaps = _Snapshots(len(targets))
    run = CurveRun(spec, curve0, noise, integ, pruner, targets=targets,
                   stop_when_reached=True, on_hit=snaps)
    run.advance(n_steps_for(T_max, noise.h))
    tau = np.array([np.nan if run.tau(j) is None else run.tau(j) for j in range(len(targets))])
    return tau, snaps.diameter, snaps.distance


def grid_svg(grid: OccupancyGrid, overlay=None, scale: float = 4.0) -> str:
    """Filled-cell SVG of a grid; ``overlay`` is an optional closed polygon in world units."""
    ny, nx = grid.bits.shape
    xmin, ymin, xmax, ymax = grid.window
    W, H = nx * scale, ny * scale
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" '
           f'viewBox="0 0 {W:.0f} {H:.0f}">',
           f'<rect width="{W:.0f}" height="{H:.0f}" fill="white"/>']
    for j in range(ny):
        row = grid.bits[j]
        i = 0
        y = (ny - 1 - j) * scale
        while i < nx:
            if row[i]:
                k = i
                while k < nx and row[k]:
                    k += 1
                out.append(f'<rect x="{i * scale:g}" y="{y:g}" width="{(k - i) * scale:g}" '
                           f'height="{scale:g}" fill="#335"/>')
                i = k
            else:
                i += 1
    if overlay is not None and len(overlay):
        pts = " ".join(f"{(p[0] - xmin) / grid.eta * scale:.2f},{(ymax - p[1]) / grid.eta * scale:.2f}"
                       for p in overlay)
        out.append(f'<polygon points="{pts}" fill="none" stroke="#c30" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
