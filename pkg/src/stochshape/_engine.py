"""Compiled multi-step driver for curve runs.

One call advances a polyline through a block of increments, refining,
checking passage targets, stamping an occupancy grid, tracking the growth
functional and pruning, without returning to Python between steps.

Target rows are ``(kind, a, b, c)``: kind 0 is the point ``(a, b)``; kind 1
is the line ``{x : x . (a, b) = c}`` with ``(a, b)`` a unit normal.
"""

import numpy as np
from numba import njit

from ._kernels import advect_refine, min_dist_segments, stamp_segments

# status codes
DONE = 0
ALL_REACHED = 1
BUDGET = 2
WINDOW = 3
REFINE = 4
HIT = 5

PRUNE_NONE = 0
PRUNE_TARGETS = 1
PRUNE_RADIAL = 2


@njit(cache=True)
def line_dist(pts, link, n, nx, ny, c):
    best = np.inf
    for s in range(n):
        g = pts[s, 0] * nx + pts[s, 1] * ny - c
        a = abs(g)
        if a < best:
            best = a
        if link[s] and s + 1 < n:
            g2 = pts[s + 1, 0] * nx + pts[s + 1, 1] * ny - c
            if (g <= 0.0 and g2 >= 0.0) or (g >= 0.0 and g2 <= 0.0):
                return 0.0
    return best


@njit(cache=True)
def target_dist(pts, link, n, row):
    if row[0] == 0.0:
        return min_dist_segments(pts[:n], link[:n], row[1], row[2])
    return line_dist(pts, link, n, row[1], row[2], row[3])


@njit(cache=True)
def is_long(pts, n):
    """``diameter >= 1`` with cheap exits before the quadratic check."""
    if n < 2:
        return False
    x0 = pts[0, 0]
    y0 = pts[0, 1]
    xmin = x0
    xmax = x0
    ymin = y0
    ymax = y0
    for i in range(1, n):
        dx = pts[i, 0] - x0
        dy = pts[i, 1] - y0
        if dx * dx + dy * dy >= 1.0:
            return True
        xmin = min(xmin, pts[i, 0])
        xmax = max(xmax, pts[i, 0])
        ymin = min(ymin, pts[i, 1])
        ymax = max(ymax, pts[i, 1])
    if (xmax - xmin) ** 2 + (ymax - ymin) ** 2 < 1.0:
        return False
    for i in range(n - 1):
        for j in range(i + 1, n):
            dx = pts[i, 0] - pts[j, 0]
            dy = pts[i, 1] - pts[j, 1]
            if dx * dx + dy * dy >= 1.0:
                return True
    return False


@njit(cache=True)
def _target_vertex_dist(pts, n, row, out):
    dmin = np.inf
    for i in range(n):
        if row[0] == 0.0:
            d = np.sqrt((pts[i, 0] - row[1]) ** 2 + (pts[i, 1] - row[2]) ** 2)
        else:
            d = abs(pts[i, 0] * row[1] + pts[i, 1] * row[2] - row[3])
        out[i] = d
        if d < dmin:
            dmin = d
    return dmin


@njit(cache=True)
def keep_mask(pts, n, mode, lag, cap, targets, tau_step, rmax):
    """Vertices to keep before neighbour widening.

    Target mode: for every open target location, the ``cap`` vertices closest
    to it, restricted to those within ``lag`` of the closest one (all target
    locations once every target is reached). Radial mode: for every angular
    bin, the ``cap`` vertices of largest radius, restricted to those within
    ``lag`` of the largest radius ever seen in the bin. ``cap <= 0`` disables
    the count limit.
    """
    keep = np.zeros(n, dtype=np.bool_)
    if mode == PRUNE_RADIAL:
        nb = rmax.shape[0]
        bins = np.empty(n, dtype=np.int64)
        r = np.empty(n)
        for i in range(n):
            ang = np.arctan2(pts[i, 1], pts[i, 0])
            b = int((ang + np.pi) / (2.0 * np.pi) * nb)
            if b >= nb:
                b = nb - 1
            bins[i] = b
            r[i] = np.sqrt(pts[i, 0] ** 2 + pts[i, 1] ** 2)
            if r[i] > rmax[b]:
                rmax[b] = r[i]
        if cap <= 0:
            for i in range(n):
                keep[i] = r[i] >= rmax[bins[i]] - lag
            return keep
        key = np.empty(n)
        for i in range(n):
            key[i] = bins[i] * 1e9 - r[i]
        order = np.argsort(key)
        cur = -1
        rank = 0
        for q in range(n):
            i = order[q]
            if bins[i] != cur:
                cur = bins[i]
                rank = 0
            if rank < cap and r[i] >= rmax[cur] - lag:
                keep[i] = True
            rank += 1
        return keep
    any_open = False
    for j in range(targets.shape[0]):
        if tau_step[j] < 0:
            any_open = True
    d = np.empty(n)
    for j in range(targets.shape[0]):
        if any_open and tau_step[j] >= 0:
            continue
        dup = False
        for j2 in range(j):
            if (any_open and tau_step[j2] >= 0):
                continue
            if (targets[j2, 0] == targets[j, 0] and targets[j2, 1] == targets[j, 1]
                    and targets[j2, 2] == targets[j, 2] and targets[j2, 3] == targets[j, 3]):
                dup = True
                break
        if dup:
            continue
        dmin = _target_vertex_dist(pts, n, targets[j], d)
        thr = dmin + lag
        if cap > 0 and cap < n:
            kth = np.partition(d, cap - 1)[cap - 1]
            if kth < thr:
                thr = kth
        for i in range(n):
            if d[i] <= thr:
                keep[i] = True
    return keep


@njit(cache=True)
def _prune(pts, link, born, orig, n, tp, tl, tb, to, keep, protect_orig):
    if protect_orig:
        for i in range(n):
            if orig[i]:
                keep[i] = True
    grown = keep.copy()
    for i in range(n - 1):
        if link[i]:
            if keep[i]:
                grown[i + 1] = True
            if keep[i + 1]:
                grown[i] = True
    m = 0
    for i in range(n):
        if grown[i]:
            tp[m, 0] = pts[i, 0]
            tp[m, 1] = pts[i, 1]
            tb[m, 0] = born[i, 0]
            tb[m, 1] = born[i, 1]
            to[m] = orig[i]
            tl[m] = link[i] and i + 1 < n and grown[i + 1]
            m += 1
    if m > 0:
        tl[m - 1] = False
    return m


@njit(cache=True)
def _copy(tp, tl, tb, to, m, pts, link, born, orig):
    for i in range(m):
        pts[i, 0] = tp[i, 0]
        pts[i, 1] = tp[i, 1]
        born[i, 0] = tb[i, 0]
        born[i, 1] = tb[i, 1]
        orig[i] = to[i]
        link[i] = tl[i]


@njit(cache=True)
def _phi_update(pts, born, orig, n, stats):
    for i in range(n):
        dx = pts[i, 0] - born[i, 0]
        dy = pts[i, 1] - born[i, 1]
        r = np.sqrt(dx * dx + dy * dy)
        if r > stats[0]:
            stats[0] = r
        if orig[i] and r > stats[1]:
            stats[1] = r


@njit(cache=True)
def run_block(modes, sup_x, sup_dx, h, delta, disp_bound, rot_bound, max_sub,
              incrs, pts, link, born, orig, n, tp, tl, tb, to,
              prune_mode, lag, keep_cap, protect_orig, rmax, prune_every,
              targets, radii, tau_step, slack, stop_when_reached, pause_on_hit, step0,
              track, dist_rec,
              eta, i0, j0, bits, times, win,
              stats, disp_buf):
    """Advance through the rows of ``incrs``.

    ``pts/link/born/orig`` hold the current curve in their first ``n`` rows and
    are updated in place; ``tp/tl/tb/to`` are scratch buffers of the same
    capacity. Returns ``(status, n, steps_done)``. On ``BUDGET`` and ``WINDOW``
    the state is the one before the step that could not be taken.

    ``stats``: running max displacement from ``born`` (all vertices, original
    vertices), largest per-step vertex displacement, newly stamped cells.
    ``win`` = ``(xmin, ymin, xmax, ymax)`` of the grid; stamping is skipped if
    ``eta <= 0``. ``slack[j]`` is a lower bound of ``dist - radius`` for target
    ``j`` (decreased by the a-priori step displacement bound every step) so
    that distant targets are not re-measured every step.
    """
    cap = pts.shape[0]
    nsteps = incrs.shape[0]
    for s in range(nsteps):
        inc = incrs[s]
        bound = sup_x[0] * h
        for k in range(inc.shape[0]):
            bound += sup_x[k + 1] * abs(inc[k])
        if eta > 0.0:
            for i in range(n):
                if (pts[i, 0] - bound < win[0] or pts[i, 0] + bound >= win[2]
                        or pts[i, 1] - bound < win[1] or pts[i, 1] + bound >= win[3]):
                    return WINDOW, n, s
        m = advect_refine(modes, sup_x, sup_dx, pts[:n], link[:n], born[:n], orig[:n], inc, h,
                          delta, disp_bound, rot_bound, max_sub, cap, tp, tl, tb, to, disp_buf)
        if m == -1:
            return BUDGET, n, s
        if m == -2:
            return REFINE, n, s
        if disp_buf[0] > stats[2]:
            stats[2] = disp_buf[0]
        t_now = (step0 + s + 1) * h
        _phi_update(tp, tb, to, m, stats)
        if eta > 0.0:
            stats[3] += stamp_segments(tp[:m], tl[:m], eta, i0, j0, bits, times, t_now)
        if track >= 0:
            dist_rec[s] = target_dist(tp, tl, m, targets[track])
        pending = 0
        hit = False
        longc = -1
        for j in range(targets.shape[0]):
            if tau_step[j] >= 0:
                continue
            slack[j] -= bound
            if slack[j] > 0.0 and j != track:
                pending += 1
                continue
            if j == track:
                dj = dist_rec[s]
            else:
                dj = target_dist(tp, tl, m, targets[j])
            slack[j] = dj - radii[j]
            if dj <= radii[j]:
                if longc < 0:
                    longc = 1 if is_long(tp, m) else 0
                if longc == 1:
                    tau_step[j] = step0 + s + 1
                    hit = True
                    continue
            pending += 1
        if hit and pause_on_hit:
            # hand the unpruned curve back so the caller can snapshot it
            _copy(tp, tl, tb, to, m, pts, link, born, orig)
            return HIT, m, s + 1
        if prune_mode != PRUNE_NONE and (step0 + s + 1) % prune_every == 0:
            keep = keep_mask(tp, m, prune_mode, lag, keep_cap, targets, tau_step, rmax)
            n = _prune(tp, tl, tb, to, m, pts, link, born, orig, keep, protect_orig)
        else:
            _copy(tp, tl, tb, to, m, pts, link, born, orig)
            n = m
        if stop_when_reached and targets.shape[0] > 0 and pending == 0:
            return ALL_REACHED, n, s + 1
    return DONE, n, nsteps
