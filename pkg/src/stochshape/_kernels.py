"""Compiled inner loops.

Fields are passed as a packed ``modes`` array of shape ``(d + 1, M, 4)`` where
row 0 holds the drift stream function and rows ``1..d`` the noise stream
functions. Each mode row is ``(amplitude, n1, n2, phase)``; padding rows have
zero amplitude. ``sup_x[k]`` and ``sup_dx[k]`` are a-priori bounds on the speed
and on the Jacobian norm of component ``k``.
"""

import numpy as np
from numba import njit

TWO_PI = 2.0 * np.pi
# relative tolerance on the squared segment length before refinement kicks in
REFINE_SLACK = 1e-9


@njit(cache=True, inline="always")
def _wrap(x):
    return x - np.floor(x)


@njit(cache=True, error_model="numpy")
def field(modes, k, x, y):
    fx = _wrap(x)
    fy = _wrap(y)
    u = 0.0
    v = 0.0
    for j in range(modes.shape[1]):
        a = modes[k, j, 0]
        if a == 0.0:
            continue
        n1 = modes[k, j, 1]
        n2 = modes[k, j, 2]
        s = TWO_PI * a * np.sin(TWO_PI * (n1 * fx + n2 * fy) + modes[k, j, 3])
        u += n2 * s
        v -= n1 * s
    return u, v


@njit(cache=True)
def jacobian(modes, k, x, y):
    fx = _wrap(x)
    fy = _wrap(y)
    a11 = 0.0
    a12 = 0.0
    a21 = 0.0
    a22 = 0.0
    for j in range(modes.shape[1]):
        a = modes[k, j, 0]
        if a == 0.0:
            continue
        n1 = modes[k, j, 1]
        n2 = modes[k, j, 2]
        c = TWO_PI * TWO_PI * a * np.cos(TWO_PI * (n1 * fx + n2 * fy) + modes[k, j, 3])
        a11 += n2 * n1 * c
        a12 += n2 * n2 * c
        a21 -= n1 * n1 * c
        a22 -= n1 * n2 * c
    return a11, a12, a21, a22


@njit(cache=True)
def n_substeps(tau, sup_x, sup_dx, disp_bound, rot_bound, max_sub):
    t = abs(tau)
    n = max(t * sup_x / disp_bound, t * sup_dx / rot_bound)
    m = int(np.ceil(n))
    if m < 1:
        m = 1
    if m > max_sub:
        m = max_sub
    return m


@njit(cache=True, error_model="numpy")
def flow_component(modes, k, x, y, tau, nsub):
    """RK4 flow along field ``k`` for signed time ``tau``."""
    dt = tau / nsub
    for _ in range(nsub):
        k1u, k1v = field(modes, k, x, y)
        k2u, k2v = field(modes, k, x + 0.5 * dt * k1u, y + 0.5 * dt * k1v)
        k3u, k3v = field(modes, k, x + 0.5 * dt * k2u, y + 0.5 * dt * k2v)
        k4u, k4v = field(modes, k, x + dt * k3u, y + dt * k3v)
        x += dt * (k1u + 2.0 * k2u + 2.0 * k3u + k4u) / 6.0
        y += dt * (k1v + 2.0 * k2v + 2.0 * k3v + k4v) / 6.0
    return x, y


@njit(cache=True)
def flow_component_tangent(modes, k, x, y, m, tau, nsub):
    """RK4 flow along field ``k`` carrying the 2x2 matrix ``m`` (modified in place).

    ``m`` is multiplied by the exact derivative of the RK4 map, so the tangent
    state stays consistent with the point map.
    """
    dt = tau / nsub
    for _ in range(nsub):
        # stage points and their derivatives w.r.t. the substep start point
        k1u, k1v = field(modes, k, x, y)
        j1 = jacobian(modes, k, x, y)
        # d k1 / d x0 = J1
        d1 = (j1[0], j1[1], j1[2], j1[3])
        x2 = x + 0.5 * dt * k1u
        y2 = y + 0.5 * dt * k1v
        k2u, k2v = field(modes, k, x2, y2)
        j2 = jacobian(modes, k, x2, y2)
        # d x2 / d x0 = I + dt/2 d1
        p11 = 1.0 + 0.5 * dt * d1[0]
        p12 = 0.5 * dt * d1[1]
        p21 = 0.5 * dt * d1[2]
        p22 = 1.0 + 0.5 * dt * d1[3]
        d2 = (j2[0] * p11 + j2[1] * p21, j2[0] * p12 + j2[1] * p22,
              j2[2] * p11 + j2[3] * p21, j2[2] * p12 + j2[3] * p22)
        x3 = x + 0.5 * dt * k2u
        y3 = y + 0.5 * dt * k2v
        k3u, k3v = field(modes, k, x3, y3)
        j3 = jacobian(modes, k, x3, y3)
        p11 = 1.0 + 0.5 * dt * d2[0]
        p12 = 0.5 * dt * d2[1]
        p21 = 0.5 * dt * d2[2]
        p22 = 1.0 + 0.5 * dt * d2[3]
        d3 = (j3[0] * p11 + j3[1] * p21, j3[0] * p12 + j3[1] * p22,
              j3[2] * p11 + j3[3] * p21, j3[2] * p12 + j3[3] * p22)
        x4 = x + dt * k3u
        y4 = y + dt * k3v
        k4u, k4v = field(modes, k, x4, y4)
        j4 = jacobian(modes, k, x4, y4)
        p11 = 1.0 + dt * d3[0]
        p12 = dt * d3[1]
        p21 = dt * d3[2]
        p22 = 1.0 + dt * d3[3]
        d4 = (j4[0] * p11 + j4[1] * p21, j4[0] * p12 + j4[1] * p22,
              j4[2] * p11 + j4[3] * p21, j4[2] * p12 + j4[3] * p22)
        g11 = 1.0 + dt * (d1[0] + 2.0 * d2[0] + 2.0 * d3[0] + d4[0]) / 6.0
        g12 = dt * (d1[1] + 2.0 * d2[1] + 2.0 * d3[1] + d4[1]) / 6.0
        g21 = dt * (d1[2] + 2.0 * d2[2] + 2.0 * d3[2] + d4[2]) / 6.0
        g22 = 1.0 + dt * (d1[3] + 2.0 * d2[3] + 2.0 * d3[3] + d4[3]) / 6.0
        n11 = g11 * m[0, 0] + g12 * m[1, 0]
        n12 = g11 * m[0, 1] + g12 * m[1, 1]
        n21 = g21 * m[0, 0] + g22 * m[1, 0]
        n22 = g21 * m[0, 1] + g22 * m[1, 1]
        m[0, 0] = n11
        m[0, 1] = n12
        m[1, 0] = n21
        m[1, 1] = n22
        x += dt * (k1u + 2.0 * k2u + 2.0 * k3u + k4u) / 6.0
        y += dt * (k1v + 2.0 * k2v + 2.0 * k3v + k4v) / 6.0
    return x, y


@njit(cache=True)
def step_one(modes, sup_x, sup_dx, x, y, incr, h, disp_bound, rot_bound, max_sub):
    """Lie-Trotter splitting step: drift for ``h``, then each noise field for its increment."""
    if sup_x[0] > 0.0:
        n = n_substeps(h, sup_x[0], sup_dx[0], disp_bound, rot_bound, max_sub)
        x, y = flow_component(modes, 0, x, y, h, n)
    for k in range(1, modes.shape[0]):
        tau = incr[k - 1]
        if tau == 0.0:
            continue
        n = n_substeps(tau, sup_x[k], sup_dx[k], disp_bound, rot_bound, max_sub)
        x, y = flow_component(modes, k, x, y, tau, n)
    return x, y


@njit(cache=True)
def step_points(modes, sup_x, sup_dx, pts, incr, h, disp_bound, rot_bound, max_sub):
    out = np.empty_like(pts)
    for i in range(pts.shape[0]):
        x, y = step_one(modes, sup_x, sup_dx, pts[i, 0], pts[i, 1], incr, h,
                        disp_bound, rot_bound, max_sub)
        out[i, 0] = x
        out[i, 1] = y
    return out


@njit(cache=True)
def step_points_path(modes, sup_x, sup_dx, pts, incrs, h, disp_bound, rot_bound, max_sub):
    """Advance every point through all rows of ``incrs``; returns final positions."""
    out = pts.copy()
    for i in range(pts.shape[0]):
        x = out[i, 0]
        y = out[i, 1]
        for s in range(incrs.shape[0]):
            x, y = step_one(modes, sup_x, sup_dx, x, y, incrs[s], h,
                            disp_bound, rot_bound, max_sub)
        out[i, 0] = x
        out[i, 1] = y
    return out


@njit(cache=True)
def step_points_independent(modes, sup_x, sup_dx, pts, incrs, h, disp_bound, rot_bound,
                            max_sub, sample_every):
    """Advance point ``i`` with its own increments ``incrs[i]`` (shape (n, steps, d)).

    Returns positions sampled every ``sample_every`` steps, shape (n, n_samples + 1, 2).
    """
    n = pts.shape[0]
    steps = incrs.shape[1]
    ns = steps // sample_every
    out = np.empty((n, ns + 1, 2))
    for i in range(n):
        x = pts[i, 0]
        y = pts[i, 1]
        out[i, 0, 0] = x
        out[i, 0, 1] = y
        for s in range(steps):
            x, y = step_one(modes, sup_x, sup_dx, x, y, incrs[i, s], h,
                            disp_bound, rot_bound, max_sub)
            if (s + 1) % sample_every == 0:
                out[i, (s + 1) // sample_every, 0] = x
                out[i, (s + 1) // sample_every, 1] = y
    return out


@njit(cache=True)
def ito_drift_point(modes, x, y):
    bu = 0.0
    bv = 0.0
    for k in range(1, modes.shape[0]):
        u, v = field(modes, k, x, y)
        a11, a12, a21, a22 = jacobian(modes, k, x, y)
        bu += 0.5 * (a11 * u + a12 * v)
        bv += 0.5 * (a21 * u + a22 * v)
    u, v = field(modes, 0, x, y)
    return bu + u, bv + v


@njit(cache=True)
def heun_one(modes, x, y, incr, h):
    """Stratonovich predictor-corrector step."""
    bu, bv = field(modes, 0, x, y)
    du = bu * h
    dv = bv * h
    for k in range(1, modes.shape[0]):
        u, v = field(modes, k, x, y)
        du += u * incr[k - 1]
        dv += v * incr[k - 1]
    px = x + du
    py = y + dv
    bu, bv = field(modes, 0, px, py)
    eu = bu * h
    ev = bv * h
    for k in range(1, modes.shape[0]):
        u, v = field(modes, k, px, py)
        eu += u * incr[k - 1]
        ev += v * incr[k - 1]
    return x + 0.5 * (du + eu), y + 0.5 * (dv + ev)


@njit(cache=True)
def heun_points_independent(modes, pts, incrs, h):
    n = pts.shape[0]
    out = np.empty((n, 2))
    for i in range(n):
        x = pts[i, 0]
        y = pts[i, 1]
        for s in range(incrs.shape[1]):
            x, y = heun_one(modes, x, y, incrs[i, s], h)
        out[i, 0] = x
        out[i, 1] = y
    return out


@njit(cache=True)
def tangent_step(modes, sup_x, sup_dx, x, y, m, incr, h, disp_bound, rot_bound, max_sub):
    if sup_x[0] > 0.0:
        n = n_substeps(h, sup_x[0], sup_dx[0], disp_bound, rot_bound, max_sub)
        x, y = flow_component_tangent(modes, 0, x, y, m, h, n)
    for k in range(1, modes.shape[0]):
        tau = incr[k - 1]
        if tau == 0.0:
            continue
        n = n_substeps(tau, sup_x[k], sup_dx[k], disp_bound, rot_bound, max_sub)
        x, y = flow_component_tangent(modes, k, x, y, m, tau, n)
    return x, y


@njit(cache=True)
def lyapunov_run(modes, sup_x, sup_dx, x, y, m, incrs, h, renorm_every,
                 disp_bound, rot_bound, max_sub):
    """Tangent run with periodic QR renormalisation.

    Returns per-interval ``log r11`` and ``log r22`` (the stretch factors of the
    Gram-Schmidt frame) and the final position. The frame ``m`` is updated in place.
    """
    n_int = incrs.shape[0] // renorm_every
    logs = np.zeros((n_int, 2))
    idx = 0
    for s in range(incrs.shape[0]):
        x, y = tangent_step(modes, sup_x, sup_dx, x, y, m, incrs[s], h,
                            disp_bound, rot_bound, max_sub)
        if (s + 1) % renorm_every == 0 and idx < n_int:
            # Gram-Schmidt on the columns of m
            c1x = m[0, 0]
            c1y = m[1, 0]
            r11 = np.sqrt(c1x * c1x + c1y * c1y)
            q1x = c1x / r11
            q1y = c1y / r11
            r12 = q1x * m[0, 1] + q1y * m[1, 1]
            c2x = m[0, 1] - r12 * q1x
            c2y = m[1, 1] - r12 * q1y
            r22 = np.sqrt(c2x * c2x + c2y * c2y)
            logs[idx, 0] = np.log(r11)
            logs[idx, 1] = np.log(r22)
            idx += 1
            m[0, 0] = q1x
            m[1, 0] = q1y
            m[0, 1] = c2x / r22
            m[1, 1] = c2y / r22
    return logs, x, y


@njit(cache=True)
def advect_refine(modes, sup_x, sup_dx, pts, link, born, orig, incr, h, delta,
                  disp_bound, rot_bound, max_sub, cap, out_pts, out_link, out_born, out_orig,
                  disp_out):
    """Advance a polyline and refine stretched segments.

    Segments whose image exceeds ``delta`` (relative slack ``REFINE_SLACK``, so
    pieces of length exactly ``delta`` survive rounding) get the pre-step midpoint inserted
    and advanced with the same increments, recursively. Returns the new vertex
    count, or -1 if ``cap`` would be exceeded, or -2 if a segment could not be
    refined (pre-image collapsed to floating-point resolution). ``disp_out[0]``
    receives the largest displacement of an existing vertex.
    """
    n = pts.shape[0]
    new = step_points(modes, sup_x, sup_dx, pts, incr, h, disp_bound, rot_bound, max_sub)
    dmax = 0.0
    for i in range(n):
        ex = new[i, 0] - pts[i, 0]
        ey = new[i, 1] - pts[i, 1]
        dd = ex * ex + ey * ey
        if dd > dmax:
            dmax = dd
    disp_out[0] = np.sqrt(dmax)
    # explicit stack of pending sub-segments: pre-step a, image qa, pre-step b,
    # image qb, and a flag telling whether b is the original next vertex
    st = np.empty((128, 9))
    cnt = 0
    d2 = delta * delta * (1.0 + REFINE_SLACK)
    for i in range(n):
        if cnt >= cap:
            return -1
        out_pts[cnt, 0] = new[i, 0]
        out_pts[cnt, 1] = new[i, 1]
        out_born[cnt, 0] = born[i, 0]
        out_born[cnt, 1] = born[i, 1]
        out_orig[cnt] = orig[i]
        out_link[cnt] = link[i]
        cnt += 1
        if not link[i] or i + 1 >= n:
            continue
        st[0, 0] = pts[i, 0]
        st[0, 1] = pts[i, 1]
        st[0, 2] = new[i, 0]
        st[0, 3] = new[i, 1]
        st[0, 4] = pts[i + 1, 0]
        st[0, 5] = pts[i + 1, 1]
        st[0, 6] = new[i + 1, 0]
        st[0, 7] = new[i + 1, 1]
        st[0, 8] = 1.0
        top = 1
        while top > 0:
            top -= 1
            ax = st[top, 0]
            ay = st[top, 1]
            qax = st[top, 2]
            qay = st[top, 3]
            bx = st[top, 4]
            by = st[top, 5]
            qbx = st[top, 6]
            qby = st[top, 7]
            b_is_end = st[top, 8]
            dx = qbx - qax
            dy = qby - qay
            if dx * dx + dy * dy <= d2:
                if b_is_end == 0.0:
                    if cnt >= cap:
                        return -1
                    out_pts[cnt, 0] = qbx
                    out_pts[cnt, 1] = qby
                    out_born[cnt, 0] = bx
                    out_born[cnt, 1] = by
                    out_orig[cnt] = False
                    out_link[cnt] = True
                    cnt += 1
                continue
            mx = 0.5 * (ax + bx)
            my = 0.5 * (ay + by)
            if (mx == ax and my == ay) or (mx == bx and my == by) or top + 2 >= st.shape[0]:
                return -2
            qmx, qmy = step_one(modes, sup_x, sup_dx, mx, my, incr, h,
                                disp_bound, rot_bound, max_sub)
            # right half below the left half so the left half is processed next
            st[top, 0] = mx
            st[top, 1] = my
            st[top, 2] = qmx
            st[top, 3] = qmy
            st[top, 4] = bx
            st[top, 5] = by
            st[top, 6] = qbx
            st[top, 7] = qby
            st[top, 8] = b_is_end
            top += 1
            st[top, 0] = ax
            st[top, 1] = ay
            st[top, 2] = qax
            st[top, 3] = qay
            st[top, 4] = mx
            st[top, 5] = my
            st[top, 6] = qmx
            st[top, 7] = qmy
            st[top, 8] = 0.0
            top += 1
    return cnt


@njit(cache=True)
def _mark(bits, times, i, j, i0, j0, t):
    li = i - i0
    lj = j - j0
    if li < 0 or lj < 0 or li >= bits.shape[1] or lj >= bits.shape[0]:
        return 0
    if bits[lj, li] == 0:
        bits[lj, li] = 1
        times[lj, li] = t
        return 1
    return 0


@njit(cache=True)
def stamp_segments(pts, link, eta, i0, j0, bits, times, t):
    """Set every cell ``floor(p / eta)`` for ``p`` on a linked segment or lone vertex.

    Exact supercover under the half-open tiling: crossing parameters of all
    grid lines are sorted; each crossing point and each open sub-interval
    midpoint contributes its cell. Returns the number of newly set cells.
    """
    n = pts.shape[0]
    added = 0
    buf = np.empty(64)
    for s in range(n):
        ax = pts[s, 0]
        ay = pts[s, 1]
        ia = int(np.floor(ax / eta))
        ja = int(np.floor(ay / eta))
        added += _mark(bits, times, ia, ja, i0, j0, t)
        if not link[s] or s + 1 >= n:
            continue
        bx = pts[s + 1, 0]
        by = pts[s + 1, 1]
        ib = int(np.floor(bx / eta))
        jb = int(np.floor(by / eta))
        added += _mark(bits, times, ib, jb, i0, j0, t)
        if ia == ib and ja == jb:
            continue
        dx = bx - ax
        dy = by - ay
        nx = abs(ib - ia)
        ny = abs(jb - ja)
        m = nx + ny + 2
        if m > buf.shape[0]:
            buf = np.empty(2 * m)
        c = 0
        buf[c] = 0.0
        c += 1
        if dx != 0.0:
            lo = min(ia, ib)
            hi = max(ia, ib)
            for g in range(lo + 1, hi + 1):
                tt = (g * eta - ax) / dx
                if 0.0 < tt < 1.0:
                    buf[c] = tt
                    c += 1
        if dy != 0.0:
            lo = min(ja, jb)
            hi = max(ja, jb)
            for g in range(lo + 1, hi + 1):
                tt = (g * eta - ay) / dy
                if 0.0 < tt < 1.0:
                    buf[c] = tt
                    c += 1
        buf[c] = 1.0
        c += 1
        ts = np.sort(buf[:c])
        for q in range(c):
            tq = ts[q]
            px = ax + tq * dx
            py = ay + tq * dy
            added += _mark(bits, times, int(np.floor(px / eta)), int(np.floor(py / eta)),
                           i0, j0, t)
            if q + 1 < c:
                tm = 0.5 * (tq + ts[q + 1])
                px = ax + tm * dx
                py = ay + tm * dy
                added += _mark(bits, times, int(np.floor(px / eta)), int(np.floor(py / eta)),
                               i0, j0, t)
    return added


@njit(cache=True)
def min_dist_segments(pts, link, ax, ay):
    """Minimum distance from point A to the union of linked segments and vertices."""
    n = pts.shape[0]
    best = np.inf
    for s in range(n):
        px = pts[s, 0] - ax
        py = pts[s, 1] - ay
        d = px * px + py * py
        if d < best:
            best = d
        if link[s] and s + 1 < n:
            qx = pts[s + 1, 0] - ax
            qy = pts[s + 1, 1] - ay
            ex = qx - px
            ey = qy - py
            ee = ex * ex + ey * ey
            if ee > 0.0:
                tt = -(px * ex + py * ey) / ee
                if 0.0 < tt < 1.0:
                    cx = px + tt * ex
                    cy = py + tt * ey
                    d = cx * cx + cy * cy
                    if d < best:
                        best = d
    return np.sqrt(best)


@njit(cache=True)
def vertex_dists(pts, ax, ay):
    n = pts.shape[0]
    out = np.empty(n)
    for s in range(n):
        dx = pts[s, 0] - ax
        dy = pts[s, 1] - ay
        out[s] = np.sqrt(dx * dx + dy * dy)
    return out
