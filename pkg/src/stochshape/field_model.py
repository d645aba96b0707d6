"""Periodic divergence-free fields given by trigonometric stream functions.

Every field ``X_k`` is the rotated gradient of a stream function

    H_k(x) = sum_j a_j cos(2 pi n_j . x + phi_j),     X_k = (-dH_k/dx2, dH_k/dx1),

so it is exactly divergence free and, because every wavevector is nonzero, has
zero mean over the torus. ``X_0`` (the deterministic drift) is represented the
same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import _kernels

TWO_PI = 2.0 * np.pi
MAX_COMPONENTS = 8
MAX_MODES = 64
CONTRACT_Z = 2.0


@dataclass(frozen=True)
class Mode:
    amplitude: float
    n1: int
    n2: int
    phase: float = 0.0

    def __post_init__(self):
        if int(self.n1) != self.n1 or int(self.n2) != self.n2:
            raise ValueError(f"wavevector must be integer, got ({self.n1}, {self.n2})")
        if self.n1 == 0 and self.n2 == 0:
            raise ValueError("wavevector (0, 0) is not allowed (stream functions have zero mean)")


@dataclass(frozen=True)
class StreamSpec:
    """Fourier description of the noise stream functions ``H_1..H_d`` and the drift ``X_0``.

    Parameters
    ----------
    components : sequence of sequences of Mode
        One mode list per noise component; at least two components.
    drift_modes : sequence of Mode, optional
        Stream function of the deterministic drift ``X_0``.
    """

    components: tuple[tuple[Mode, ...], ...]
    drift_modes: tuple[Mode, ...] = field(default=())
    max_modes: int = MAX_MODES

    def __post_init__(self):
        comps = tuple(tuple(_as_mode(m) for m in c) for c in self.components)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "drift_modes", tuple(_as_mode(m) for m in self.drift_modes))
        if not 1 <= len(comps) <= MAX_COMPONENTS:
            raise ValueError(f"need 1..{MAX_COMPONENTS} components, got {len(comps)}")
        for k, c in enumerate(comps, start=1):
            if len(c) == 0:
                raise ValueError(f"component {k} has no modes")
            if len(c) > self.max_modes:
                raise ValueError(f"component {k} exceeds the mode cap {self.max_modes}")
        if len(self.drift_modes) > self.max_modes:
            raise ValueError("drift exceeds the mode cap")

    @property
    def d(self) -> int:
        return len(self.components)

    @cached_property
    def packed(self) -> np.ndarray:
        """Mode table of shape ``(d + 1, M, 4)``; row 0 is the drift."""
        rows = [self.drift_modes, *self.components]
        width = max(1, max(len(r) for r in rows))
        arr = np.zeros((len(rows), width, 4))
        for k, r in enumerate(rows):
            for j, m in enumerate(r):
                arr[k, j] = (m.amplitude, m.n1, m.n2, m.phase)
        arr.setflags(write=False)
        return arr

    @cached_property
    def sup_speed(self) -> np.ndarray:
        """Upper bound of ``|X_k|`` per row of :attr:`packed`."""
        a = np.abs(self.packed[:, :, 0])
        nn = np.hypot(self.packed[:, :, 1], self.packed[:, :, 2])
        return TWO_PI * (a * nn).sum(axis=1)

    @cached_property
    def sup_jacobian(self) -> np.ndarray:
        """Upper bound of the spectral norm of ``DX_k`` per row of :attr:`packed`."""
        a = np.abs(self.packed[:, :, 0])
        nn2 = self.packed[:, :, 1] ** 2 + self.packed[:, :, 2] ** 2
        return TWO_PI**2 * (a * nn2).sum(axis=1)

    @cached_property
    def noise_intensity(self) -> float:
        """Upper estimate of ``sup_x sum_k |X_k(x)|^2`` (the per-unit-time displacement variance).

        Grid maximum on an ``N x N`` grid, padded by ``1 + (2 pi K / N)^2`` for the
        worst-case curvature of a degree-``K`` trigonometric polynomial between nodes.
        """
        K = max(1, self.max_wavenumber())
        N = max(64, 16 * K)
        g = (np.arange(N) + 0.5) / N
        pts = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
        tot = np.zeros(pts.shape[0])
        for k in range(1, self.d + 1):
            tot += (eval_field(self, k, pts) ** 2).sum(axis=1)
        return float(tot.max() * (1.0 + (TWO_PI * K / N) ** 2))

    def step_displacement_bound(self, h: float, z: float = CONTRACT_Z) -> float:
        """``z``-sigma bound on one step's displacement: ``sup|X_0| h + z sqrt(h * noise_intensity)``.

        Gaussian increments make any deterministic bound infinite; the default
        ``z = 2`` is the contract used for config validation, and runs report the
        realized maximum separately.
        """
        return float(self.sup_speed[0] * h + z * np.sqrt(h * self.noise_intensity))

    def scaled(self, factor: float) -> "StreamSpec":
        """Same spec with every amplitude multiplied by ``factor``."""
        def sc(ms):
            return tuple(Mode(m.amplitude * factor, m.n1, m.n2, m.phase) for m in ms)
        return StreamSpec(tuple(sc(c) for c in self.components), sc(self.drift_modes),
                          self.max_modes)

    def max_wavenumber(self) -> int:
        p = self.packed
        return int(np.max(np.abs(p[:, :, 1:3])))


def _as_mode(m) -> Mode:
    if isinstance(m, Mode):
        return m
    return Mode(*m)


def _row(spec: StreamSpec, k: int) -> int:
    if not 1 <= k <= spec.d:
        raise IndexError(f"component index {k} out of range 1..{spec.d}")
    return k


def _points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), single


def _phases(modes: np.ndarray, pts: np.ndarray) -> np.ndarray:
    wrapped = pts - np.floor(pts)
    return TWO_PI * (wrapped[:, None, 0] * modes[None, :, 1]
                     + wrapped[:, None, 1] * modes[None, :, 2]) + modes[None, :, 3]


def _stream_row(spec, row, x):
    pts, single = _points(x)
    m = spec.packed[row]
    val = (m[None, :, 0] * np.cos(_phases(m, pts))).sum(axis=1)
    return val[0] if single else val


def _field_row(spec, row, x):
    pts, single = _points(x)
    m = spec.packed[row]
    s = TWO_PI * m[None, :, 0] * np.sin(_phases(m, pts))
    out = np.stack([(s * m[None, :, 2]).sum(1), -(s * m[None, :, 1]).sum(1)], axis=-1)
    return out[0] if single else out


def _jacobian_row(spec, row, x):
    pts, single = _points(x)
    m = spec.packed[row]
    c = TWO_PI**2 * m[None, :, 0] * np.cos(_phases(m, pts))
    n1 = m[None, :, 1]
    n2 = m[None, :, 2]
    out = np.empty((pts.shape[0], 2, 2))
    out[:, 0, 0] = (c * n2 * n1).sum(1)
    out[:, 0, 1] = (c * n2 * n2).sum(1)
    out[:, 1, 0] = -(c * n1 * n1).sum(1)
    out[:, 1, 1] = -(c * n1 * n2).sum(1)
    return out[0] if single else out


def eval_stream(spec: StreamSpec, k: int, x) -> float | np.ndarray:
    """Value of ``H_k`` at ``x`` (a point or an ``(n, 2)`` array)."""
    return _stream_row(spec, _row(spec, k), x)


def eval_field(spec: StreamSpec, k: int, x) -> np.ndarray:
    """Velocity ``X_k(x)``; coordinates are wrapped onto the torus before evaluation."""
    return _field_row(spec, _row(spec, k), x)


def eval_jacobian(spec: StreamSpec, k: int, x) -> np.ndarray:
    """Jacobian ``DX_k(x)``; rows are velocity components, columns derivatives."""
    return _jacobian_row(spec, _row(spec, k), x)


def eval_drift(spec: StreamSpec, x) -> np.ndarray:
    return _field_row(spec, 0, x)


def eval_hessian(spec: StreamSpec, k: int, x) -> np.ndarray:
    """Hessian of ``H_k``."""
    pts, single = _points(x)
    m = spec.packed[_row(spec, k)]
    c = -TWO_PI**2 * m[None, :, 0] * np.cos(_phases(m, pts))
    n1 = m[None, :, 1]
    n2 = m[None, :, 2]
    out = np.empty((pts.shape[0], 2, 2))
    out[:, 0, 0] = (c * n1 * n1).sum(1)
    out[:, 0, 1] = out[:, 1, 0] = (c * n1 * n2).sum(1)
    out[:, 1, 1] = (c * n2 * n2).sum(1)
    return out[0] if single else out


def eval_gradient(spec: StreamSpec, k: int, x) -> np.ndarray:
    """Gradient of ``H_k``."""
    v = eval_field(spec, k, x)
    return np.stack([v[..., 1], -v[..., 0]], axis=-1)


def ito_drift(spec: StreamSpec, x) -> np.ndarray:
    """Deterministic drift of the flow written in Ito form.

    ``b(x) = 1/2 sum_k DX_k(x) X_k(x) + X_0(x)``; the one-step mean displacement
    of the Stratonovich flow is ``b(x) h + O(h^2)``.
    """
    pts, single = _points(x)
    out = eval_drift(spec, pts)
    for k in range(1, spec.d + 1):
        out = out + 0.5 * np.einsum("nij,nj->ni", eval_jacobian(spec, k, pts),
                                    eval_field(spec, k, pts))
    return out[0] if single else out


def lie_bracket(spec: StreamSpec, j: int, k: int, x) -> np.ndarray:
    """``[X_j, X_k](x) = DX_k X_j - DX_j X_k``."""
    pts, single = _points(x)
    xj = eval_field(spec, j, pts)
    xk = eval_field(spec, k, pts)
    out = (np.einsum("nab,nb->na", eval_jacobian(spec, k, pts), xj)
           - np.einsum("nab,nb->na", eval_jacobian(spec, j, pts), xk))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# condition checks


@dataclass
class CriticalPoint:
    location: tuple[float, float]
    kind: str
    value: float
    hessian_det: float


@dataclass
class FieldDiagnostics:
    zero_drift_residual: float
    mean_field_residual: float
    critical_points: list[list[CriticalPoint]]
    condition_A_rank_ok: np.ndarray
    condition_E_ok: bool
    violation: tuple | None = None
    newton_failures: int = 0
    min_value_gap: float = np.inf
    min_abs_hessian_det: float = np.inf
    drift_tol: float = 1e-8

    @property
    def condition_A_ok(self) -> bool:
        return bool(np.all(self.condition_A_rank_ok))

    @property
    def condition_D_ok(self) -> bool:
        return self.zero_drift_residual <= self.drift_tol and self.mean_field_residual <= self.drift_tol

    @property
    def all_ok(self) -> bool:
        return self.condition_A_ok and self.condition_D_ok and self.condition_E_ok

    def table(self) -> list[tuple[str, bool, str]]:
        a_frac = float(np.mean(self.condition_A_rank_ok))
        return [
            ("A hypoellipticity (rank 2)", self.condition_A_ok,
             f"rank-2 fraction {a_frac:.4f}"),
            ("D zero drift", self.condition_D_ok,
             f"Ito drift residual {self.zero_drift_residual:.2e}, "
             f"mean field residual {self.mean_field_residual:.2e}"),
            ("E critical points", self.condition_E_ok,
             f"min |det Hess| {self.min_abs_hessian_det:.3e}, "
             f"min value gap {self.min_value_gap:.3e}"
             + (f", violation {self.violation}" if self.violation else "")),
        ]


def torus_quadrature(fn, n: int) -> np.ndarray:
    """Midpoint-rule mean of ``fn`` over the unit torus on an ``n x n`` grid.

    Exact for trigonometric polynomials of degree below ``n``.
    """
    g = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    return np.asarray(fn(pts)).mean(axis=0)


def _classify(hess: np.ndarray, det_tol: float) -> str:
    det = np.linalg.det(hess)
    if abs(det) < det_tol:
        return "degenerate"
    if det < 0:
        return "saddle"
    return "min" if np.trace(hess) > 0 else "max"


def find_critical_points(spec: StreamSpec, k: int, grid_n: int = 32, max_iter: int = 50,
                         tol: float = 1e-12, merge_tol: float = 1e-9, det_tol: float = 1e-8):
    """Newton iteration on ``grad H_k`` from a ``grid_n x grid_n`` seed grid.

    Returns ``(points, n_failures)``. Seeds converging within ``merge_tol`` (on the
    torus) are merged. Seeds landing on degenerate points do not converge
    quadratically and are counted as failures unless the gradient vanishes.
    """
    g = (np.arange(grid_n) + 0.5) / grid_n
    xx, yy = np.meshgrid(g, g, indexing="ij")
    seeds = np.column_stack([xx.ravel(), yy.ravel()])
    found: list[np.ndarray] = []
    failures = 0
    scale = max(spec.sup_jacobian[k], 1e-300)
    for x in seeds:
        ok = False
        for _ in range(max_iter):
            gr = eval_gradient(spec, k, x)
            hs = eval_hessian(spec, k, x)
            if np.linalg.norm(gr) < tol * scale:
                ok = True
                break
            try:
                dx = np.linalg.solve(hs, gr)
            except np.linalg.LinAlgError:
                break
            step = np.linalg.norm(dx)
            if step > 0.25:
                dx *= 0.25 / step
            x = x - dx
        if not ok:
            failures += 1
            continue
        x = x - np.floor(x)
        dup = False
        for p in found:
            dd = np.abs(x - p)
            dd = np.minimum(dd, 1.0 - dd)
            if np.hypot(*dd) < max(merge_tol, 1e-7):
                dup = True
                break
        if not dup:
            found.append(x)
    out = []
    for p in found:
        hs = eval_hessian(spec, k, p)
        out.append(CriticalPoint((float(p[0]), float(p[1])), _classify(hs, det_tol),
                                 float(eval_stream(spec, k, p)), float(np.linalg.det(hs))))
    return out, failures


def check_conditions(spec: StreamSpec, grid_n: int = 64, det_tol: float = 1e-8,
                     value_tol: float = 1e-6, rank_tol: float = 1e-8,
                     drift_tol: float = 1e-8) -> FieldDiagnostics:
    """Numerical checks of hypoellipticity, zero drift and the critical-point condition.

    (A) the fields and their first brackets span the plane at every point of a
    ``grid_n x grid_n`` sample grid; (D) the torus means of the Ito drift and of
    each field vanish; (E) every critical point of every ``H_k`` is
    nondegenerate and critical values of the same ``H_k`` are pairwise distinct.
    Newton failures are reported as a violation, never raised.
    """
    if grid_n < 8:
        raise ValueError("grid_n must be at least 8")
    d = spec.d
    quad_n = max(16, 4 * spec.max_wavenumber() + 4)
    drift = torus_quadrature(lambda p: ito_drift(spec, p), quad_n)
    mean_field = max(float(np.abs(torus_quadrature(lambda p: eval_field(spec, k, p), quad_n)).max())
                     for k in range(1, d + 1))

    g = (np.arange(grid_n) + 0.5) / grid_n
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    vecs = [eval_field(spec, k, pts) for k in range(1, d + 1)]
    for j in range(1, d + 1):
        for k in range(j + 1, d + 1):
            vecs.append(lie_bracket(spec, j, k, pts))
    stack = np.stack(vecs, axis=1)  # (n, m, 2)
    gram = np.einsum("nmi,nmj->nij", stack, stack)
    eig_min = np.linalg.eigvalsh(gram)[:, 0]
    scale = float(np.max(spec.sup_jacobian[1:]) ** 2 + np.max(spec.sup_speed[1:]) ** 2)
    rank_ok = (eig_min > rank_tol * max(scale, 1e-300)).reshape(grid_n, grid_n)

    crit: list[list[CriticalPoint]] = []
    e_ok = True
    violation = None
    failures = 0
    min_gap = np.inf
    min_det = np.inf
    for k in range(1, d + 1):
        pts_k, fails = find_critical_points(spec, k, grid_n=max(8, grid_n // 2), det_tol=det_tol)
        failures += fails
        crit.append(pts_k)
        if fails and e_ok:
            e_ok = False
            violation = (k, "newton did not converge from some seeds (degenerate critical set?)")
        for p in pts_k:
            min_det = min(min_det, abs(p.hessian_det))
            if abs(p.hessian_det) < det_tol and e_ok:
                e_ok = False
                violation = (k, f"degenerate critical point at {p.location}")
        vals = sorted(p.value for p in pts_k)
        for a, b in zip(vals, vals[1:]):
            min_gap = min(min_gap, b - a)
            if b - a < value_tol and e_ok:
                e_ok = False
                violation = (k, f"critical values {a:.6g} and {b:.6g} coincide")
    return FieldDiagnostics(
        zero_drift_residual=float(np.abs(drift).max()),
        mean_field_residual=mean_field,
        critical_points=crit,
        condition_A_rank_ok=rank_ok,
        condition_E_ok=e_ok,
        violation=violation,
        newton_failures=failures,
        min_value_gap=float(min_gap),
        min_abs_hessian_det=float(min_det),
        drift_tol=drift_tol,
    )


# ---------------------------------------------------------------------------
# shipped family

# Amplitude of the shipped family; sets the time unit (lambda_1 scales with its square).
DEFAULT_AMPLITUDE = 0.05
# Mixing weight: each H_k puts weight p^2 on the x1 modes and q^2 on the x2 modes
# (or the reverse), with p != q so that saddle values differ.
_P = np.sqrt(0.8)
_Q = np.sqrt(0.2)
_PSI = np.pi / 3


def default_field_family(amplitude: float = DEFAULT_AMPLITUDE) -> StreamSpec:
    """Four mixed cellular stream functions with an exactly D4-invariant joint law.

    With base functions ``a cos(2 pi x1)``, ``a sin(2 pi x1)``, ``a cos(2 pi x2)``,
    ``a sin(2 pi x2)`` and the orthogonal mixing ``[[p R1, q R2], [-q R1, p R2]]``
    each ``H_k`` has the form ``a r cos(2 pi x1 - phi) + a s cos(2 pi x2 - psi)``
    with ``r != s``, hence four nondegenerate critical points with distinct
    values. The summed covariance ``sum_k H_k(x) H_k(y)`` equals
    ``a^2 [cos 2 pi (x1 - y1) + cos 2 pi (x2 - y2)]``, which is invariant under
    lattice translations, quarter turns and reflections, so the law of the
    flow has the same symmetries.
    """
    a = amplitude
    # R1 = identity, R2 = rotation by _PSI; rows of R give (cos, sin) weights.
    r1 = np.eye(2)
    r2 = np.array([[np.cos(_PSI), -np.sin(_PSI)], [np.sin(_PSI), np.cos(_PSI)]])
    q = np.block([[_P * r1, _Q * r2], [-_Q * r1, _P * r2]])
    comps = []
    for row in q:
        # c cos(t) + s sin(t) = rho cos(t - atan2(s, c))
        c1, s1, c2, s2 = row
        r_1 = np.hypot(c1, s1)
        r_2 = np.hypot(c2, s2)
        comps.append((
            Mode(a * r_1, 1, 0, -np.arctan2(s1, c1)),
            Mode(a * r_2, 0, 1, -np.arctan2(s2, c2)),
        ))
    return StreamSpec(tuple(comps))


def shear_spec(amplitude: float = 1.0) -> StreamSpec:
    """Single shear ``H = a cos(2 pi x2)``; a degenerate family (no stretching)."""
    return StreamSpec(((Mode(amplitude, 0, 1, 0.0),),))


def kernel_args(spec: StreamSpec):
    return spec.packed, spec.sup_speed, spec.sup_jacobian


__all__ = [
    "Mode", "StreamSpec", "FieldDiagnostics", "CriticalPoint", "eval_stream", "eval_field",
    "eval_jacobian", "eval_hessian", "eval_gradient", "eval_drift", "ito_drift",
    "lie_bracket", "check_conditions", "find_critical_points", "torus_quadrature",
    "default_field_family", "shear_spec", "DEFAULT_AMPLITUDE",
]

