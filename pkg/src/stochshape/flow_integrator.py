"""Brownian increments and integrators for the Stratonovich flow.

The primary scheme is Lie-Trotter splitting: flow along ``X_0`` for ``h``,
then along each ``X_k`` for the signed "time" ``dtheta_k``. Each substep is an
RK4 solve, internally subdivided so that no RK4 stage moves a point by more
than ``substep_disp`` or rotates the linearisation by more than
``substep_rot``. A Stratonovich Heun step is provided as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K
from .field_model import StreamSpec

DEFAULT_H = 0.01


@dataclass(frozen=True)
class Integrator:
    """Step size and substep control shared by every simulation routine.

    Each RK4 substep moves a point by at most ``substep_disp`` and turns the
    linearisation by at most ``substep_rot`` (``tangent_rot`` when the tangent
    matrix is integrated, where the determinant must stay within 1e-6 of 1).
    """

    h: float = DEFAULT_H
    substep_disp: float = 0.1
    substep_rot: float = 0.5
    tangent_rot: float = 0.1
    max_substeps: int = 64

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if not (self.substep_disp > 0 and self.substep_rot > 0 and self.tangent_rot > 0
                and self.max_substeps >= 1):
            raise ValueError("substep controls must be positive")

    def kernel_opts(self, tangent: bool = False):
        return (self.substep_disp, self.tangent_rot if tangent else self.substep_rot,
                self.max_substeps)


def realization_seed(master_seed: int, index: int) -> int:
    """64-bit seed of realization ``index``.

    Splitting rule: ``SeedSequence(entropy=master_seed, spawn_key=(index,))``
    hashed to two 32-bit words. Each realization depends only on the pair
    ``(master_seed, index)``, never on how many realizations came before.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


class NoisePath:
    """Seeded Brownian increments for one realization.

    Increments are drawn lazily in blocks from a PCG64 stream seeded with
    ``seed``; block boundaries do not affect the values, so any prefix is
    reproduced bit for bit. An explicit increment array can be supplied
    instead (``NoisePath.from_increments``); such a path is finite.
    """

    def __init__(self, seed: int | None, h: float, d: int, increments: np.ndarray | None = None):
        if not h > 0:
            raise ValueError("h must be positive")
        self.seed = seed
        self.h = float(h)
        self.d = int(d)
        self._fixed = increments is not None
        if increments is not None:
            inc = np.asarray(increments, dtype=float)
            if inc.ndim != 2 or inc.shape[1] != d:
                raise ValueError(f"increments must have shape (n, {d})")
            self._buf = inc.copy()
            self._gen = None
        else:
            self._buf = np.empty((0, self.d))
            self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))

    @classmethod
    def from_increments(cls, increments, h: float) -> "NoisePath":
        inc = np.asarray(increments, dtype=float)
        return cls(None, h, inc.shape[1], inc)

    @classmethod
    def for_realization(cls, master_seed: int, index: int, h: float, d: int) -> "NoisePath":
        return cls(realization_seed(master_seed, index), h, d)

    def __len__(self):
        return self._buf.shape[0]

    def _extend(self, n: int):
        if n <= self._buf.shape[0]:
            return
        if self._fixed:
            raise IndexError(f"explicit noise path has only {self._buf.shape[0]} steps, need {n}")
        grow = max(n - self._buf.shape[0], 1024, self._buf.shape[0] // 2)
        new = self._gen.standard_normal((grow, self.d)) * np.sqrt(self.h)
        self._buf = np.concatenate([self._buf, new])

    def increments(self, start: int, stop: int) -> np.ndarray:
        """Rows ``start..stop-1`` of the increment sequence (shape ``(stop-start, d)``)."""
        self._extend(stop)
        return self._buf[start:stop]

    def increment(self, step: int) -> np.ndarray:
        self._extend(step + 1)
        return self._buf[step]

    def coarsen(self, factor: int, n_steps: int) -> "NoisePath":
        """Path with step ``factor * h`` whose increments are sums of ``factor`` consecutive ones."""
        inc = self.increments(0, n_steps * factor)
        return NoisePath.from_increments(inc.reshape(n_steps, factor, self.d).sum(axis=1),
                                         self.h * factor)


def n_steps_for(T: float, h: float) -> int:
    n = int(round(T / h))
    if abs(n * h - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a multiple of h={h}")
    return n


def _check_incr(spec: StreamSpec, incr) -> np.ndarray:
    incr = np.asarray(incr, dtype=float).reshape(-1)
    if incr.shape[0] != spec.d:
        raise ValueError(f"increment must have {spec.d} entries")
    return incr


def step_point(spec: StreamSpec, x, incr, h: float, integ: Integrator | None = None) -> np.ndarray:
    """One splitting step for a point or an ``(n, 2)`` array of points (same increments)."""
    if not h > 0:
        raise ValueError("h must be positive")
    integ = integ or Integrator(h=h)
    incr = _check_incr(spec, incr)
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    out = K.step_points(spec.packed, spec.sup_speed, spec.sup_jacobian, pts, incr, float(h),
                        *integ.kernel_opts())
    return out[0] if np.ndim(x) == 1 else out


def step_heun(spec: StreamSpec, x, incr, h: float) -> np.ndarray:
    """Stratonovich Heun (predictor-corrector) step."""
    if not h > 0:
        raise ValueError("h must be positive")
    incr = _check_incr(spec, incr)
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.empty_like(pts)
    for i, p in enumerate(pts):
        out[i] = K.heun_one(spec.packed, p[0], p[1], incr, float(h))
    return out[0] if np.ndim(x) == 1 else out


@dataclass
class TangentState:
    """Plane position (unwrapped) and the 2x2 tangent matrix ``Dx_t`` applied to the initial frame."""

    x: np.ndarray
    M: np.ndarray = field(default_factory=lambda: np.eye(2))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.M))


def step_tangent(spec: StreamSpec, state: TangentState, incr, h: float,
                 integ: Integrator | None = None) -> TangentState:
    if not h > 0:
        raise ValueError("h must be positive")
    integ = integ or Integrator(h=h)
    incr = _check_incr(spec, incr)
    m = np.array(state.M, dtype=float, copy=True)
    x, y = K.tangent_step(spec.packed, spec.sup_speed, spec.sup_jacobian,
                          float(state.x[0]), float(state.x[1]), m, incr, float(h),
                          *integ.kernel_opts(tangent=True))
    return TangentState(np.array([x, y]), m)


def run_tangent(spec: StreamSpec, state: TangentState, noise: NoisePath, n_steps: int,
                integ: Integrator | None = None, start: int = 0) -> TangentState:
    """Advance a tangent state through ``n_steps`` increments without renormalising."""
    integ = integ or Integrator(h=noise.h)
    m = np.array(state.M, dtype=float, copy=True)
    x, y = float(state.x[0]), float(state.x[1])
    inc = noise.increments(start, start + n_steps)
    for s in range(n_steps):
        x, y = K.tangent_step(spec.packed, spec.sup_speed, spec.sup_jacobian, x, y, m,
                              inc[s], noise.h, *integ.kernel_opts(tangent=True))
    return TangentState(np.array([x, y]), m)


def run_points(spec: StreamSpec, pts, noise: NoisePath, n_steps: int,
               integ: Integrator | None = None, start: int = 0) -> np.ndarray:
    """Advance many points with common increments."""
    integ = integ or Integrator(h=noise.h)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return K.step_points_path(spec.packed, spec.sup_speed, spec.sup_jacobian, pts,
                              np.ascontiguousarray(noise.increments(start, start + n_steps)),
                              noise.h, *integ.kernel_opts())


def flow_two_point(spec: StreamSpec, x1, x2, noise: NoisePath, T: float,
                   sample_every: int = 1, integ: Integrator | None = None):
    """Advance two points with the same increments.

    Returns ``(times, path)`` with ``path`` of shape ``(n_samples, 2, 2)``:
    sample index, point index, coordinate.
    """
    n = n_steps_for(T, noise.h)
    integ = integ or Integrator(h=noise.h)
    pts = np.array([x1, x2], dtype=float)
    out = [pts.copy()]
    times = [0.0]
    inc = noise.increments(0, n)
    for s in range(n):
        pts = K.step_points(spec.packed, spec.sup_speed, spec.sup_jacobian, pts, inc[s],
                            noise.h, *integ.kernel_opts())
        if (s + 1) % sample_every == 0:
            out.append(pts.copy())
            times.append((s + 1) * noise.h)
    return np.array(times), np.array(out)


class LyapunovError(RuntimeError):
    pass


@dataclass
class LyapunovResult:
    lambda1: float
    lambda2: float
    stderr: float
    stderr2: float
    sum_stderr: float
    log_det: float
    T: float
    n_batches: int
    batch_lambda1: np.ndarray

    @property
    def ci95(self) -> tuple[float, float]:
        return self.lambda1 - 1.96 * self.stderr, self.lambda1 + 1.96 * self.stderr

    @property
    def det_drift(self) -> float:
        """``|det Dx_T - 1|`` reconstructed from the QR factors."""
        return float(abs(np.expm1(self.log_det)))

    def as_dict(self) -> dict:
        lo, hi = self.ci95
        return {
            "lambda1": self.lambda1, "lambda2": self.lambda2, "stderr": self.stderr,
            "stderr_lambda2": self.stderr2, "lambda1_ci95": [lo, hi],
            "sum": self.lambda1 + self.lambda2, "sum_stderr": self.sum_stderr,
            "det_drift": self.det_drift, "T": self.T, "n_batches": self.n_batches,
        }


def lyapunov_estimate(spec: StreamSpec, x0, v0, T: float, h: float, seed: int,
                      renorm_interval: float = 1.0, n_batches: int = 20,
                      integ: Integrator | None = None) -> LyapunovResult:
    """Both Lyapunov exponents from one tangent run with QR renormalisation.

    The frame starts at ``[v0, v0_perp]`` and is re-orthonormalised every
    ``renorm_interval`` time units. ``lambda1`` is the mean log stretch of the
    first column; ``lambda2`` the log-determinant accumulation minus
    ``lambda1``. Standard errors come from batch means over ``n_batches``
    equal time segments.
    """
    if T < 10:
        raise ValueError("T must be at least 10")
    every = n_steps_for(renorm_interval, h)
    n = n_steps_for(T, h)
    if n % every:
        raise ValueError("T must be a multiple of the renormalisation interval")
    integ = integ or Integrator(h=h)
    v0 = np.asarray(v0, dtype=float)
    v0 = v0 / np.linalg.norm(v0)
    noise = NoisePath(seed, h, spec.d)
    frame = np.array([[v0[0], -v0[1]], [v0[1], v0[0]]])
    logs_all = []
    x, y = float(x0[0]), float(x0[1])
    chunk = max(every, (200_000 // every) * every)
    done = 0
    while done < n:
        m_steps = min(chunk, n - done)
        inc = np.ascontiguousarray(noise.increments(done, done + m_steps))
        logs, x, y = _lyap_chunk(spec, x, y, frame, inc, h, every, integ)
        logs_all.append(logs)
        done += m_steps
    logs = np.concatenate(logs_all)
    if not np.all(np.isfinite(logs)):
        raise LyapunovError("non-finite stretch factor; reduce renorm_interval or h")
    n_int = logs.shape[0]
    nb = min(n_batches, n_int)
    per = n_int // nb
    used = logs[: per * nb]
    b1 = used[:, 0].reshape(nb, per).sum(1) / (per * renorm_interval)
    b2 = used[:, 1].reshape(nb, per).sum(1) / (per * renorm_interval)
    bs = b1 + b2
    lam1 = logs[:, 0].sum() / T
    lam2 = logs[:, 1].sum() / T
    return LyapunovResult(
        lambda1=float(lam1), lambda2=float(lam2),
        stderr=float(b1.std(ddof=1) / np.sqrt(nb)), stderr2=float(b2.std(ddof=1) / np.sqrt(nb)),
        sum_stderr=float(bs.std(ddof=1) / np.sqrt(nb)),
        log_det=float(logs.sum()), T=float(T), n_batches=nb, batch_lambda1=b1,
    )


def _lyap_chunk(spec, x, y, frame, inc, h, every, integ):
    logs, x, y = K.lyapunov_run(spec.packed, spec.sup_speed, spec.sup_jacobian, x, y, frame,
                                inc, h, every, *integ.kernel_opts(tangent=True))
    return logs, x, y


@dataclass
class DisplacementStats:
    T: float
    n: int
    mean_drift: np.ndarray
    drift_se: np.ndarray
    cov_over_t: np.ndarray
    excess_kurtosis: np.ndarray
    kurtosis_se: np.ndarray
    times: np.ndarray = field(repr=False, default=None)
    displacements: np.ndarray = field(repr=False, default=None)

    def at(self, t: float) -> "DisplacementStats":
        """Statistics of the same ensemble at an earlier sampled time."""
        i = int(np.argmin(np.abs(self.times - t)))
        return _summarise(self.displacements[:, i], float(self.times[i]), self.times,
                          self.displacements)


def _summarise(disp: np.ndarray, T: float, times, all_disp) -> DisplacementStats:
    n = disp.shape[0]
    mean = disp.mean(axis=0)
    se = disp.std(axis=0, ddof=1) / np.sqrt(n)
    cov = np.cov(disp.T) / T
    c = disp - mean
    m2 = (c**2).mean(axis=0)
    m4 = (c**4).mean(axis=0)
    kurt = m4 / m2**2 - 3.0
    # standard error of sample excess kurtosis for a normal population
    kse = np.full(2, np.sqrt(24.0 * n * (n - 1) ** 2 / ((n - 3) * (n - 2) * (n + 3) * (n + 5))))
    return DisplacementStats(float(T), n, mean / T, se / T, cov, kurt, kse, times, all_disp)


def displacement_stats(spec: StreamSpec, n: int, T: float, h: float, master_seed: int,
                       sample_times: Sequence[float] | None = None,
                       integ: Integrator | None = None) -> DisplacementStats:
    """Ensemble of ``n`` independent single-point runs started uniformly on the torus.

    Reports mean displacement / T with its standard error, displacement
    covariance / T, and componentwise excess kurtosis. Positions are kept at
    ``sample_times`` (default: every time unit) so that :meth:`DisplacementStats.at`
    can report earlier times from the same ensemble.
    """
    if n < 100:
        raise ValueError("n must be at least 100")
    integ = integ or Integrator(h=h)
    steps = n_steps_for(T, h)
    every = n_steps_for(1.0, h) if sample_times is None else 1
    rng0 = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(master_seed), 0xD15])))
    x0 = rng0.random((n, 2))
    paths = [NoisePath.for_realization(master_seed, i, h, spec.d) for i in range(n)]
    chunk = max(every, (4000 // every) * every)
    pos = x0.copy()
    samples = [pos.copy()]
    done = 0
    while done < steps:
        m = min(chunk, steps - done)
        inc = np.stack([p.increments(done, done + m) for p in paths])
        out = K.step_points_independent(spec.packed, spec.sup_speed, spec.sup_jacobian, pos,
                                        np.ascontiguousarray(inc), h, *integ.kernel_opts(),
                                        every)
        samples.extend(out[:, j] for j in range(1, out.shape[1]))
        pos = out[:, -1].copy() if m % every == 0 else _finish(spec, pos, inc, h, integ)
        done += m
    sampled = np.stack(samples, axis=1)
    times = np.arange(sampled.shape[1]) * every * h
    disp = sampled - x0[:, None, :]
    res = _summarise(disp[:, -1], float(T), times, disp)
    if sample_times is not None:
        keep = [int(np.argmin(np.abs(times - t))) for t in sample_times]
        res.times = times[keep]
        res.displacements = disp[:, keep]
    return res


def _finish(spec, pos, inc, h, integ):
    return K.step_points_independent(spec.packed, spec.sup_speed, spec.sup_jacobian, pos,
                                      np.ascontiguousarray(inc), h, *integ.kernel_opts(),
                                      inc.shape[1])[:, -1]


@dataclass
class SchemeComparison:
    """Endpoint displacement means of the splitting and Heun schemes from common starts."""

    T: float
    h: float
    n: int
    mean_split: np.ndarray
    se_split: np.ndarray
    mean_heun: np.ndarray
    se_heun: np.ndarray
    paired_diff: np.ndarray
    paired_se: np.ndarray

    @property
    def joint_se(self) -> np.ndarray:
        return np.hypot(self.se_split, self.se_heun)

    @property
    def z(self) -> np.ndarray:
        """Componentwise mean difference in units of the joint standard error."""
        return np.abs(self.mean_split - self.mean_heun) / self.joint_se

    def as_dict(self) -> dict:
        return {"T": self.T, "h": self.h, "n": self.n,
                "mean_split": self.mean_split.tolist(), "se_split": self.se_split.tolist(),
                "mean_heun": self.mean_heun.tolist(), "se_heun": self.se_heun.tolist(),
                "z": self.z.tolist(), "paired_diff": self.paired_diff.tolist(),
                "paired_se": self.paired_se.tolist()}


def compare_schemes(spec: StreamSpec, n: int, T: float, h: float, master_seed: int,
                    integ: Integrator | None = None) -> SchemeComparison:
    """Weak cross-check of :func:`step_point` against :func:`step_heun`.

    Both schemes start from the same ``n`` uniform torus points. The unpaired
    comparison drives each scheme with its own independent noise (realization
    indices ``i`` and ``n + i``); the paired difference reuses the splitting
    noise for a second Heun run.
    """
    integ = integ or Integrator(h=h)
    steps = n_steps_for(T, h)
    rng0 = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(master_seed), 0x4E0])))
    x0 = rng0.random((n, 2))
    inc_a = np.stack([NoisePath.for_realization(master_seed, i, h, spec.d).increments(0, steps)
                      for i in range(n)])
    inc_b = np.stack([NoisePath.for_realization(master_seed, n + i, h, spec.d).increments(0, steps)
                      for i in range(n)])
    split = K.step_points_independent(spec.packed, spec.sup_speed, spec.sup_jacobian, x0,
                                      np.ascontiguousarray(inc_a), h, *integ.kernel_opts(),
                                      steps)[:, -1] - x0
    heun = K.heun_points_independent(spec.packed, x0, np.ascontiguousarray(inc_b), h) - x0
    heun_a = K.heun_points_independent(spec.packed, x0, np.ascontiguousarray(inc_a), h) - x0
    rt = np.sqrt(n)
    d = split - heun_a
    return SchemeComparison(float(T), float(h), n, split.mean(0), split.std(0, ddof=1) / rt,
                            heun.mean(0), heun.std(0, ddof=1) / rt, d.mean(0),
                            d.std(0, ddof=1) / rt)


@dataclass
class ConvergenceStudy:
    """Strong self-convergence of the splitting scheme under step halving."""

    T: float
    h: float
    n_paths: int
    err_h: np.ndarray
    err_h2: np.ndarray

    @property
    def factor(self) -> float:
        """Mean endpoint error ``|x_h - x_{h/2}|`` over mean ``|x_{h/2} - x_{h/4}|``."""
        return float(self.err_h.mean() / self.err_h2.mean())

    def as_dict(self) -> dict:
        return {"T": self.T, "h": self.h, "n_paths": self.n_paths,
                "mean_err_h": float(self.err_h.mean()),
                "mean_err_h2": float(self.err_h2.mean()), "factor": self.factor}


def strong_convergence(spec: StreamSpec, n_paths: int, T: float, h: float, master_seed: int,
                       integ: Integrator | None = None) -> ConvergenceStudy:
    """Endpoint errors between runs at ``h``, ``h/2`` and ``h/4`` on one Brownian path.

    The finest path has step ``h/4``; coarser increments are sums of
    consecutive fine ones. The substep controls of ``integ`` are reused at
    every level.
    """
    integ = integ or Integrator(h=h)
    n = n_steps_for(T, h)
    rng0 = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(master_seed), 0x5C0])))
    x0 = rng0.random((n_paths, 2))
    ends = []
    for factor in (4, 2, 1):
        hh = h / factor
        inc = np.stack([
            NoisePath.for_realization(master_seed, i, h / 4, spec.d).coarsen(4 // factor, n * factor)
            .increments(0, n * factor) for i in range(n_paths)])
        ends.append(K.step_points_independent(spec.packed, spec.sup_speed, spec.sup_jacobian,
                                              x0, np.ascontiguousarray(inc), hh,
                                              *integ.kernel_opts(), n * factor)[:, -1])
    fine, mid, coarse = ends
    return ConvergenceStudy(float(T), float(h), n_paths,
                            np.linalg.norm(coarse - mid, axis=1), np.linalg.norm(mid - fine, axis=1))
