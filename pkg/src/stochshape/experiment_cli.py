"""Command line front end: config files, seeded runs, CSV/JSON/SVG outputs and run manifests.

Config files are flat ``key = value`` lines grouped in ``[section]`` blocks.
The field is given either by ``[field]`` (``family = default``, ``amplitude``)
or by one ``[component]`` block per noise stream function and an optional
``[drift]`` block, each holding ``mode = a, n1, n2, phi`` lines::

    [component]
    mode = 0.05, 1, 0, 0.0
    mode = 0.04, 0, 1, 1.3

Every run writes ``manifest.json`` next to its outputs. It lists the config
text, seeds and every output file with its SHA-256, and ``stochshape replay``
re-runs it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .curve_tracker import BudgetExhausted, Polyline
from .field_model import (CONTRACT_Z, DEFAULT_AMPLITUDE, Mode, StreamSpec, check_conditions,
                          default_field_family)
from .flow_integrator import Integrator, displacement_stats, lyapunov_estimate, realization_seed
from .pruning import RadialPruner, TargetPruner
from .shape_lab import (ShapeEstimate, d4_defect, directions, passage_survey, point_norm_on_line,
                        shape_from_norms, shape_from_swept, survival_table, swept_survey)
from .swept_set import OccupancyGrid, grid_svg

EXIT_OK = 0
EXIT_DIAGNOSTIC = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3


class ConfigError(ValueError):
    """Invalid config; ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _positive(v):
    return v > 0


SCHEMA: dict[str, dict[str, tuple]] = {
    # section: key -> (parser, default, check or None)
    "field": {
        "family": (str, "default", lambda v: v == "default"),
        "amplitude": (float, DEFAULT_AMPLITUDE, _positive),
    },
    "integrator": {
        "h": (float, 0.01, _positive),
        "max_substeps": (int, 64, _positive),
        "substep_disp": (float, 0.1, _positive),
        "substep_rot": (float, 0.5, _positive),
        "tangent_rot": (float, 0.1, _positive),
        "contract_z": (float, CONTRACT_Z, _positive),
    },
    "sweep": {
        "T": (float, 50.0, _positive),
        "eta": (float, 0.1, _positive),
        "window": (_floats, (-2.0, -2.0, 2.0, 2.0), lambda v: len(v) == 4 and v[2] > v[0] and v[3] > v[1]),
        "delta_max": (float, 0.05, _positive),
        "vertex_budget": (int, 2_000_000, _positive),
        "initial": (str, "segment", lambda v: v in ("segment", "arc")),
        "prune": (str, "radial", lambda v: v in ("radial", "none")),
        "prune_cap": (int, 100, lambda v: v >= 2),
        "prune_lag": (float, 3.0, _positive),
        "prune_every": (int, 4, _positive),
        "prune_bins": (int, 32, _positive),
        "export_times": (_floats, (), lambda v: all(t > 0 for t in v)),
        "overlay_shape": (str, "", None),
    },
    "shape": {
        "R": (float, 1.0, _positive),
        "m_directions": (int, 32, lambda v: v >= 8),
        "t_ladder": (_floats, (10.0, 20.0, 40.0), lambda v: len(v) >= 2 and all(np.diff(v) > 0) and v[0] > 0),
        "n_per_t": (int, 50, lambda v: v >= 20),
        "T": (float, 50.0, _positive),
        "n_swept": (int, 50, lambda v: v >= 20),
        "compare_initial": (str, "arc", lambda v: v in ("", "arc", "segment")),
        "compare_R": (float, 0.5, lambda v: v >= 0),
        "line_normals": (_floats, (0.0, 22.5, 45.0, 67.5), None),
        "T_max": (float, 0.0, lambda v: v >= 0),
        "prune_cap": (int, 100, lambda v: v >= 2),
        "prune_lag": (float, 3.0, _positive),
        "prune_every": (int, 4, _positive),
    },
    "passage": {
        "d_list": (_floats, (5.0, 10.0, 20.0, 40.0), lambda v: len(v) >= 1 and all(np.diff(v) > 0) and v[0] > 0),
        "direction": (float, 90.0, None),
        "beta": (_floats, (), lambda v: all(b > 0 for b in v)),
        "beta_factor": (_floats, (1.2,), lambda v: len(v) >= 1 and all(b > 0 for b in v)),
        "norm_directions": (_floats, (0.0, 45.0), lambda v: len(v) >= 1),
        "n": (int, 100, lambda v: v >= 50),
        "n_norm": (int, 50, lambda v: v >= 20),
        "R": (float, 1.0, _positive),
        "prune_cap": (int, 100, lambda v: v >= 2),
        "prune_lag": (float, 3.0, _positive),
        "prune_every": (int, 4, _positive),
    },
    "lyapunov": {
        "T": (float, 200.0, lambda v: v >= 10),
        "h": (float, 0.001, _positive),
        "n_batches": (int, 20, lambda v: v >= 2),
        "x0": (_floats, (0.1, 0.2), lambda v: len(v) == 2),
        "v0": (_floats, (1.0, 0.0), lambda v: len(v) == 2 and np.hypot(*v) > 0),
        "renorm": (float, 1.0, _positive),
    },
    "clt": {
        "n": (int, 1000, lambda v: v >= 100),
        "T": (float, 100.0, _positive),
        "h": (float, 0.01, _positive),
    },
    "check": {
        "grid_n": (int, 64, lambda v: v >= 8),
        "det_tol": (float, 1e-8, _positive),
        "value_tol": (float, 1e-6, _positive),
    },
    "seeds": {
        "master_seed": (int, 0, lambda v: v >= 0),
        "realizations": (int, 50, _positive),
    },
    "output": {
        "directory": (str, "out", lambda v: len(v) > 0),
        "formats": (lambda s: tuple(x.strip() for x in s.split(",") if x.strip()),
                    ("csv", "json", "svg"),
                    lambda v: set(v) <= {"csv", "json", "svg"}),
    },
}

FIELD_BLOCKS = ("component", "drift")


@dataclass
class ExperimentConfig:
    """Parsed and validated config; sections are plain dicts with every key filled in."""

    spec: StreamSpec
    sections: dict
    text: str = ""
    source_lines: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @property
    def master_seed(self) -> int:
        return self.sections["seeds"]["master_seed"]

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def integrator(self, h: float | None = None) -> Integrator:
        s = self.sections["integrator"]
        return Integrator(h=s["h"] if h is None else h, substep_disp=s["substep_disp"],
                          substep_rot=s["substep_rot"], tangent_rot=s["tangent_rot"],
                          max_substeps=s["max_substeps"])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        text = _set_key(self.text, "seeds", "master_seed", str(int(seed)))
        return parse_config(text)

    def initial_curve(self, name: str | None = None) -> Polyline:
        sw = self.sections["sweep"]
        return initial_curve(name or sw["initial"], sw["delta_max"], sw["vertex_budget"])


def initial_curve(name: str, delta_max: float = 0.05, vertex_budget: int = 2_000_000) -> Polyline:
    """``segment``: the unit segment on the x axis centred at the origin.
    ``arc``: the upper half of the unit circle, shifted down by 1/2 so its box is centred at the origin."""
    if name == "segment":
        return Polyline.segment(delta_max=delta_max, vertex_budget=vertex_budget)
    if name == "arc":
        return Polyline.arc((0.0, -0.5), 1.0, 0.0, math.pi, delta_max=delta_max,
                            vertex_budget=vertex_budget)
    raise ValueError(f"unknown initial curve {name!r}")


def _set_key(text: str, section: str, key: str, value: str) -> str:
    lines = text.splitlines()
    cur = None
    for i, ln in enumerate(lines):
        s = ln.split("#", 1)[0].strip()
        if s.startswith("[") and s.endswith("]"):
            if cur == section:
                lines.insert(i, f"{key} = {value}")
                return "\n".join(lines) + "\n"
            cur = s[1:-1].strip()
        elif cur == section and "=" in s and s.split("=", 1)[0].strip() == key:
            lines[i] = f"{key} = {value}"
            return "\n".join(lines) + "\n"
    if cur == section:
        lines.append(f"{key} = {value}")
    else:
        lines += [f"[{section}]", f"{key} = {value}"]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate config text; raises :class:`ConfigError` naming the offending line."""
    raw: dict[str, dict] = {s: {} for s in SCHEMA}
    where: dict[tuple, int] = {}
    comps: list[list[Mode]] = []
    drift: list[Mode] = []
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"malformed section header {s!r}", no)
            section = s[1:-1].strip().lower()
            if section not in SCHEMA and section not in FIELD_BLOCKS:
                raise ConfigError(f"unknown section [{section}]", no)
            if section == "component":
                comps.append([])
            elif section == "drift" and drift:
                raise ConfigError("only one [drift] block is allowed", no)
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", no)
        if section is None:
            raise ConfigError("key outside of any section", no)
        key, _, val = (p.strip() for p in s.partition("="))
        if section in FIELD_BLOCKS:
            if key != "mode":
                raise ConfigError(f"only 'mode' lines are allowed in [{section}], got {key!r}", no)
            mode = _parse_mode(val, no)
            (comps[-1] if section == "component" else drift).append(mode)
            continue
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", no)
        if key in raw[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", no)
        parser, _, check = SCHEMA[section][key]
        try:
            v = parser(val)
        except (TypeError, ValueError):
            raise ConfigError(f"cannot parse {key} = {val!r}", no) from None
        if check is not None and not check(v):
            raise ConfigError(f"invalid value {key} = {val!r}", no)
        raw[section][key] = v
        where[(section, key)] = no
    sections = {sec: {k: raw[sec].get(k, spec[1]) for k, spec in keys.items()}
                for sec, keys in SCHEMA.items()}
    if comps:
        if raw["field"]:
            raise ConfigError("give either [field] or [component] blocks, not both")
        try:
            spec = StreamSpec(tuple(tuple(c) for c in comps), tuple(drift))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        if drift:
            raise ConfigError("[drift] needs explicit [component] blocks")
        spec = default_field_family(sections["field"]["amplitude"])
    cfg = ExperimentConfig(spec, sections, text, where)
    validate(cfg)
    return cfg


def _parse_mode(val: str, no: int) -> Mode:
    parts = [p.strip() for p in val.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"mode needs 'a, n1, n2, phi', got {val!r}", no)
    try:
        a, n1, n2, phi = float(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])
    except ValueError:
        raise ConfigError(f"mode values must be numbers, got {val!r}", no) from None
    if n1 != int(n1) or n2 != int(n2):
        raise ConfigError(f"mode wavevector must be integer, got {val!r}", no)
    if not (math.isfinite(a) and math.isfinite(phi)):
        raise ConfigError(f"mode values must be finite, got {val!r}", no)
    try:
        return Mode(a, int(n1), int(n2), phi)
    except ValueError as exc:
        raise ConfigError(str(exc), no) from None


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks, including the per-step displacement contract for every step size used."""
    integ = cfg["integrator"]
    eta = cfg["sweep"]["eta"]
    z = integ["contract_z"]
    bound = cfg.spec.step_displacement_bound(integ["h"], z)
    if bound > eta:
        line = cfg.source_lines.get(("integrator", "h")) or cfg.source_lines.get(("sweep", "eta"))
        raise ConfigError(
            f"per-step displacement bound {bound:.4g} (h = {integ['h']}, z = {z}) exceeds "
            f"the cell size eta = {eta}; reduce h or increase eta", line)
    for sec, key in (("sweep", "T"), ("shape", "T"), ("clt", "T")):
        h = cfg["clt"]["h"] if sec == "clt" else integ["h"]
        ratio = cfg[sec][key] / h
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigError(f"[{sec}] {key} must be a multiple of the step h = {h}",
                              cfg.source_lines.get((sec, key)))
    for t in cfg["sweep"]["export_times"]:
        if t > cfg["sweep"]["T"]:
            raise ConfigError("export_times must not exceed T",
                              cfg.source_lines.get(("sweep", "export_times")))


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


DEFAULT_CONFIG = """\
# stochshape experiment config (desk scale)
[field]
family = default
amplitude = 0.05

[integrator]
h = 0.01
max_substeps = 64

[sweep]
T = 50
eta = 0.1

[shape]
R = 1.0
m_directions = 32
t_ladder = 4, 8, 16
n_per_t = 50
T = 50
n_swept = 50

[passage]
d_list = 5, 10, 20, 40
n = 100

[seeds]
master_seed = 0
realizations = 50

[output]
directory = out
"""


# ---------------------------------------------------------------------------
# outputs and manifests

def sub_seed(master: int, tag: int) -> int:
    """Independent master seed for sub-experiment ``tag`` of one command."""
    return realization_seed(master, 1_000_003 + int(tag))


class Outputs:
    """Writes files under one directory and keeps the inventory for the manifest."""

    def __init__(self, directory, formats=("csv", "json", "svg")):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.formats = set(formats)
        self.files: list[str] = []

    def wants(self, fmt: str) -> bool:
        return fmt in self.formats

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return p

    def text(self, name: str, content: str):
        with open(self.path(name), "w", newline="\n") as fh:
            fh.write(content)

    def json(self, name: str, obj):
        self.text(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def csv(self, name: str, header, rows):
        lines = [",".join(header)]
        lines += [",".join(_fmt(v) for v in r) for r in rows]
        self.text(name, "\n".join(lines) + "\n")

    def inventory(self) -> list[dict]:
        out = []
        for name in sorted(self.files):
            data = (self.dir / name).read_bytes()
            out.append({"name": name, "bytes": len(data),
                        "sha256": hashlib.sha256(data).hexdigest()})
        return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        f = float(o)
        return f if math.isfinite(f) else None
    return o


@dataclass
class RunManifest:
    command: str
    config_text: str
    config_sha256: str
    version: str
    master_seed: int
    seeds: dict
    started: float
    finished: float
    files: list
    exit_code: int
    notes: dict = field(default_factory=dict)

    @property
    def wall_seconds(self) -> float:
        return self.finished - self.started

    def as_dict(self) -> dict:
        return {
            "command": self.command, "config_text": self.config_text,
            "config_sha256": self.config_sha256, "version": self.version,
            "master_seed": self.master_seed, "seeds": self.seeds,
            "started": self.started, "finished": self.finished,
            "wall_seconds": self.wall_seconds, "files": self.files,
            "exit_code": self.exit_code, "notes": self.notes,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_jsonable(self.as_dict()), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["command"], d["config_text"], d["config_sha256"], d["version"],
                   d["master_seed"], d["seeds"], d["started"], d["finished"], d["files"],
                   d["exit_code"], d.get("notes", {}))


# ---------------------------------------------------------------------------
# commands; each returns (exit code, seeds dict, notes dict)

def cmd_check_fields(cfg: ExperimentConfig, out: Outputs, jobs: int = 1):
    c = cfg["check"]
    diag = check_conditions(cfg.spec, grid_n=c["grid_n"], det_tol=c["det_tol"],
                            value_tol=c["value_tol"])
    rows = diag.table()
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    report = {
        "conditions": [{"name": n, "pass": ok, "detail": d} for n, ok, d in rows],
        "all_pass": diag.all_ok,
        "zero_drift_residual": diag.zero_drift_residual,
        "mean_field_residual": diag.mean_field_residual,
        "min_abs_hessian_det": diag.min_abs_hessian_det,
        "min_value_gap": diag.min_value_gap,
        "newton_failures": diag.newton_failures,
        "critical_points": [[{"x": list(cp.location), "value": cp.value, "hessian_det": cp.hessian_det,
                              "kind": cp.kind} for cp in cps] for cps in diag.critical_points],
    }
    if out.wants("json"):
        out.json("fields.json", report)
    return (EXIT_OK if diag.all_ok else EXIT_DIAGNOSTIC), {}, {"all_pass": diag.all_ok}


def cmd_lyapunov(cfg: ExperimentConfig, out: Outputs, jobs: int = 1):
    c = cfg["lyapunov"]
    seed = sub_seed(cfg.master_seed, 1)
    res = lyapunov_estimate(cfg.spec, c["x0"], c["v0"], c["T"], c["h"], seed,
                            renorm_interval=c["renorm"], n_batches=c["n_batches"],
                            integ=cfg.integrator(c["h"]))
    d = res.as_dict()
    lo, hi = res.ci95
    d["lambda1_ci_excludes_zero"] = bool(lo > 0 or hi < 0)
    d["sum_within_2se"] = bool(abs(res.lambda1 + res.lambda2) <= 2 * res.stderr)
    d["batch_lambda1"] = res.batch_lambda1
    print(f"lambda1 = {res.lambda1:.4f} +- {res.stderr:.4f}  lambda2 = {res.lambda2:.4f}  "
          f"sum = {res.lambda1 + res.lambda2:.2e} +- {res.sum_stderr:.2e}  "
          f"|det - 1| = {res.det_drift:.2e}")
    if out.wants("json"):
        out.json("lyapunov.json", d)
    return EXIT_OK, {"lyapunov": seed}, {}


def cmd_clt(cfg: ExperimentConfig, out: Outputs, jobs: int = 1):
    c = cfg["clt"]
    seed = sub_seed(cfg.master_seed, 2)
    st = displacement_stats(cfg.spec, c["n"], c["T"], c["h"], seed, integ=cfg.integrator(c["h"]))
    half = st.at(c["T"] / 2)
    ratio = np.diag(st.cov_over_t) / np.diag(half.cov_over_t)
    summary = {
        "n": st.n, "T": st.T,
        "mean_drift": st.mean_drift, "drift_se": st.drift_se,
        "drift_z": st.mean_drift / st.drift_se,
        "cov_over_t": st.cov_over_t, "cov_over_t_half": half.cov_over_t,
        "cov_ratio_T_vs_half": ratio,
        "excess_kurtosis": st.excess_kurtosis, "kurtosis_se": st.kurtosis_se,
    }
    print(f"drift/T = {st.mean_drift} (se {st.drift_se}); cov/T diag = {np.diag(st.cov_over_t)}; "
          f"kurtosis = {st.excess_kurtosis}")
    if out.wants("json"):
        out.json("clt.json", summary)
    if out.wants("csv"):
        rows = []
        for i, t in enumerate(st.times):
            if t <= 0:
                continue
            dsp = st.displacements[:, i]
            m = dsp.mean(axis=0)
            cv = np.cov(dsp.T) / t
            rows.append((t, m[0], m[1], cv[0, 0], cv[0, 1], cv[1, 1]))
        out.csv("clt.csv", ("t", "mean_x", "mean_y", "cov_xx_over_t", "cov_xy_over_t",
                            "cov_yy_over_t"), rows)
    return EXIT_OK, {"clt": seed}, {}


def _sweep_pruner(cfg: ExperimentConfig):
    sw = cfg["sweep"]
    if sw["prune"] == "none":
        return False
    return RadialPruner(lag=sw["prune_lag"], cap=sw["prune_cap"], n_bins=sw["prune_bins"],
                        every=sw["prune_every"])


def _read_shape_csv(path) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 1:2] * np.c_[np.cos(rows[:, 0]), np.sin(rows[:, 0])]


def cmd_sweep(cfg: ExperimentConfig, out: Outputs, jobs: int = 1):
    sw = cfg["sweep"]
    n = cfg["seeds"]["realizations"]
    seed = sub_seed(cfg.master_seed, 3)
    s = swept_survey(cfg.spec, n, sw["T"], sw["eta"], seed, cfg.initial_curve(),
                     m=sw["prune_bins"], pruner=_sweep_pruner(cfg), integ=cfg.integrator(),
                     keep_grids=True, jobs=jobs)
    merged = None
    rows = []
    for i, g in enumerate(s.grids):
        out.text(f"grids/realization_{i:04d}.grid", g.to_text())
        for t in sw["export_times"]:
            out.text(f"grids/realization_{i:04d}_t{t:g}.grid", g.at_time(t).to_text())
        merged = g if merged is None else merged.merge(g)
        rows.append((i, s.seeds[i], g.count(), int(s.exhausted[i])))
    out.text("grids/ensemble.grid", merged.to_text())
    if out.wants("csv"):
        out.csv("sweep.csv", ("realization", "seed", "cells", "budget_exhausted"), rows)
    if out.wants("svg"):
        overlay = None
        if sw["overlay_shape"]:
            overlay = _read_shape_csv(sw["overlay_shape"]) * sw["T"]
        out.text("sweep.svg", grid_svg(merged, overlay))
    if out.wants("json"):
        out.json("sweep.json", {"T": sw["T"], "eta": sw["eta"], "n": n,
                                "exhausted": int(s.exhausted.sum()),
                                "ensemble_cells": merged.count(),
                                "max_step_disp": s.max_step_disp,
                                "contract_bound": cfg.spec.step_displacement_bound(
                                    cfg["integrator"]["h"], cfg["integrator"]["contract_z"]),
                                "pruner": s.pruner})
    print(f"{n} sweeps to T = {sw['T']}: {int(s.exhausted.sum())} budget-exhausted, "
          f"ensemble {merged.count()} cells, max step displacement {s.max_step_disp:.3f}")
    code = EXIT_BUDGET if s.exhausted.all() else EXIT_OK
    return code, {"sweep": seed, "realizations": s.seeds}, {"exhausted": int(s.exhausted.sum())}


def _shape_rows(sh: ShapeEstimate):
    return [(a, r, lo, hi, int(u)) for a, r, lo, hi, u in
            zip(sh.angles, sh.radius, sh.ci_lo, sh.ci_hi, sh.unreliable)]


SHAPE_HEADER = ("angle", "radius", "ci_lo", "ci_hi", "unreliable")


def shapes_svg(shapes: dict, size: int = 480) -> str:
    """Boundaries of several shapes (name -> ShapeEstimate) on common axes."""
    colours = ["#c30", "#036", "#393", "#939"]
    rmax = max(float(np.max(s.radius)) for s in shapes.values()) * 1.1
    scale = size / (2 * rmax)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">', f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<line x1="0" y1="{size / 2}" x2="{size}" y2="{size / 2}" stroke="#ccc"/>',
           f'<line x1="{size / 2}" y1="0" x2="{size / 2}" y2="{size}" stroke="#ccc"/>']
    for k, (name, s) in enumerate(shapes.items()):
        P = s.polygon
        pts = " ".join(f"{size / 2 + x * scale:.2f},{size / 2 - y * scale:.2f}" for x, y in P)
        col = colours[k % len(colours)]
        out.append(f'<polygon points="{pts}" fill="none" stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="8" y="{18 + 16 * k}" fill="{col}" font-size="13">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_shape(cfg: ExperimentConfig, out: Outputs, jobs: int = 1):
    c = cfg["shape"]
    seed_norm = sub_seed(cfg.master_seed, 4)
    seed_swept = sub_seed(cfg.master_seed, 5)
    radii = (c["R"], c["compare_R"]) if c["compare_R"] > 0 else (c["R"],)
    normals = [(math.cos(math.radians(a)), math.sin(math.radians(a))) for a in c["line_normals"]]
    pruner = TargetPruner(lag=c["prune_lag"], cap=c["prune_cap"], every=c["prune_every"])
    survey = passage_survey(cfg.spec, directions(c["m_directions"]), c["t_ladder"], radii,
                            c["n_per_t"], seed_norm, line_normals=normals, line_radius=c["R"],
                            curve0=cfg.initial_curve("segment"), T_max=c["T_max"] or None,
                            pruner=pruner, integ=cfg.integrator(), jobs=jobs)
    norms = survey.norms(0)
    shape_n = shape_from_norms(norms, {"R": c["R"]})
    sw_cfg = cfg["sweep"]
    sweep_pruner = RadialPruner(lag=sw_cfg["prune_lag"], cap=sw_cfg["prune_cap"],
                                n_bins=c["m_directions"], every=sw_cfg["prune_every"])
    sw = swept_survey(cfg.spec, c["n_swept"], c["T"], sw_cfg["eta"], seed_swept,
                      cfg.initial_curve("segment"), c["m_directions"], pruner=sweep_pruner,
                      integ=cfg.integrator(), keep_grids=False, jobs=jobs)
    if sw.exhausted.all():
        print("every sweep exhausted its vertex budget", file=sys.stderr)
        return EXIT_BUDGET, {"norm": seed_norm, "swept": seed_swept}, {}
    shape_s = shape_from_swept(sw)
    shapes = {"norm-based": shape_n, "swept-based": shape_s}
    result = cross_route_summary(shape_n, shape_s)
    result["norms"] = [e.as_dict() for e in norms]
    result["unreliable_directions"] = [j for j, e in enumerate(norms) if e.unreliable]
    result["d4_defect_norm"] = d4_defect(shape_n) if c["m_directions"] % 4 == 0 else None
    result["max_step_disp"] = max(survey.max_step_disp, sw.max_step_disp)
    result["pruning"] = {"norm": survey.pruner, "swept": sw.pruner}
    if c["compare_initial"]:
        sw2 = swept_survey(cfg.spec, c["n_swept"], c["T"], sw_cfg["eta"], seed_swept,
                           cfg.initial_curve(c["compare_initial"]), c["m_directions"],
                           pruner=sweep_pruner, integ=cfg.integrator(), keep_grids=False,
                           jobs=jobs)
        shape_s2 = shape_from_swept(sw2)
        shapes[f"swept-based ({c['compare_initial']})"] = shape_s2
        result["initial_curve_variant"] = {
            "initial": c["compare_initial"],
            "hausdorff": shape_s.hausdorff(shape_s2),
            "relative": shape_s.hausdorff(shape_s2) / (0.5 * (shape_s.mean_radius + shape_s2.mean_radius)),
        }
        if out.wants("csv"):
            out.csv("shape_swept_variant.csv", SHAPE_HEADER, _shape_rows(shape_s2))
    if len(radii) > 1:
        result["R_variant"] = r_variant_summary(survey)
    if normals:
        result["lines"] = line_summary(survey, norms)
    if out.wants("csv"):
        out.csv("shape_norm.csv", SHAPE_HEADER, _shape_rows(shape_n))
        out.csv("shape_swept.csv", SHAPE_HEADER, _shape_rows(shape_s))
    if out.wants("svg"):
        out.text("shape.svg", shapes_svg(shapes))
    if out.wants("json"):
        out.json("shape.json", result)
    print(f"norm route mean radius {shape_n.mean_radius:.4f}, swept route {shape_s.mean_radius:.4f}; "
          f"Hausdorff/mean radius {result['hausdorff_relative']:.3f}; "
          f"convexity defect {shape_n.convexity_defect:.3f}")
    return EXIT_OK, {"norm": seed_norm, "swept": seed_swept,
                     "norm_realizations": survey.seeds, "swept_realizations": sw.seeds}, {}


def cross_route_summary(shape_n: ShapeEstimate, shape_s: ShapeEstimate) -> dict:
    """Hausdorff distance, support-function and radial agreement of two shapes on the same angles."""
    if len(shape_n.angles) != len(shape_s.angles) or not np.allclose(shape_n.angles, shape_s.angles):
        raise ValueError("shapes must share their directions")
    mean_r = 0.5 * (shape_n.mean_radius + shape_s.mean_radius)
    rel = np.abs(shape_s.radius - shape_n.radius) / shape_n.radius
    h_n, h_s = shape_n.support(), shape_s.support()
    rel_h = np.abs(h_s - h_n) / h_n
    hd = shape_n.hausdorff(shape_s)
    return {
        "hausdorff": hd,
        "hausdorff_relative": hd / mean_r,
        "per_direction_support_difference": rel_h,
        "max_support_difference": float(rel_h.max()),
        "per_direction_relative_difference": rel,
        "max_relative_difference": float(rel.max()),
        "mean_radius_norm": shape_n.mean_radius,
        "mean_radius_swept": shape_s.mean_radius,
        "convexity_defect_norm": shape_n.convexity_defect,
        "convexity_defect_swept": shape_s.convexity_defect,
        "norm_shape": shape_n.as_dict(),
        "swept_shape": shape_s.as_dict(),
    }


def r_variant_summary(survey) -> dict:
    """Compare direction-averaged norms for the first two target radii of a survey.

    The joint standard error combines the two estimates' errors as if they
    were independent; since both come from the same runs and are positively
    correlated, this errs on the wide side. The paired error is also reported.
    """
    a = np.array([e.per_realization for e in survey.norms(0)])
    b = np.array([e.per_realization for e in survey.norms(1)])
    ok = np.all(np.isfinite(a), axis=0) & np.all(np.isfinite(b), axis=0)
    ma, mb = a[:, ok].mean(axis=0), b[:, ok].mean(axis=0)
    n = int(ok.sum())
    se_a = ma.std(ddof=1) / math.sqrt(n)
    se_b = mb.std(ddof=1) / math.sqrt(n)
    d = ma - mb
    return {
        "R": [float(survey.radii[0]), float(survey.radii[1])],
        "mean_norm": [float(ma.mean()), float(mb.mean())],
        "stderr": [float(se_a), float(se_b)],
        "difference": float(d.mean()),
        "joint_se": float(math.hypot(se_a, se_b)),
        "paired_se": float(d.std(ddof=1) / math.sqrt(n)),
        "n": n,
        "within_joint_ci": bool(abs(d.mean()) <= 1.959963984540054 * math.hypot(se_a, se_b)),
    }


def line_summary(survey, norms) -> list[dict]:
    rows = []
    for l, nrm in enumerate(survey.line_normals):
        rho = survey.line_norm(l)
        best, se, arg = point_norm_on_line(norms, nrm)
        joint = math.hypot(rho.stderr, se)
        rows.append({
            "normal_angle": math.degrees(math.atan2(nrm[1], nrm[0])),
            "rho": rho.value, "rho_se": rho.stderr, "rho_unreliable": rho.unreliable,
            "min_point_norm": best, "min_point_se": se, "argmin_direction": arg,
            "joint_se": joint, "within_joint_ci": bool(abs(rho.value - best) <= 1.959963984540054 * joint),
        })
    return rows


def cmd_passage(cfg: ExperimentConfig, out: Outputs, jobs: int = 1):
    c = cfg["passage"]
    d = np.asarray(c["d_list"], float)
    pruner = TargetPruner(lag=c["prune_lag"], cap=c["prune_cap"], every=c["prune_every"])
    seeds: dict = {}
    norm_rows = []
    if c["beta"]:
        betas = np.asarray(c["beta"], float)
        max_norm = None
    else:
        vals = []
        for k, ang in enumerate(c["norm_directions"]):
            u = (math.cos(math.radians(ang)), math.sin(math.radians(ang)))
            sd = sub_seed(cfg.master_seed, 100 + k)
            seeds[f"norm_{ang:g}"] = sd
            s = passage_survey(cfg.spec, [u], d, (c["R"],), c["n_norm"], sd,
                               curve0=cfg.initial_curve("segment"), pruner=pruner,
                               integ=cfg.integrator(), jobs=jobs)
            e = s.norm(0)
            vals.append(e.value)
            norm_rows.append({"angle": ang, **e.as_dict()})
        max_norm = float(max(vals))
        betas = np.asarray(c["beta_factor"], float) * max_norm
    u = (math.cos(math.radians(c["direction"])), math.sin(math.radians(c["direction"])))
    sd = sub_seed(cfg.master_seed, 200)
    seeds["survival"] = sd
    T_max = float(betas.max() * d[-1])
    s = passage_survey(cfg.spec, [u], d, (c["R"],), c["n"], sd,
                       curve0=cfg.initial_curve("segment"), T_max=T_max, pruner=pruner,
                       integ=cfg.integrator(), jobs=jobs)
    table = survival_table(s.point_tau[:, 0, :, 0], d, betas)
    if out.wants("csv"):
        out.csv("survival.csv", ("d", "beta", "survived", "n", "p", "ci_lo", "ci_hi"),
                [(r.d, r.beta, r.survived, r.n, r.p, r.ci_lo, r.ci_hi) for r in table])
        out.csv("passage_times.csv", ["realization"] + [f"tau_d{x:g}" for x in d],
                [(i, *row) for i, row in enumerate(s.point_tau[:, 0, :, 0])])
    summary = {"direction": c["direction"], "R": c["R"], "d_list": d, "betas": betas,
               "max_norm": max_norm, "norms": norm_rows,
               "survival": [r.__dict__ for r in table], "pruner": pruner.describe()}
    for beta in betas:
        p = [r.p for r in table if r.beta == beta]
        summary.setdefault("strictly_decreasing", {})[f"{beta:.6g}"] = bool(np.all(np.diff(p) < 0))
    if out.wants("json"):
        out.json("passage.json", summary)
    for r in table:
        print(f"d = {r.d:g}  beta = {r.beta:.4g}  P(tau > beta d) = {r.p:.3f} "
              f"[{r.ci_lo:.3f}, {r.ci_hi:.3f}]")
    seeds["survival_realizations"] = s.seeds
    return EXIT_OK, seeds, {}


COMMANDS = {
    "check-fields": cmd_check_fields,
    "lyapunov": cmd_lyapunov,
    "sweep": cmd_sweep,
    "shape": cmd_shape,
    "passage": cmd_passage,
    "clt": cmd_clt,
}

EPILOG = """\
output files (all under --out, listed with hashes in manifest.json):
  check-fields  fields.json
  lyapunov      lyapunov.json
  clt           clt.json; clt.csv: t, mean_x, mean_y, cov_xx_over_t, cov_xy_over_t, cov_yy_over_t
  sweep         grids/*.grid (occupancy grids: header + run-length encoded rows);
                sweep.csv: realization, seed, cells, budget_exhausted; sweep.svg; sweep.json
  shape         shape_norm.csv, shape_swept.csv[, shape_swept_variant.csv]:
                angle, radius, ci_lo, ci_hi, unreliable; shape.svg; shape.json
  passage       survival.csv: d, beta, survived, n, p, ci_lo, ci_hi;
                passage_times.csv: realization, tau_d<d>...; passage.json
exit codes: 0 success, 1 diagnostic failure, 2 config error, 3 budget exhausted on all realizations
"""


def run_command(command: str, cfg: ExperimentConfig, out_dir, jobs: int = 1) -> tuple[int, RunManifest]:
    out = Outputs(out_dir, cfg["output"]["formats"])
    started = time.time()
    try:
        code, seeds, notes = COMMANDS[command](cfg, out, jobs)
    except BudgetExhausted as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        code, seeds, notes = EXIT_BUDGET, {}, {"error": str(exc)}
    manifest = RunManifest(command, cfg.text, cfg.sha256, __version__, cfg.master_seed,
                           seeds, started, time.time(), out.inventory(), code, notes)
    manifest.save(Path(out_dir) / "manifest.json")
    return code, manifest


def replay(manifest_path, out_dir, jobs: int = 1) -> tuple[int, bool]:
    """Re-run a manifest into ``out_dir``; returns (exit code, all files byte-identical)."""
    m = RunManifest.load(manifest_path)
    cfg = parse_config(m.config_text)
    code, new = run_command(m.command, cfg, out_dir, jobs)
    old = {f["name"]: f["sha256"] for f in m.files}
    same = old == {f["name"]: f["sha256"] for f in new.files}
    return code, same


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochshape", description=__doc__.splitlines()[0],
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="config file (default: built-in desk-scale config)")
        sp.add_argument("--seed", type=int, help="override [seeds] master_seed")
        sp.add_argument("--out", help="output directory (default: [output] directory)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    rp = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)
    rp.add_argument("--jobs", type=int, default=1)
    sub.add_parser("default-config", help="print the built-in config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "default-config":
        sys.stdout.write(DEFAULT_CONFIG)
        return EXIT_OK
    if args.command == "replay":
        try:
            code, same = replay(args.manifest, args.out, args.jobs)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print("outputs identical" if same else "outputs differ")
        return code if same else EXIT_DIAGNOSTIC
    try:
        cfg = load_config(args.config) if args.config else parse_config(DEFAULT_CONFIG)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out or cfg["output"]["directory"]
    code, _ = run_command(args.command, cfg, out_dir, max(1, args.jobs))
    return code


if __name__ == "__main__":
    sys.exit(main())
