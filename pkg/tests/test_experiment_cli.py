import json
import os

import numpy as np
import pytest

from stochshape.experiment_cli import (
    DEFAULT_CONFIG, EXIT_CONFIG, EXIT_DIAGNOSTIC, EXIT_OK, ConfigError, RunManifest,
    build_parser, main, parse_config, replay,
)
from stochshape.swept_set import OccupancyGrid

SMALL = """\
[field]
family = default
[integrator]
h = 0.01
[sweep]
T = 2
export_times = 1
[lyapunov]
T = 20
h = 0.01
n_batches = 4
[clt]
n = 200
T = 4
[shape]
m_directions = 8
t_ladder = 1.5, 3
n_per_t = 20
T = 5
n_swept = 20
line_normals = 0, 45
[passage]
d_list = 2, 4
n = 50
n_norm = 20
norm_directions = 0
[seeds]
realizations = 3
"""


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return str(p)


def run(argv):
    return main([str(a) for a in argv])


def test_default_config_parses():
    cfg = parse_config(DEFAULT_CONFIG)
    assert cfg["shape"]["t_ladder"] == (4.0, 8.0, 16.0)
    assert cfg.master_seed == 0
    assert cfg.with_seed(7).master_seed == 7


@pytest.mark.parametrize("text, line", [
    ("[field]\nfamily = default\n[bogus]\n", 3),
    ("[integrator]\nh = 0.01\nh = 0.02\n", 3),
    ("[integrator]\nspeed = 3\n", 2),
    ("[integrator]\nh = fast\n", 2),
    ("[integrator]\nh = -0.01\n", 2),
    ("[component]\nmode = 0.05, 1, 0\n", 2),
    ("[component]\nmode = 0.05, 1.5, 0, 0\n", 2),
    ("[component]\nmode = 0.05, 0, 0, 0\n", 2),
    ("[component]\nmode = a, 1, 0, 0\n", 2),
    ("[component]\namp = 1\n", 2),
    ("[sweep\nT = 1\n", 1),
    ("T = 1\n", 1),
])
def test_parse_errors_name_the_line(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


@pytest.mark.parametrize("text", [
    "[integrator]\nh = 0.05\n",
    "[field]\namplitude = 0.5\n",
    "[sweep]\neta = 0.01\n",
    "[integrator]\ncontract_z = 20\n",
    "[component]\nmode = 2.0, 1, 0, 0\n[component]\nmode = 2.0, 0, 1, 0\n",
    "[component]\nmode = 0.01, 1, 0, 0\n[component]\nmode = 0.01, 0, 1, 0\n"
    "[drift]\nmode = 5.0, 1, 1, 0\n",
])
def test_adversarial_contract_configs_rejected(text):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert "displacement" in str(err.value)


def test_contract_bound_is_exact_threshold():
    cfg = parse_config(DEFAULT_CONFIG)
    bound = cfg.spec.step_displacement_bound(0.01)
    ok = DEFAULT_CONFIG.replace("eta = 0.1", f"eta = {bound * 1.0001!r}")
    parse_config(ok)
    bad = DEFAULT_CONFIG.replace("eta = 0.1", f"eta = {bound * 0.9999!r}")
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_other_validation():
    with pytest.raises(ConfigError):
        parse_config("[sweep]\nT = 1.005\n")
    with pytest.raises(ConfigError):
        parse_config("[sweep]\nT = 2\nexport_times = 3\n")
    with pytest.raises(ConfigError):
        parse_config("[field]\namplitude = 0.05\n[component]\nmode = 0.05, 1, 0, 0\n")


def test_explicit_components():
    cfg = parse_config("[component]\nmode = 0.05, 1, 0, 0\nmode = 0.04, 0, 1, 1.3\n"
                       "[component]\nmode = 0.05, 0, 1, 0\n")
    assert cfg.spec.d == 2
    assert cfg.spec.components[0][1].phase == 1.3


def test_missing_config_file(tmp_path):
    assert run(["check-fields", "--config", tmp_path / "nope.cfg", "--out", tmp_path]) == EXIT_CONFIG


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[component]\nmode = 1, 2\n")
    assert run(["sweep", "--config", p, "--out", tmp_path / "o"]) == EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err


def test_check_fields_default_and_failing(tmp_path, capsys):
    assert run(["check-fields", "--out", tmp_path / "a"]) == EXIT_OK
    table = capsys.readouterr().out
    assert "PASS" in table or "pass" in table
    p = tmp_path / "cell.cfg"
    p.write_text("[component]\nmode = 0.05, 1, 0, 0\nmode = 0.05, 0, 1, 0\n")
    assert run(["check-fields", "--config", p, "--out", tmp_path / "b"]) == EXIT_DIAGNOSTIC
    fields = json.loads((tmp_path / "b" / "fields.json").read_text())
    assert fields["conditions"][2]["pass"] is False and not fields["all_pass"]


def test_lyapunov_deterministic(small, tmp_path):
    assert run(["lyapunov", "--config", small, "--out", tmp_path / "a"]) in (EXIT_OK, EXIT_DIAGNOSTIC)
    run(["lyapunov", "--config", small, "--out", tmp_path / "b"])
    a = (tmp_path / "a" / "lyapunov.json").read_text()
    assert a == (tmp_path / "b" / "lyapunov.json").read_text()
    assert json.loads(a)["lambda1"] > 0


def test_sweep_outputs_and_replay(small, tmp_path):
    out = tmp_path / "s"
    assert run(["sweep", "--config", small, "--out", out, "--seed", 3]) == EXIT_OK
    m = RunManifest.load(out / "manifest.json")
    listed = {f["name"] for f in m.files}
    on_disk = {os.path.relpath(os.path.join(d, f), out) for d, _, fs in os.walk(out) for f in fs}
    assert on_disk - {"manifest.json"} == listed
    assert m.master_seed == 3
    ens = OccupancyGrid.load(out / "grids" / "ensemble.grid")
    for name in sorted(listed):
        if name.startswith("grids/realization_") and name.endswith(".grid"):
            g = OccupancyGrid.load(out / name)
            assert g.issubset(ens)
            assert g.at_time(1.0).issubset(g)
    header = (out / "sweep.csv").read_text().splitlines()[0]
    assert header == "realization,seed,cells,budget_exhausted"
    code, same = replay(out / "manifest.json", tmp_path / "r")
    assert code == EXIT_OK and same
    assert run(["replay", out / "manifest.json", "--out", tmp_path / "r2"]) == EXIT_OK


def test_clt_outputs(small, tmp_path):
    run(["clt", "--config", small, "--out", tmp_path])
    rows = (tmp_path / "clt.csv").read_text().splitlines()
    assert rows[0].startswith("t,mean_x,mean_y")
    assert "mean_drift" in json.loads((tmp_path / "clt.json").read_text())


def test_shape_and_passage_outputs(small, tmp_path):
    code = run(["shape", "--config", small, "--out", tmp_path / "sh"])
    assert code in (EXIT_OK, EXIT_DIAGNOSTIC)
    for name in ("shape_norm.csv", "shape_swept.csv", "shape_swept_variant.csv", "shape.svg",
                 "shape.json"):
        assert (tmp_path / "sh" / name).exists()
    summary = json.loads((tmp_path / "sh" / "shape.json").read_text())
    assert {"hausdorff_relative", "max_relative_difference", "R_variant", "lines"} <= set(summary)
    rows = (tmp_path / "sh" / "shape_norm.csv").read_text().splitlines()
    assert rows[0] == "angle,radius,ci_lo,ci_hi,unreliable" and len(rows) == 9
    code = run(["passage", "--config", small, "--out", tmp_path / "p"])
    assert code in (EXIT_OK, EXIT_DIAGNOSTIC)
    rows = (tmp_path / "p" / "survival.csv").read_text().splitlines()
    assert rows[0] == "d,beta,survived,n,p,ci_lo,ci_hi"
    assert len(rows) == 3


def test_help_documents_columns(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["sweep", "--help"])
    text = capsys.readouterr().out
    assert "angle, radius, ci_lo, ci_hi" in text and "--jobs" in text


def test_default_config_command(capsys):
    assert main(["default-config"]) == EXIT_OK
    assert capsys.readouterr().out == DEFAULT_CONFIG
