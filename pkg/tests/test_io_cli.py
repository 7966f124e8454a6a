from __future__ import annotations

import csv
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdpcm import io
from vdpcm.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, EXIT_VIOLATION, main
from vdpcm.config import ConfigError, load_config, loads
from vdpcm.energy import read_ledger_column

SVG = "{http://www.w3.org/2000/svg}"

SMALL = """
mesh: {cells: 16}
run: {t_end: 0.05, snapshot_times: [0.02]}
sweep: {V: [-0.5, 0.0, 0.5], t_max: 100.0, dt: 0.05}
compare: {snapshot_times: [0.1], dt: 0.05}
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


# -- CSV ----------------------------------------------------------------------

def test_csv_empty_is_header_only(tmp_path):
    p = tmp_path / "a.csv"
    io.write_csv([], ("a", "b"), p)
    assert p.read_bytes() == b"a,b\n"


def test_csv_single_record(tmp_path):
    p = tmp_path / "a.csv"
    io.write_csv([(0.1, 2, True)], ("x", "n", "flag"), p)
    assert p.read_text().splitlines() == ["x,n,flag", "0.10000000000000001,2,1"]


def test_csv_length_mismatch(tmp_path):
    with pytest.raises(ValueError, match="record 0"):
        io.write_csv([(1.0,)], ("a", "b"), tmp_path / "a.csv")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_float_roundtrip(tmp_path_factory, xs):
    p = tmp_path_factory.mktemp("csv") / "r.csv"
    io.write_csv([(x,) for x in xs], ("x",), p)
    header, rows = io.read_csv(p)
    assert header == ["x"] and [r[0] for r in rows] == xs


def test_time_tag():
    assert io.time_tag(18.0) == "18"
    assert io.time_tag(0.25) == "0.25"
    assert io.time_tag(1510.0) == "1510"


# -- SVG ----------------------------------------------------------------------

def _parse(path):
    return ET.parse(path).getroot()


def test_svg_single_series(tmp_path):
    p = tmp_path / "a.svg"
    io.emit_svg_plot([("s", [0, 1, 2], [1, 0, 1])], "x", "y", p)
    root = _parse(p)
    assert len(root.findall(f".//{SVG}polyline")) == 1


def test_svg_two_series_legend(tmp_path):
    p = tmp_path / "a.svg"
    io.emit_svg_plot([("first", [0, 1], [0, 1]), ("second <b>", [0, 1], [1, 0])], "x", "y", p, title="t")
    root = _parse(p)
    entries = [g for g in root.iter(f"{SVG}g") if g.get("class") == "legend-entry"]
    assert [g.find(f"{SVG}text").text for g in entries] == ["first", "second <b>"]
    assert len(root.findall(f".//{SVG}polyline")) == 2


def test_svg_deterministic_and_drops_nonfinite(tmp_path):
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    data = [("s", [0.0, 0.5, 1.0], [1.0, np.nan, 3.0])]
    io.emit_svg_plot(data, "x", "y", a)
    io.emit_svg_plot(data, "x", "y", b)
    assert a.read_bytes() == b.read_bytes()
    pts = _parse(a).find(f".//{SVG}polyline").get("points").split()
    assert len(pts) == 2


def test_svg_errors(tmp_path):
    with pytest.raises(ValueError):
        io.emit_svg_plot([], "x", "y", tmp_path / "a.svg")
    with pytest.raises(ValueError):
        io.emit_svg_plot([("s", [0, 1], [np.nan, np.inf])], "x", "y", tmp_path / "a.svg")
    with pytest.raises(ValueError):
        io.emit_svg_plot([("s", [0, 1], [0])], "x", "y", tmp_path / "a.svg")


# -- config -------------------------------------------------------------------

def test_default_config_values():
    cfg = load_config()
    s = cfg.spec()
    assert (s.z1, s.z2, s.rho_hl, s.d1) == (3, -1, -5.0, 1.0)
    assert cfg.mesh().n_cells == 64
    assert cfg.solver().dt == 1e-3
    assert cfg.sweep_values() == [-1.0, -0.8, -0.6, -0.4, -0.2, 0.0, 0.2, 0.4, 0.6, 0.8, 1.0]


def test_config_roundtrip():
    cfg = loads(SMALL, "small.yaml")
    assert loads(cfg.dump(), "again.yaml") == cfg


def test_config_unknown_key_located():
    with pytest.raises(ConfigError, match=r"x.yaml:3: .*lamda2"):
        loads("model:\n  V: 0.1\n  lamda2: 0.05\n", "x.yaml")


def test_config_negative_rate_located():
    text = "model:\n  interface:\n    k: [[-1.0, 1.0], [1.0, 1.0]]\n"
    with pytest.raises(ConfigError, match=r"x.yaml:3: model.interface.k"):
        loads(text, "x.yaml")


def test_config_inadmissible_initial_data():
    # u1 = 4 exceeds the occupancy bound 3
    with pytest.raises(ConfigError, match=r"initial.u1.*H5"):
        loads("initial:\n  u1: {base: 4.0, slope: 0.0, bump: 0.0}\n", "x.yaml")


def test_config_override_reported_as_command_line():
    with pytest.raises(ConfigError, match="command line: mesh.cells"):
        load_config().override("mesh.cells", 1)


# -- CLI ----------------------------------------------------------------------

def test_cli_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["run", "--bogus"]) == EXIT_USAGE
    assert main(["run", "--jobs", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["validate-config", "--config", str(tmp_path / "missing.yaml")]) == EXIT_USAGE
    bad = tmp_path / "bad.yaml"
    bad.write_text("mesh: {cels: 8}\n")
    assert main(["validate-config", "--config", str(bad)]) == EXIT_USAGE
    assert "bad.yaml:1" in capsys.readouterr().err


def test_cli_validate_config(small_config, capsys):
    assert main(["validate-config", "--config", str(small_config)]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith(": ok")


def test_cli_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "vdpcm", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "check-energy" in proc.stdout


def test_cli_check_energy(small_config, tmp_path):
    out = tmp_path / "out"
    assert main(["check-energy", "--config", str(small_config), "--out", str(out)]) == EXIT_OK
    psi_tot = read_ledger_column(out / "ledger.csv", "psi_tot")
    assert len(psi_tot) == 51
    assert max(np.diff(psi_tot)) <= 1e-9
    for name in ("profile_0.csv", "profile_0.02.csv", "profile_0.05.csv", "energy.svg", "profiles.svg"):
        assert (out / name).exists()
    with open(out / "profile_0.05.csv") as fh:
        assert next(csv.reader(fh)) == list(io.PROFILE_COLUMNS)


def test_cli_check_energy_rejects_legacy(small_config, tmp_path):
    assert main(["check-energy", "--config", str(small_config), "--out", str(tmp_path),
                 "--variant", "legacy"]) == EXIT_USAGE


def test_cli_simulation_failure_exit_code(small_config, tmp_path):
    text = small_config.read_text() + "solver: {newton_max_iter: 1, newton_tol: 1.0e-15, dt: 0.5}\n"
    cfg = tmp_path / "fail.yaml"
    cfg.write_text(text)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--t-end", "1.0"]) == EXIT_FAILURE


def test_cli_violation_exit_code(small_config, tmp_path, monkeypatch):
    from vdpcm import stepper
    monkeypatch.setattr(stepper.SolverConfig, "energy_tol", property(lambda self: -1e3))
    assert main(["check-energy", "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_VIOLATION


def test_cli_outputs_byte_identical(small_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["run", "--config", str(small_config)]
    assert main(args + ["--out", str(a)]) == EXIT_OK
    assert main(args + ["--out", str(b), "--seed", "7"]) == EXIT_OK
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_cli_sweep_jobs_byte_identical(small_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sweep", "--config", str(small_config), "--out", str(a)]) == EXIT_OK
    assert main(["sweep", "--config", str(small_config), "--out", str(b), "--jobs", "2"]) == EXIT_OK
    for name in ("iv_curve.csv", "iv_curve.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header, rows = io.read_csv(a / "iv_curve.csv")
    assert header == ["V", "current", "t_steady", "converged"]
    assert [r[0] for r in rows] == [-0.5, 0.0, 0.5]


def test_cli_compare(small_config, tmp_path):
    import json
    out = tmp_path / "c"
    assert main(["compare", "--config", str(small_config), "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "comparison_report.json").read_text())
    assert rep["iv_converged"] == {"legacy": True, "vdpcm": True}
    for name in ("profile_0.1_vdpcm.csv", "profile_0.1_legacy.csv", "profiles_0.1.svg",
                 "iv_curve_vdpcm.csv", "iv_curve_legacy.csv", "iv_curves.svg"):
        assert (out / name).exists(), name
