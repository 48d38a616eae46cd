import re

import meshio
import numpy as np
import pytest

from phasetopo import driver
from phasetopo.cli import main
from phasetopo.config import preset_config
from phasetopo.driver import (HISTORY_HEADER, energy_report, export_history, export_vtk,
                              run_optimization)
from phasetopo.errors import NewtonConvergenceError
from phasetopo.flow import FlowState
from phasetopo.mesh import all_wall_spec, load_mesh, mesh_from_triangles, plug_flow_spec, generate_rect_mesh
from phasetopo.phase import PhaseField


def small(name="diffuser-ac", **kw):
    nx = 8
    kw.setdefault("n_iter", 2)
    kw.setdefault("n_phi", 2)
    return preset_config(name, nx=nx, ny=nx if name.startswith("diffuser") else 6, **kw)


def test_vtk_two_triangles(tmp_path):
    m = mesh_from_triangles([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]], all_wall_spec())
    path = tmp_path / "a.vtk"
    export_vtk(PhaseField.constant(m, 0.5), FlowState.zero(m), path)
    data = meshio.read(path)
    assert data.points.shape[0] == 4
    np.testing.assert_array_equal(data.point_data["phi"].ravel(), 0.5)
    assert data.cells_dict["triangle"].shape == (2, 3)


def test_vtk_plug_velocity_and_determinism(tmp_path):
    m = generate_rect_mesh((0, 1), (0, 1), 3, 3, plug_flow_spec())
    state = FlowState.interpolate(m, lambda x, y: 1 + 0 * x, lambda x, y: 0 * x)
    phi = PhaseField.from_function(m, lambda x, y: x * y)
    a, b = tmp_path / "a.vtk", tmp_path / "b.vtk"
    export_vtk(phi, state, a)
    export_vtk(phi, state, b)
    assert a.read_bytes() == b.read_bytes()
    vel = meshio.read(a).point_data["velocity"]
    np.testing.assert_array_equal(vel, np.tile([1.0, 0.0, 0.0], (m.n_vertices, 1)))
    np.testing.assert_array_equal(meshio.read(a).point_data["phi"].ravel(), phi.values)


def test_history_csv(tmp_path):
    res = run_optimization(small(n_iter=0), outdir=tmp_path)
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == HISTORY_HEADER
    assert len(lines) == 2
    res = run_optimization(small(n_iter=1), outdir=tmp_path)
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert len(lines) == 3 and len(res.history) == 2
    fields = lines[2].split(",")
    assert len(fields) == len(HISTORY_HEADER.split(","))
    assert re.fullmatch(r"-?\d\.\d{17}e[+-]\d\d", fields[1])
    assert float(fields[1]) == res.history[1].energy.total


def test_run_outputs_and_determinism(tmp_path):
    cfg = small(export_every=1)
    r1 = run_optimization(cfg, outdir=tmp_path / "a")
    r2 = run_optimization(cfg, outdir=tmp_path / "b")
    assert r1.status == r2.status == "completed"
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["final.vtk", "history.csv", "run.log", "state_00000.vtk", "state_00001.vtk",
                     "state_00002.vtk"]
    for h in r1.history:
        assert 0.0 <= h.phi_min and h.phi_max <= 1.0


def test_log_labels_follow_algorithm():
    res = run_optimization(small(n_iter=2, n_phi=3))
    for n in (1, 2):
        labels = [re.sub(r" k=\d+", "", line.split(":")[0]) for line in res.log_lines
                  if line.startswith(f"iter {n} step")]
        assert labels == ([f"iter {n} step 1", f"iter {n} step 2"]
                          + [f"iter {n} step 3.(1)", f"iter {n} step 3.(2)"] * 3 + [f"iter {n} step 4"])


def test_ch_run_conserves_mass():
    res = run_optimization(small("diffuser-ch", n_iter=3, n_phi=2))
    assert res.status == "completed"
    masses = [h.mass for h in res.history]
    assert np.ptp(masses) <= 1e-10
    assert res.ell == 0.0
    for h in res.history[1:]:
        for s in h.steps:
            assert abs(s.mass_after - s.mass_before) <= 1e-10


def test_strict_energy_aborts():
    cfg = small(tau=0.2, S0=0.0, S1=0.0, use_projection=False, n_iter=5, strict_energy=True)
    res = run_optimization(cfg)
    assert res.status == "energy_violation"
    assert len(res.history) < 6
    totals = res.totals
    assert totals[-1] > totals[-2]


def test_newton_failure_status():
    res = run_optimization(small(newton_max=1))
    assert res.status == "newton_failed" and res.history == []


def test_tau_halved_on_newton_failure(monkeypatch):
    real = driver.solve_navier_stokes
    calls = {"n": 0}

    def flaky(phase, params, guess=None):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NewtonConvergenceError("forced")
        return real(phase, params, guess)

    monkeypatch.setattr(driver, "solve_navier_stokes", flaky)
    res = run_optimization(small(n_iter=2))
    assert res.status == "completed"
    assert [h.tau for h in res.history] == [0.005, 0.0025, 0.0025]
    assert any("retrying with tau" in line for line in res.log_lines)


def test_energy_report():
    rep = energy_report(run_optimization(small(n_iter=1)))
    assert rep.tolerance > 0


def test_cli_presets(capsys):
    assert main(["presets"]) == 0
    out = capsys.readouterr().out
    for name in ("diffuser-ac", "diffuser-ch", "bypass-ac", "bypass-ch"):
        assert name in out


def test_cli_check(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("preset = bypass-ac\nnx = 12\n")
    assert main(["check", "--config", str(cfg)]) == 0
    assert "bypass (12x96)" in capsys.readouterr().out
    cfg.write_text("preset = bypass-ac\nnx = twelve\n")
    assert main(["check", "--config", str(cfg)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_cli_mesh_gen(tmp_path):
    out = tmp_path / "d.mesh"
    assert main(["mesh-gen", "--preset", "diffuser-ac", "--out", str(out), "--nx", "6", "--ny", "6"]) == 0
    m = load_mesh(out.read_bytes())
    assert m.n_vertices == 49 and "outlet-1" in m.labels()


def test_cli_run_with_mesh_file(tmp_path, capsys):
    mesh = tmp_path / "d.mesh"
    main(["mesh-gen", "--preset", "diffuser", "--out", str(mesh), "--nx", "8", "--ny", "8"])
    cfg = tmp_path / "run.cfg"
    cfg.write_text("preset = diffuser-ac\nmesh_file = d.mesh\nn_iter = 1\nn_phi = 1\n")
    outdir = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--outdir", str(outdir), "--export-every", "1"]) == 0
    assert (outdir / "state_00001.vtk").exists()
    log = (outdir / "run.log").read_text()
    assert "iter 1 step 4" in log
    assert "status: completed" in capsys.readouterr().out


def test_cli_run_strict_exit_code(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("preset = diffuser-ac\nnx = 8\nny = 8\ntau = 0.2\nS0 = 0\nS1 = 0\n"
                   "use_projection = false\nn_iter = 4\n")
    assert main(["run", "--config", str(cfg), "--outdir", str(tmp_path / "o"), "--strict-energy", "-q"]) == 2
