"""Outer optimization loop, run history and file exports."""

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NewtonConvergenceError
from .flow import solve_adjoint, solve_navier_stokes
from .gradflow import (allen_cahn_step, cahn_hilliard_step, dissipation_check,
                       sensitivity_density, uzawa_update)
from .mesh import generate_rect_mesh, load_mesh
from .phase import PhaseField, project_unit_interval, solid_volume, total_energy

log = logging.getLogger(__name__)

MAX_HALVINGS = 5
HISTORY_HEADER = ("iter,W_total,W_gl_grad,W_gl_well,J_dissipation,W_volume,volume,ell,"
                  "phi_min,phi_max,newton_iters,dissipation_bound")


@dataclass
class HistoryRow:
    iter: int
    energy: object
    volume: float
    ell: float
    phi_min: float
    phi_max: float
    newton_iters: int
    tau: float
    mass: float
    steps: list = field(default_factory=list)

    @property
    def dissipation_bound(self):
        return self.energy.dissipation_bound


@dataclass
class RunResult:
    phase: PhaseField
    state: object
    history: list
    status: str
    ell: float = 0.0
    message: str = ""
    log_lines: list = field(default_factory=list)

    @property
    def totals(self):
        return np.array([h.energy.total for h in self.history])


def build_mesh(config):
    if config.mesh_file:
        with open(config.mesh_file, "rb") as fh:
            return load_mesh(fh.read())
    from .config import GEOMETRIES

    xr, yr, _, _ = GEOMETRIES[config.geometry]
    return generate_rect_mesh(xr, yr, config.nx, config.ny, config.boundary)


def initial_phase(config, mesh):
    phi = PhaseField.from_function(mesh, config.phi0)
    if config.model.use_projection:
        phi = project_unit_interval(phi)
    return phi


class _RunLog:
    def __init__(self):
        self.lines = []

    def __call__(self, msg):
        self.lines.append(msg)
        log.info(msg)


def _inner_steps(phi, forcing, params, emit, n):
    """Step 3 of the loop: ``n_phi`` gradient-flow steps.  The forcing is
    re-evaluated at each inner iterate with the state and adjoint held at
    their outer-iteration values."""
    reports = []
    ac = params.scheme == "allen-cahn"
    for k in range(params.n_phi):
        U = forcing(phi)
        for w in U.warnings:
            emit(f"iter {n} warning: {w}")
        if ac:
            phi, rep = allen_cahn_step(phi, U, params)
            emit(f"iter {n} step 3.(1) k={k + 1}: allen-cahn update "
                 f"min={rep.phi_min:.6e} max={rep.phi_max:.6e}")
            if params.use_projection:
                phi = project_unit_interval(phi)
                emit(f"iter {n} step 3.(2) k={k + 1}: projection")
        else:
            phi, _, rep = cahn_hilliard_step(phi, U, params)
            emit(f"iter {n} step 3 k={k + 1}: cahn-hilliard update "
                 f"mass drift={rep.mass_after - rep.mass_before:.3e}")
        reports.append(rep)
    return phi, reports


def run_optimization(config, outdir=None, progress=None):
    """Run the outer loop for ``config.n_iter`` iterations.

    Per iteration: state solve, adjoint solve, ``n_phi`` inner phase steps
    with the forcing frozen, then (Allen-Cahn only) the multiplier update.
    The state solved to evaluate the energy at the new phase field is reused
    as the next iteration's state.  ``history[0]`` describes the initial
    field.  If ``outdir`` is given, ``history.csv``, ``run.log`` and the VTK
    snapshots are written there.
    """
    emit = _RunLog()
    mesh = build_mesh(config)
    params = config.model
    flow = config.flow
    phi = initial_phase(config, mesh)
    ell = 0.0
    ac = params.scheme == "allen-cahn"
    history = []
    status, message = "completed", ""
    emit(f"mesh: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles; scheme {params.scheme}")

    def record(n, phi, state, newton_iters, bound, steps, tau):
        e = total_energy(phi, state, params, flow, dissipation_bound=bound)
        row = HistoryRow(n, e, solid_volume(phi), ell, phi.min, phi.max, newton_iters, tau,
                         phi.mass(), steps)
        history.append(row)
        emit(f"iter {n} record: W={e.total:.12e} V={row.volume:.6e} min={phi.min:.6e} "
             f"max={phi.max:.6e} bound={bound:.6e}")
        if progress is not None:
            progress(row)
        return row

    try:
        state, rep = solve_navier_stokes(phi, flow)
    except NewtonConvergenceError as exc:
        emit(f"iter 0 step 1: state solve failed: {exc}")
        return _finish(RunResult(phi, None, history, "newton_failed", ell, str(exc), emit.lines),
                       config, mesh, outdir)
    emit(f"iter 0 step 1: state solve, newton iterations {rep.iterations}")
    record(0, phi, state, rep.iterations, 0.0, [], params.tau)
    tol = None
    _maybe_export(config, outdir, 0, phi, state)

    for n in range(1, config.n_iter + 1):
        emit(f"iter {n} step 1: state solve (reused from iteration {n - 1} record)")
        adjoint = solve_adjoint(state, phi, flow)
        emit(f"iter {n} step 2: adjoint solve")
        mult = ell if ac else 0.0

        def forcing(ph, state=state, adjoint=adjoint):
            return sensitivity_density(ph, state, adjoint, params, mult)

        for attempt in range(MAX_HALVINGS + 1):
            new_phi, steps = _inner_steps(phi, forcing, params, emit, n)
            try:
                new_state, rep = solve_navier_stokes(new_phi, flow, guess=state)
                break
            except NewtonConvergenceError as exc:
                if attempt == MAX_HALVINGS:
                    status, message = "newton_failed", str(exc)
                    emit(f"iter {n} newton failed after {MAX_HALVINGS} halvings of tau")
                    break
                params = replace(params, tau=0.5 * params.tau)
                emit(f"iter {n} newton failed; retrying with tau={params.tau:.6e}")
        if status == "newton_failed":
            break
        phi, state = new_phi, new_state
        if ac:
            ell = uzawa_update(ell, phi, params)
            emit(f"iter {n} step 4: multiplier update ell={ell:.12e}")
        bound = float(sum(s.dissipation_bound for s in steps))
        row = record(n, phi, state, rep.iterations, bound, steps, params.tau)
        _maybe_export(config, outdir, n, phi, state)

        if tol is None:
            tol = 1e-9 * max(1.0, abs(history[0].energy.total))
        dW = row.energy.total - history[-2].energy.total
        if dW > bound + tol:
            emit(f"iter {n} energy inequality not met: dW={dW:.6e} bound={bound:.6e}")
        if dW > tol:
            emit(f"iter {n} energy increased by {dW:.6e}")
            if config.strict_energy:
                status, message = "energy_violation", f"energy increased by {dW:.6e} at iteration {n}"
                break

    emit(f"finished: {status}")
    return _finish(RunResult(phi, state, history, status, ell, message, emit.lines), config, mesh, outdir)


def _maybe_export(config, outdir, n, phi, state):
    if outdir is None or not config.export_every:
        return
    if n % config.export_every == 0:
        os.makedirs(outdir, exist_ok=True)
        export_vtk(phi, state, os.path.join(outdir, f"state_{n:05d}.vtk"))


def _finish(result, config, mesh, outdir):
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        export_history(result, os.path.join(outdir, "history.csv"))
        with open(os.path.join(outdir, "run.log"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(result.log_lines) + "\n")
        if result.state is not None:
            export_vtk(result.phase, result.state, os.path.join(outdir, "final.vtk"))
    return result


def energy_report(result):
    """Monotonicity check over the recorded totals."""
    return dissipation_check([h.energy for h in result.history])


# ---------------------------------------------------------------------------
# Exports


def _fmt(x):
    return "%.17e" % x


def export_history(result, path):
    """One CSV row per recorded outer iteration, full double precision."""
    lines = [HISTORY_HEADER]
    for h in result.history:
        e = h.energy
        vals = [e.total, e.gl_gradient, e.gl_well, e.dissipation, e.volume_penalty,
                h.volume, h.ell, h.phi_min, h.phi_max]
        lines.append(",".join([str(h.iter)] + [_fmt(v) for v in vals]
                              + [str(h.newton_iters), _fmt(e.dissipation_bound)]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def export_vtk(phi, state, path, title="phase field topology optimization"):
    """Legacy ASCII unstructured grid with ``phi``, ``pressure`` and the
    vertex part of ``velocity`` as point data."""
    mesh = phi.mesh
    if state is not None and state.mesh is not mesh:
        raise ValueError("phase field and flow state live on different meshes")
    V, T = mesh.n_vertices, mesh.n_triangles
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {V} double"]
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    out.append(f"CELLS {T} {4 * T}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    out.append(f"CELL_TYPES {T}")
    out += ["5"] * T
    out += [f"POINT_DATA {V}", "SCALARS phi double 1", "LOOKUP_TABLE default"]
    out += [repr(v) for v in phi.values.tolist()]
    if state is not None:
        out += ["SCALARS pressure double 1", "LOOKUP_TABLE default"]
        out += [repr(v) for v in state.pressure.tolist()]
        out.append("VECTORS velocity double")
        out += [f"{u!r} {v!r} 0.0" for u, v in state.vertex_velocity().tolist()]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")
