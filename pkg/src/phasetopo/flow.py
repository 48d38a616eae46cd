"""Stationary Navier-Stokes with Brinkman drag on the MINI element, solved by
Newton's method, plus the adjoint (generalized Stokes) system.

The discrete residual, Jacobian and adjoint share one quadrature rule, so the
adjoint operator is exactly the transposed Jacobian and adjoint-based
derivatives agree with finite differences of the discrete functional.

Unknown layout: ``[u_x (V+T), u_y (V+T), p (V)]``.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, NewtonConvergenceError
from .fem import FunctionSpace, Pattern, SaddleFactor, mini_tables, p1_operators
from .mesh import boundary_dofs, dirichlet_vertex_values
from .phase import permeability

log = logging.getLogger(__name__)


def _es(*args):
    return np.einsum(*args, optimize=True)


@dataclass(frozen=True)
class FlowParams:
    """Viscosity, drag ceiling, body force and Newton controls.

    ``force`` is ``None`` or a callable ``(x, y) -> (fx, fy)`` on arrays.
    ``boundary`` is the :class:`~phasetopo.mesh.BoundarySpec` providing the
    Dirichlet profiles for the labels on the mesh.
    """

    mu: float = 0.01
    alpha0: float = 1000.0
    force: Optional[Callable] = None
    newton_tol: float = 1e-8
    newton_max: int = 30
    boundary: object = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ConfigurationError("viscosity must be positive", key="mu")
        if self.alpha0 < 0:
            raise ConfigurationError("alpha0 must be nonnegative", key="alpha0")
        if not self.newton_tol > 0:
            raise ConfigurationError("newton_tol must be positive", key="newton_tol")


@dataclass(frozen=True, eq=False)
class FlowState:
    """Velocity on vector MINI and pressure on P1; ``role`` is
    ``"state"`` or ``"adjoint"``."""

    mesh: object
    velocity: np.ndarray
    pressure: np.ndarray
    role: str = "state"

    def __post_init__(self):
        ns = self.mesh.n_vertices + self.mesh.n_triangles
        u = np.array(self.velocity, dtype=float, copy=True).ravel()
        p = np.array(self.pressure, dtype=float, copy=True).ravel()
        if u.size != 2 * ns or p.size != self.mesh.n_vertices:
            raise ValueError("flow state size does not match mesh")
        if self.role not in ("state", "adjoint"):
            raise ValueError(f"unknown role {self.role!r}")
        u.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "velocity", u)
        object.__setattr__(self, "pressure", p)

    @property
    def n_scalar(self):
        return self.mesh.n_vertices + self.mesh.n_triangles

    def vector(self):
        return np.concatenate([self.velocity, self.pressure])

    @classmethod
    def from_vector(cls, mesh, x, role="state"):
        nv = 2 * (mesh.n_vertices + mesh.n_triangles)
        return cls(mesh, x[:nv], x[nv:], role)

    @classmethod
    def zero(cls, mesh, role="state"):
        ns = mesh.n_vertices + mesh.n_triangles
        return cls(mesh, np.zeros(2 * ns), np.zeros(mesh.n_vertices), role)

    @classmethod
    def interpolate(cls, mesh, ux, uy, p=None, role="state"):
        """Vertex interpolation of velocity callables; bubble coefficients 0."""
        V, ns = mesh.n_vertices, mesh.n_vertices + mesh.n_triangles
        x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
        u = np.zeros(2 * ns)
        u[:V] = np.broadcast_to(ux(x, y), (V,))
        u[ns:ns + V] = np.broadcast_to(uy(x, y), (V,))
        pv = np.zeros(V) if p is None else np.broadcast_to(p(x, y), (V,)).astype(float)
        return cls(mesh, u, pv, role)

    def vertex_velocity(self):
        """Velocity at vertices, shape (V, 2); bubbles vanish there."""
        V, ns = self.mesh.n_vertices, self.n_scalar
        return np.column_stack([self.velocity[:V], self.velocity[ns:ns + V]])

    def local_velocity(self):
        """Element coefficients, shape (T, 2, 4)."""
        cd = FunctionSpace(self.mesh, "vector-MINI").cell_dofs
        ns = self.n_scalar
        return np.stack([self.velocity[cd], self.velocity[ns + cd]], axis=1)


@dataclass
class NewtonReport:
    increments: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    converged: bool = False
    final_residual: float = float("nan")

    @property
    def iterations(self):
        return len(self.increments)


# ---------------------------------------------------------------------------
# Discrete operators


# local element ordering: velocity (component-major, 3 P1 + bubble), then 3 pressures
_BUB = np.array([3, 7])
_RED = np.array([0, 1, 2, 4, 5, 6, 8, 9, 10])


class _System:
    """Mesh-dependent index data for the mixed system, cached on the mesh.

    The bubble unknowns are element-local and are eliminated by static
    condensation before the global solve; the condensed system has the
    vertex velocities and pressures only (``3 V`` unknowns).
    """

    def __init__(self, mesh):
        self.mesh = mesh
        V, T = mesh.n_vertices, mesh.n_triangles
        self.ns = V + T
        self.n = 2 * self.ns + V
        self.tab = mini_tables(mesh)
        tri = mesh.triangles
        cd = np.column_stack([tri, V + np.arange(T)])
        self.vel_dofs = np.concatenate([cd, cd + self.ns], axis=1)      # (T, 8)
        self.pre_dofs = 2 * self.ns + tri                               # (T, 3)
        self.loc_dofs = np.concatenate([self.vel_dofs, self.pre_dofs], axis=1)
        self.bub_dofs = self.loc_dofs[:, _BUB]                          # (T, 2)
        self.red_dofs = np.concatenate([tri, tri + V, tri + 2 * V], axis=1)   # (T, 9)
        # full index of each condensed unknown
        self.red_to_full = np.concatenate([np.arange(V), self.ns + np.arange(V),
                                           2 * self.ns + np.arange(V)])
        diag = np.arange(3 * V)
        rows = np.concatenate([np.repeat(self.red_dofs, 9, axis=1).ravel(), diag])
        cols = np.concatenate([np.tile(self.red_dofs, (1, 9)).ravel(), diag])
        self.pattern = Pattern(rows, cols, (3 * V, 3 * V))
        self.diag_pos = self.pattern.position(diag, diag)
        # physical quadrature points (T, nq, 2)
        self.xq = _es("qi,tid->tqd", self.tab.p1, mesh.vertices[tri])

        dir_v = boundary_dofs(mesh, "dirichlet")
        fixed = [dir_v, dir_v + V]
        # all-Dirichlet velocity: pressure determined up to a constant, pin one
        self.pressure_pinned = boundary_dofs(mesh, "neumann").size == 0
        if self.pressure_pinned:
            fixed.append(np.array([2 * V]))
        self.fixed_red = np.concatenate(fixed).astype(np.int64)
        self.fixed = self.red_to_full[self.fixed_red]
        mask = np.zeros(3 * V, dtype=bool)
        mask[self.fixed_red] = True
        self.zero_entries = mask[self.pattern.rows] | mask[self.pattern.cols]
        full_mask = np.zeros(self.n, dtype=bool)
        full_mask[self.fixed] = True
        self.fixed_mask = full_mask

    def fields(self, state, phase, alpha0):
        """Quadrature-point values of u, grad u, alpha and p."""
        tab = self.tab
        U = state.local_velocity()                                         # (T, 2, 4)
        uq = _es("tca,qa->tqc", U, tab.values)
        du = _es("tca,tqad->tqcd", U, tab.grads)
        alpha_n, _ = permeability(phase, alpha0)
        aq = alpha_n[self.mesh.triangles] @ tab.p1.T                       # (T, nq)
        pq = state.pressure[self.mesh.triangles] @ tab.p1.T
        return uq, du, aq, pq

    def scatter(self, local):
        """Sum element vectors (T, 11) into a full-length vector."""
        return np.bincount(self.loc_dofs.ravel(), weights=local.ravel(), minlength=self.n)


def _system(mesh):
    sysd = mesh.__dict__.get("_flow_system")
    if sysd is None:
        sysd = _System(mesh)
        object.__setattr__(mesh, "_flow_system", sysd)
    return sysd


def _element_residual(S, state, phase, params):
    """Element residual vectors (T, 11): momentum rows then continuity rows."""
    tab = S.tab
    uq, du, aq, pq = S.fields(state, phase, params.alpha0)
    w = tab.wdet
    conv = _es("tqd,tqcd->tqc", uq, du)                              # (u.grad)u
    r = params.mu * _es("tq,tqcd,tqad->tca", w, du, tab.grads)
    r += _es("tq,tqc,qa->tca", w, conv + aq[..., None] * uq, tab.values)
    r -= _es("tq,tq,tqac->tca", w, pq, tab.grads)                   # -(p, div v)
    if params.force is not None:
        fx, fy = params.force(S.xq[..., 0], S.xq[..., 1])
        f = np.stack([np.broadcast_to(fx, w.shape), np.broadcast_to(fy, w.shape)], axis=-1)
        r -= _es("tq,tqc,qa->tca", w, f, tab.values)
    div = du[..., 0, 0] + du[..., 1, 1]
    rc = -_es("tq,tq,qk->tk", w, div, tab.p1)
    return np.concatenate([r.reshape(-1, 8), rc], axis=1)


def _element_jacobian(S, state, phase, params):
    """Element Jacobians (T, 11, 11) of the residual."""
    tab = S.tab
    uq, du, aq, _ = S.fields(state, phase, params.alpha0)
    w = tab.wdet
    vals, grads = tab.values, tab.grads
    lap = _es("tq,tqad,tqbd->tab", w, grads, grads)
    mass_a = _es("tq,qa,qb->tab", w * aq, vals, vals)
    ugrad = _es("tqd,tqbd->tqb", uq, grads)                          # u . grad(phi_b)
    conv2 = _es("tq,qa,tqb->tab", w, vals, ugrad)
    diag_block = params.mu * lap + mass_a + conv2                         # (T, 4, 4)
    wvv = _es("tq,qa,qb->tqab", w, vals, vals)
    Avv = _es("tqab,tqcd->tcadb", wvv, du)                          # (T, 2, 4, 2, 4)
    Avv[:, 0, :, 0, :] += diag_block
    Avv[:, 1, :, 1, :] += diag_block
    B = -_es("tq,qk,tqad->tdak", w, tab.p1, grads).reshape(-1, 8, 3)
    T = w.shape[0]
    E = np.zeros((T, 11, 11))
    E[:, :8, :8] = Avv.reshape(T, 8, 8)
    E[:, :8, 8:] = B
    E[:, 8:, :8] = B.transpose(0, 2, 1)
    return E


class _Condensed:
    """Bubble-condensed Newton/adjoint operator at one linearization point."""

    def __init__(self, S, E):
        self.S = S
        Ebb = E[:, _BUB][:, :, _BUB]
        det = Ebb[:, 0, 0] * Ebb[:, 1, 1] - Ebb[:, 0, 1] * Ebb[:, 1, 0]
        W = np.empty_like(Ebb)
        W[:, 0, 0] = Ebb[:, 1, 1]
        W[:, 1, 1] = Ebb[:, 0, 0]
        W[:, 0, 1] = -Ebb[:, 0, 1]
        W[:, 1, 0] = -Ebb[:, 1, 0]
        self.W = W / det[:, None, None]
        self.Erb = E[:, _RED][:, :, _BUB]                                  # (T, 9, 2)
        self.Ebr = E[:, _BUB][:, :, _RED]                                  # (T, 2, 9)
        K = E[:, _RED][:, :, _RED] - self.Erb @ self.W @ self.Ebr
        data = S.pattern.data(np.concatenate([K.ravel(), np.zeros(3 * S.mesh.n_vertices)]))
        data[S.zero_entries] = 0.0
        data[S.diag_pos[S.fixed_red]] = 1.0
        self.matrix = S.pattern.matrix(data)
        self.factor = SaddleFactor(self.matrix)

    def _reduce_rhs(self, b, trans):
        S = self.S
        bb = b[S.bub_dofs]                                                 # (T, 2)
        if trans:
            loc = _es("tbr,tcb,tc->tr", self.Ebr, self.W, bb)
        else:
            loc = _es("trb,tbc,tc->tr", self.Erb, self.W, bb)
        red = b[S.red_to_full] - np.bincount(S.red_dofs.ravel(), weights=loc.ravel(),
                                             minlength=S.red_to_full.size)
        red[S.fixed_red] = 0.0
        return red

    def solve(self, b, trans=False):
        """Solve the Dirichlet-modified system (or its transpose) for a full
        right-hand side whose Dirichlet entries are ignored (taken as 0)."""
        S = self.S
        b = np.asarray(b, dtype=float)
        xr = self.factor.solve(self._reduce_rhs(b, trans), trans=trans)
        xl = xr[S.red_dofs]                                                # (T, 9)
        bb = b[S.bub_dofs]
        if trans:
            xb = _es("tcb,tc->tb", self.W, bb - _es("trb,tr->tb", self.Erb, xl))
        else:
            xb = _es("tbc,tc->tb", self.W, bb - _es("tbr,tr->tb", self.Ebr, xl))
        x = np.zeros(S.n)
        x[S.red_to_full] = xr
        x[S.bub_dofs.ravel()] = xb.ravel()
        return x


def _full_matrix(S, E):
    rows = np.repeat(S.loc_dofs, 11, axis=1).ravel()
    cols = np.tile(S.loc_dofs, (1, 11)).ravel()
    A = sp.coo_matrix((E.ravel(), (rows, cols)), shape=(S.n, S.n)).tocsr()
    A.sum_duplicates()
    keep = sp.diags((~S.fixed_mask).astype(float))
    return (keep @ A @ keep + sp.diags(S.fixed_mask.astype(float))).tocsr()


def assemble_oseen(current, phase, params):
    """Newton system at ``current``: Jacobian and negative residual.

    Returns the full (uncondensed) sparse Jacobian.  Dirichlet rows and
    columns are replaced by identity (increment form, the increment vanishes
    there); with an all-Dirichlet boundary one pressure dof is pinned as well.
    """
    S = _system(current.mesh)
    if phase.mesh is not current.mesh:
        raise ValueError("phase field and flow state live on different meshes")
    A = _full_matrix(S, _element_jacobian(S, current, phase, params))
    rhs = -S.scatter(_element_residual(S, current, phase, params))
    rhs[S.fixed] = 0.0
    return A, rhs


def residual_norm(state, phase, params):
    """Max-norm of the discrete residual on the free (non-Dirichlet) rows."""
    S = _system(state.mesh)
    full = S.scatter(_element_residual(S, state, phase, params))
    full[S.fixed] = 0.0
    return float(np.abs(full).max())


def initial_state(mesh, boundary):
    """Zero velocity with the interpolated Dirichlet data."""
    if boundary is None:
        raise ConfigurationError("flow parameters carry no boundary specification", key="boundary")
    idx, vals = dirichlet_vertex_values(mesh, boundary)
    ns = mesh.n_vertices + mesh.n_triangles
    u = np.zeros(2 * ns)
    u[idx] = vals[:, 0]
    u[ns + idx] = vals[:, 1]
    return FlowState(mesh, u, np.zeros(mesh.n_vertices))


def _recenter_pressure(S, x):
    if S.pressure_pinned:
        lumped = p1_operators(S.mesh).lumped
        p = x[2 * S.ns:]
        x[2 * S.ns:] = p - (lumped @ p) / lumped.sum()
    return x


def solve_navier_stokes(phase, params, guess=None):
    """Newton iteration from ``guess`` (or zero flow with Dirichlet data).

    Stops once the max-norm of the velocity increment drops below
    ``params.newton_tol``; raises :class:`NewtonConvergenceError` with the
    report attached otherwise.
    """
    mesh = phase.mesh
    S = _system(mesh)
    state = guess if guess is not None else initial_state(mesh, params.boundary)
    x = state.vector().copy()
    report = NewtonReport()
    nv = 2 * S.ns
    for _ in range(params.newton_max):
        cur = FlowState.from_vector(mesh, x)
        rhs = -S.scatter(_element_residual(S, cur, phase, params))
        rhs[S.fixed] = 0.0
        report.residuals.append(float(np.abs(rhs).max()))
        dx = _Condensed(S, _element_jacobian(S, cur, phase, params)).solve(rhs)
        x += dx
        inc = float(np.abs(dx[:nv]).max())
        report.increments.append(inc)
        log.debug("newton it %d: |du|_inf=%.3e |R|_inf=%.3e", report.iterations, inc, report.residuals[-1])
        if not np.isfinite(inc):
            break
        if inc < params.newton_tol:
            report.converged = True
            break
    x = _recenter_pressure(S, x)
    if not report.converged:
        last = report.increments[-1] if report.increments else float("nan")
        raise NewtonConvergenceError(
            f"Newton did not converge in {report.iterations} iterations (last increment {last:.3e})",
            report)
    state = FlowState.from_vector(mesh, x)
    report.final_residual = residual_norm(state, phase, params)
    return state, report


def dissipation_gradient(state, phase, params):
    """Derivative of the dissipation functional with respect to the velocity:
    ``mu (grad u, grad w) + (alpha u, w)`` as a vector over all unknowns."""
    S = _system(state.mesh)
    tab = S.tab
    uq, du, aq, _ = S.fields(state, phase, params.alpha0)
    w = tab.wdet
    g = params.mu * _es("tq,tqcd,tqad->tca", w, du, tab.grads)
    g += _es("tq,tqc,qa->tca", w * aq, uq, tab.values)
    T = w.shape[0]
    return S.scatter(np.concatenate([g.reshape(T, 8), np.zeros((T, 3))], axis=1))


def solve_adjoint(state, phase, params, rhs=None):
    """Adjoint velocity/pressure: transposed Newton Jacobian at ``state``
    against the dissipation derivative (or a supplied right-hand side).

    The adjoint velocity vanishes on the Dirichlet boundary.
    """
    S = _system(state.mesh)
    b = dissipation_gradient(state, phase, params) if rhs is None else np.array(rhs, dtype=float)
    b[S.fixed] = 0.0
    x = _Condensed(S, _element_jacobian(S, state, phase, params)).solve(b, trans=True)
    x = _recenter_pressure(S, x)
    return FlowState.from_vector(state.mesh, x, role="adjoint")


def dissipation_energy(state, phase, params):
    """``integral of mu/2 |grad u|^2 + alpha(phi)/2 |u|^2``."""
    S = _system(state.mesh)
    uq, du, aq, _ = S.fields(state, phase, params.alpha0)
    w = S.tab.wdet
    return float(0.5 * params.mu * _es("tq,tqcd,tqcd->", w, du, du)
                 + 0.5 * _es("tq,tq,tqc,tqc->", w, aq, uq, uq))


def divergence_norm(state):
    """L2 norm of the elementwise velocity divergence."""
    S = _system(state.mesh)
    U = state.local_velocity()
    du = _es("tca,tqad->tqcd", U, S.tab.grads)
    div = du[..., 0, 0] + du[..., 1, 1]
    return float(np.sqrt(_es("tq,tq,tq->", S.tab.wdet, div, div)))


def trilinear(a, b, c):
    """``b(a, b, c) = integral of ((a . grad) b) . c`` for three velocity fields."""
    S = _system(a.mesh)
    tab = S.tab
    aq = _es("tca,qa->tqc", a.local_velocity(), tab.values)
    db = _es("tca,tqad->tqcd", b.local_velocity(), tab.grads)
    cq = _es("tca,qa->tqc", c.local_velocity(), tab.values)
    return float(_es("tq,tqd,tqcd,tqc->", tab.wdet, aq, db, cq))


def p1_load_of_dot(a, b):
    """Vector ``integral of psi_i (a . b)`` over P1 test functions ``psi_i``."""
    S = _system(a.mesh)
    tab = S.tab
    aq = _es("tca,qa->tqc", a.local_velocity(), tab.values)
    bq = _es("tca,qa->tqc", b.local_velocity(), tab.values)
    loc = _es("tq,tqc,tqc,qk->tk", tab.wdet, aq, bq, tab.p1)
    return np.bincount(a.mesh.triangles.ravel(), weights=loc.ravel(), minlength=a.mesh.n_vertices)


def velocity_l2_error(state, exact):
    """L2 distance between the discrete velocity and ``exact(x, y) -> (ux, uy)``."""
    S = _system(state.mesh)
    uq = _es("tca,qa->tqc", state.local_velocity(), S.tab.values)
    ex, ey = exact(S.xq[..., 0], S.xq[..., 1])
    e = uq - np.stack([ex, ey], axis=-1)
    return float(np.sqrt(_es("tq,tqc,tqc->", S.tab.wdet, e, e)))


def velocity_dirichlet_free(mesh):
    """Boolean mask over velocity dofs that are not Dirichlet-constrained."""
    S = _system(mesh)
    return ~S.fixed_mask[:2 * S.ns]


__all__ = [
    "FlowParams", "FlowState", "NewtonReport", "assemble_oseen", "solve_navier_stokes",
    "solve_adjoint", "dissipation_energy", "divergence_norm", "trilinear", "p1_load_of_dot",
    "velocity_l2_error", "initial_state", "residual_norm", "dissipation_gradient",
]
