"""Stabilized semi-implicit gradient-flow steps for the phase field.

Both schemes treat the gradient energy and the stabilization
``S0 + S1 (-Laplace)`` implicitly and every other force explicitly, so each
step is one linear solve with a matrix that does not change between steps.
Factorizations are cached on the mesh.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import SaddleFactor, p1_operators
from .flow import p1_load_of_dot
from .phase import PhaseField, double_well, permeability, solid_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SensitivityField:
    """Nodal explicit forcing of the gradient flow, split by origin.

    ``well + flow + volume + multiplier`` is the total; ``eta2`` is the
    normalization factor that was applied to the flow part (1 when off).
    """

    mesh: object
    well: np.ndarray
    flow: np.ndarray
    volume: np.ndarray
    multiplier: np.ndarray
    eta2: float = 1.0
    warnings: tuple = ()
    total: np.ndarray = field(init=False)

    def __post_init__(self):
        t = self.well + self.flow + self.volume + self.multiplier
        t.setflags(write=False)
        object.__setattr__(self, "total", t)

    @classmethod
    def constant(cls, mesh, g):
        """Spatially constant forcing (all carried by the well slot)."""
        z = np.zeros(mesh.n_vertices)
        return cls(mesh, np.full(mesh.n_vertices, float(g)), z, z.copy(), z.copy())

    def load(self):
        """Forcing vector ``m * U`` tested against the P1 basis (lumped)."""
        return p1_operators(self.mesh).lumped * self.total


@dataclass
class StepReport:
    dissipation_bound: float
    phi_min: float
    phi_max: float
    solver_iterations: int = 1
    mass_before: float = float("nan")
    mass_after: float = float("nan")
    energy_before: float = float("nan")
    energy_after: float = float("nan")


def flow_force(phi, state, adjoint, alpha0):
    """Exact derivative of the dissipation (through the state equation) with
    respect to each nodal phase value, divided by the lumped mass.

    Equals ``alpha'(phi_i) (|u|^2/2 - u.v)`` averaged against the hat
    function of vertex ``i``.
    """
    _, dalpha = permeability(phi, alpha0)
    lumped = p1_operators(phi.mesh).lumped
    load = 0.5 * p1_load_of_dot(state, state) - p1_load_of_dot(state, adjoint)
    return dalpha * load / lumped


def sensitivity_density(phi, state, adjoint, params, ell=0.0):
    """Explicit forcing at ``phi`` for the given state and adjoint.

    The flow part is scaled by ``eta1 / eta2`` where ``eta2`` is its lumped
    L2 norm when ``params.normalize_sensitivity`` is set.  The volume force
    uses ``V' = -1`` everywhere and the multiplier enters through the same
    derivative.
    """
    mesh = phi.mesh
    lumped = p1_operators(mesh).lumped
    _, dw = double_well(phi.values)
    well = np.asarray(dw, dtype=float) / params.eps2
    flow = flow_force(phi, state, adjoint, params.alpha0)
    eta2 = 1.0
    warnings = []
    if params.normalize_sensitivity:
        norm = float(np.sqrt(lumped @ flow ** 2))
        if norm < 1e-14:
            warnings.append(f"flow force norm {norm:.3e} too small; normalization skipped")
            log.warning(warnings[-1])
        else:
            eta2 = norm
    flow = flow * (params.eta1 / eta2)
    n = mesh.n_vertices
    volume = np.full(n, -params.beta * (solid_volume(phi) - params.volume_target))
    multiplier = np.full(n, -float(ell))
    return SensitivityField(mesh, well, flow, volume, multiplier, eta2, tuple(warnings))


def _factor(mesh, key, build):
    cache = mesh.__dict__.get("_flow_factors")
    if cache is None:
        cache = {}
        object.__setattr__(mesh, "_flow_factors", cache)
    if key not in cache:
        cache[key] = SaddleFactor(build())
    return cache[key]


def allen_cahn_matrix(mesh, params):
    """``(1/tau + S0) M + (eps1 + S1) K``; symmetric positive definite."""
    ops = p1_operators(mesh)
    return ((1.0 / params.tau + params.S0) * ops.mass
            + (params.eps1 + params.S1) * ops.stiffness).tocsr()


def allen_cahn_step(phi, U, params):
    """One L2 gradient-flow step; no projection is applied here.

    Returns the new field and a report whose bound is ``-tau |nu|^2`` with
    ``nu = -(phi_new - phi) / tau``.
    """
    mesh = phi.mesh
    ops = p1_operators(mesh)
    key = ("ac", params.tau, params.S0, params.S1, params.eps1)
    lu = _factor(mesh, key, lambda: allen_cahn_matrix(mesh, params))
    v = phi.values
    rhs = (1.0 / params.tau + params.S0) * (ops.mass @ v) + params.S1 * (ops.stiffness @ v) - U.load()
    new = lu.solve(rhs)
    nu = -(new - v) / params.tau
    bound = -params.tau * float(nu @ (ops.mass @ nu))
    out = PhaseField(mesh, new)
    return out, StepReport(bound, out.min, out.max,
                           mass_before=phi.mass(), mass_after=out.mass())


def cahn_hilliard_matrix(mesh, params):
    """Block system in ``(phi_new, nu)``."""
    ops = p1_operators(mesh)
    M, K = ops.mass, ops.stiffness
    return sp.bmat([[M / params.tau, K],
                    [-(params.eps1 + params.S1) * K - params.S0 * M, M]]).tocsr()


def cahn_hilliard_step(phi, U, params):
    """One H^-1 gradient-flow step with the chemical potential ``nu`` as a
    second unknown.  Conserves the integral of ``phi``."""
    mesh = phi.mesh
    ops = p1_operators(mesh)
    M, K = ops.mass, ops.stiffness
    n = mesh.n_vertices
    key = ("ch", params.tau, params.S0, params.S1, params.eps1)
    lu = _factor(mesh, key, lambda: cahn_hilliard_matrix(mesh, params))
    v = phi.values
    rhs = np.concatenate([
        (M @ v) / params.tau,
        -params.S1 * (K @ v) + U.load() - params.S0 * (M @ v),
    ])
    x = lu.solve(rhs)
    new, nu = x[:n], x[n:]
    bound = -params.tau * float(nu @ (K @ nu))
    out = PhaseField(mesh, new)
    return out, PhaseField(mesh, nu), StepReport(bound, out.min, out.max,
                                                 mass_before=phi.mass(), mass_after=out.mass())


def uzawa_update(ell, phi, params):
    """``ell + beta (V(phi) - V_target)``."""
    return float(ell) + params.beta * (solid_volume(phi) - params.volume_target)


@dataclass
class DissipationReport:
    flagged: list
    largest_increase: float
    largest_index: int
    tolerance: float

    @property
    def monotone(self):
        return not self.flagged


def dissipation_check(history):
    """Flag every index whose total energy exceeds the previous one by more
    than ``1e-9 max(1, |W_0|)``."""
    totals = np.array([getattr(h, "total", h) for h in history], dtype=float)
    if totals.size < 2:
        raise ValueError("need at least two energy values")
    tol = 1e-9 * max(1.0, abs(totals[0]))
    inc = np.diff(totals)
    flagged = [int(i) + 1 for i in np.nonzero(inc > tol)[0]]
    k = int(np.argmax(inc))
    return DissipationReport(flagged, float(inc[k]), k + 1, tol)
