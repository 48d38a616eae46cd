"""Phase field and the phi-dependent model ingredients.

Convention: ``phi = 1`` is fluid (no drag), ``phi = 0`` is solid
(permeability penalty ``alpha0``).  The solid volume is
``V(phi) = integral of (1 - clamp(phi, 0, 1))``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .fem import geometry, p1_operators

log = logging.getLogger(__name__)

SCHEMES = ("allen-cahn", "cahn-hilliard")


@dataclass(frozen=True, eq=False)
class PhaseField:
    """Nodal P1 phase field on ``mesh``; coefficients are read-only."""

    mesh: object
    values: np.ndarray
    min: float = field(init=False)
    max: float = field(init=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True).ravel()
        if v.size != self.mesh.n_vertices:
            raise ValueError(f"phase field has {v.size} values for {self.mesh.n_vertices} vertices")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "min", float(v.min()))
        object.__setattr__(self, "max", float(v.max()))

    @classmethod
    def constant(cls, mesh, c):
        return cls(mesh, np.full(mesh.n_vertices, float(c)))

    @classmethod
    def from_function(cls, mesh, func):
        return cls(mesh, func(mesh.vertices[:, 0], mesh.vertices[:, 1]))

    def mass(self):
        """Integral of phi (exact for the P1 interpolant)."""
        return float(p1_operators(self.mesh).lumped @ self.values)


@dataclass(frozen=True)
class ModelParams:
    """Parameters of the total free energy and of the gradient-flow scheme.

    ``eps1`` weights the gradient energy and ``eps2`` scales the double well.
    """

    eps1: float = 0.001
    eps2: float = 0.1
    beta: float = 5.0
    volume_target: float = 0.4
    alpha0: float = 1000.0
    eta1: float = 1.0
    normalize_sensitivity: bool = True
    S0: float = 1.0
    S1: float = 0.1
    tau: float = 0.005
    scheme: str = "allen-cahn"
    n_phi: int = 10
    use_projection: bool = True

    def __post_init__(self):
        for name in ("eps1", "eps2", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive", key=name)
        for name in ("S0", "S1", "beta", "alpha0", "volume_target"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative", key=name)
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}", key="scheme")
        if self.n_phi < 1:
            raise ConfigurationError("n_phi must be at least 1", key="n_phi")
        if self.scheme == "cahn-hilliard" and self.use_projection:
            raise ConfigurationError("projection breaks mass conservation and cannot be used "
                                     "with the cahn-hilliard scheme", key="use_projection")


@dataclass(frozen=True)
class EnergyBreakdown:
    gl_gradient: float
    gl_well: float
    dissipation: float
    volume_penalty: float
    dissipation_bound: float = 0.0
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total",
                           self.gl_gradient + self.gl_well + self.dissipation + self.volume_penalty)


def double_well(phi):
    """Double-well potential and its derivative (quadratic outside [0, 1])."""
    phi = np.asarray(phi, dtype=float)
    inside = 0.25 * phi ** 2 * (phi - 1.0) ** 2
    d_inside = 0.5 * phi * (phi - 1.0) * (2.0 * phi - 1.0)
    value = np.where(phi < 0.0, phi ** 2, np.where(phi > 1.0, (phi - 1.0) ** 2, inside))
    deriv = np.where(phi < 0.0, 2.0 * phi, np.where(phi > 1.0, 2.0 * (phi - 1.0), d_inside))
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def _values(phi):
    return phi.values if isinstance(phi, PhaseField) else np.asarray(phi, dtype=float)


def permeability(phi, alpha0=1000.0):
    """Nodal ``alpha = alpha0 * (1 - clamp(phi))`` and its derivative.

    The derivative is ``-alpha0`` strictly inside (0, 1) and 0 elsewhere,
    including the kinks.
    """
    v = _values(phi)
    alpha = alpha0 * (1.0 - np.clip(v, 0.0, 1.0))
    dalpha = np.where((v > 0.0) & (v < 1.0), -alpha0, 0.0)
    return alpha, dalpha


def project_unit_interval(phi):
    """Nodal clamp to [0, 1].

    Logs a warning if the clamp increased the discrete gradient energy,
    which cannot happen on meshes without obtuse angles.
    """
    v = phi.values
    if phi.min >= 0.0 and phi.max <= 1.0:
        return phi
    out = PhaseField(phi.mesh, np.clip(v, 0.0, 1.0))
    K = p1_operators(phi.mesh).stiffness
    before = float(v @ (K @ v))
    after = float(out.values @ (K @ out.values))
    if after > before * (1.0 + 1e-12) + 1e-300:
        log.warning("projection increased |grad phi|^2 from %.16e to %.16e", before, after)
    return out


def solid_volume(phi):
    """Integral of ``1 - clamp(phi, 0, 1)``, exact for the P1 interpolant."""
    lumped = p1_operators(phi.mesh).lumped
    return float(lumped @ (1.0 - np.clip(phi.values, 0.0, 1.0)))


def gradient_norm_sq(phi):
    """``|grad phi|^2`` summed elementwise from vertex differences, so it is
    exactly zero for constant fields and never negative."""
    geo = geometry(phi.mesh)
    v = phi.values[phi.mesh.triangles]
    g = geo.grad_l[:, 1] * (v[:, 1] - v[:, 0])[:, None] + geo.grad_l[:, 2] * (v[:, 2] - v[:, 0])[:, None]
    return float(geo.area @ (g ** 2).sum(axis=1))


def ginzburg_landau(phi, params):
    """``(eps1/2 |grad phi|^2, (1/eps2) * integral of omega(phi))``.

    The well term uses vertex (lumped) quadrature.
    """
    ops = p1_operators(phi.mesh)
    v = phi.values
    grad_term = 0.5 * params.eps1 * gradient_norm_sq(phi)
    omega, _ = double_well(v)
    well_term = float(ops.lumped @ omega) / params.eps2
    return grad_term, well_term


def volume_penalty(phi, params):
    return 0.5 * params.beta * (solid_volume(phi) - params.volume_target) ** 2


def total_energy(phi, state, params, flow_params, dissipation_bound=0.0):
    """Energy breakdown for ``phi`` with the flow ``state`` solved at ``phi``."""
    from .flow import dissipation_energy

    g, w = ginzburg_landau(phi, params)
    J = dissipation_energy(state, phi, flow_params)
    return EnergyBreakdown(g, w, J, volume_penalty(phi, params), dissipation_bound)
