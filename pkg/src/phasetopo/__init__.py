"""Phase-field topology optimization of stationary Navier-Stokes flow with
stabilized Allen-Cahn and Cahn-Hilliard gradient flows on P1/MINI finite
elements."""

from .config import RunConfig, parse_config, preset_config
from .driver import RunResult, export_history, export_vtk, run_optimization
from .errors import (ConfigurationError, MeshFormatError, MeshTopologyError, NewtonConvergenceError,
                     PhaseTopoError, SingularMatrixError, SolverError)
from .flow import FlowParams, FlowState, solve_adjoint, solve_navier_stokes
from .gradflow import (allen_cahn_step, cahn_hilliard_step, dissipation_check, sensitivity_density,
                       uzawa_update)
from .mesh import BoundarySpec, Mesh, Segment, generate_rect_mesh, load_mesh
from .phase import ModelParams, PhaseField, project_unit_interval, total_energy

__version__ = "0.1.0"
