"""Divergence-conforming B-spline discretization of incompressible flow with
variational multiscale (residual-based) subgrid modelling."""

from .config import CaseConfig, parse_config
from .errors import (ConfigError, DataError, DomainError, IOFailure, NonConvergenceError, NumericalError, SolverError,
                     VMSFlowError)
from .forms import FluidParams, NavierStokesSystem, OseenSystem, StabilizationConfig, stokes_projector
from .spaces import BoundarySpec, Mesh, build_space
from .time_integration import TimeSettings, TransientSolver, solve_steady

__version__ = "0.1.0"

__all__ = [
    "BoundarySpec", "CaseConfig", "ConfigError", "DataError", "DomainError", "FluidParams", "IOFailure", "Mesh",
    "NavierStokesSystem", "NonConvergenceError", "NumericalError", "OseenSystem", "SolverError",
    "StabilizationConfig", "TimeSettings", "TransientSolver", "VMSFlowError", "build_space", "parse_config",
    "solve_steady", "stokes_projector",
]
