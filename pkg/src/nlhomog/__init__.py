"""Numerical laboratory for homogenization of random convex Lagrangians and of
their linearizations: cell problems, homogenized Lagrangians, Dirichlet-problem
comparisons and large-scale regularity scans on P1 finite element meshes.
"""
from .cells import HomogenizedLagrangian, ahom_frozen, cell_sweep, nu, subadditivity_check, tabulate_Lbar
from .errors import (ConfigurationError, ConsistencyError, CoverageError, DomainError, EnsembleError,
                     InsufficientDataError, NlhomogError, NonConvergenceError, NumericalError, ResourceError,
                     SolverError)
from .homog import commutativity_trial, two_scale_expansion
from .lagrangian import CoefficientLaw, LagrangianRealization, NonlinearitySpec, sample_realization
from .mesh import mesh_box, mesh_cube, mesh_lattice_ball, norm_Hminus1
from .solvers import minimize_energy, solve_linearized
from .stats import ensemble_run, fit_Osigma, fit_rate

__version__ = "0.1.0"

__all__ = [
    "HomogenizedLagrangian", "ahom_frozen", "cell_sweep", "nu", "subadditivity_check", "tabulate_Lbar",
    "ConfigurationError", "ConsistencyError", "CoverageError", "DomainError", "EnsembleError",
    "InsufficientDataError", "NlhomogError", "NonConvergenceError", "NumericalError", "ResourceError", "SolverError",
    "commutativity_trial", "two_scale_expansion",
    "CoefficientLaw", "LagrangianRealization", "NonlinearitySpec", "sample_realization",
    "mesh_box", "mesh_cube", "mesh_lattice_ball", "norm_Hminus1",
    "minimize_energy", "solve_linearized",
    "ensemble_run", "fit_Osigma", "fit_rate",
]
