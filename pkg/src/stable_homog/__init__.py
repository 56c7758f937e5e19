"""Numerical homogenization of stable-like random walks with random conductances."""

import os

# numba's default TBB layer warns when the installed TBB is old; OpenMP is fine
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .environment import ConductanceLaw, Environment, conductance, conductances, parse_law  # noqa: E402
from .errors import (  # noqa: E402
    AccuracyError,
    ConfigurationError,
    DomainError,
    ResourceError,
    SolverError,
    StableHomogError,
)
from .lattice import GridFunction, LatticeBox, multiscale_centers  # noqa: E402
from .operators import NonlocalOperator, apply, assemble_dense, dirichlet_energy, potential_field  # noqa: E402
from .reference import QuadratureConfig, SmoothBump, frac_generator_apply, make_test_function  # noqa: E402
from .solvers import smallest_nonzero_eigenvalue, solve_poisson_meanzero, solve_resolvent  # noqa: E402

__version__ = "0.1.0"
