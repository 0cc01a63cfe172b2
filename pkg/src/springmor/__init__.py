"""Differentiable spring-mass simulation and structure-preserving model-order reduction.

The package learns hierarchical graph coarsenings (assignment matrices) and
mechanical parameters (stiffness, damping, contact coefficients) of a
spring-mass system from observed trajectories, keeping every reduced level
an explicit second-order system runnable by a plain integrator.
"""

from . import autodiff, dynamics, graph
from .errors import (
    DivergedSimulation,
    EmptyCluster,
    InvalidConfig,
    InvalidInput,
    InvalidScene,
    IsolatedNode,
    NumericalError,
    ParseError,
    SolverFailure,
    SpringMorError,
    UnsupportedVersion,
)

__version__ = "0.1.0"
