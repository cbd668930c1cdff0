"""Control-oriented climate model laboratory.

Energy-balance models and a dry primitive-equation core written as
nonlinear state-space systems, plus the estimation, control, reachability
and Monte-Carlo tooling that operates on them.
"""

__version__ = "0.1.0"

from .core import (
    BlowUpError,
    StateSpaceModel,
    Trajectory,
    constant_forcing,
    integrate_euler,
    integrate_rk4,
    linearize,
    table_forcing,
)

__all__ = [
    "BlowUpError",
    "StateSpaceModel",
    "Trajectory",
    "constant_forcing",
    "integrate_euler",
    "integrate_rk4",
    "linearize",
    "table_forcing",
    "__version__",
]
