"""Stabilized neural differential equations.

Neural ODE vector fields trained on trajectory data, with an added
relaxation term ``-gamma * pinv(G(u)) @ g(u)`` that keeps solutions on the
constraint manifold ``g(u) = 0``.
"""

import jax

# Everything in this package is float64.
jax.config.update("jax_enable_x64", True)

from snde.num_core import (  # noqa: E402
    DOP853,
    TSIT5,
    ButcherTableau,
    IntegrationError,
    SolverStats,
    StepController,
    Trajectory,
    integrate,
    rk_step,
)
from snde.stabilization import (  # noqa: E402
    ConstraintManifold,
    SingularConfigurationError,
    StabilizedField,
    gamma_lower_bound,
    lyapunov_series,
    stabilization_term,
    stabilized_rhs,
)

__version__ = "0.1.0"

__all__ = [
    "DOP853",
    "TSIT5",
    "ButcherTableau",
    "ConstraintManifold",
    "IntegrationError",
    "SingularConfigurationError",
    "SolverStats",
    "StabilizedField",
    "StepController",
    "Trajectory",
    "gamma_lower_bound",
    "integrate",
    "lyapunov_series",
    "rk_step",
    "stabilization_term",
    "stabilized_rhs",
]
