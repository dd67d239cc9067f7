"""Weak-form estimation of ODE parameters.

The main entry points are :func:`wendy.solvers.wendy_mle`, the other
estimators in :mod:`wendy.solvers`, and the benchmark driver in
:mod:`wendy.bench`.
"""

from .model import BenchmarkSystem, OdeModel, builtin, builtin_names, log_transform, verify_derivatives

__version__ = "0.1.0"

__all__ = [
    "BenchmarkSystem",
    "OdeModel",
    "builtin",
    "builtin_names",
    "log_transform",
    "verify_derivatives",
]
