"""Desk-scale numerics laboratory for McKean-Vlasov SDEs.

Subpackages:

* :mod:`mvsde.measures` -- particle ensembles, grid densities, flows
* :mod:`mvsde.metrics` -- transport and weighted-variation distances
* :mod:`mvsde.coefficients` -- drift/diffusion models and the constants audit
* :mod:`mvsde.gaussian_kernel` -- frozen Gaussian kernels and their integrals
* :mod:`mvsde.sde_engine` -- Euler-Maruyama with common-random-numbers coupling
* :mod:`mvsde.duhamel` -- the density identity and its 1D Picard solver
* :mod:`mvsde.fixed_point` -- the two-step fixed point and lambda scheduling
* :mod:`mvsde.experiments` -- reproducible experiment harness (CLI: ``mvsde``)
"""

from .errors import (
    AuditError,
    ConfigError,
    ConvergenceError,
    DomainError,
    MvsdeError,
    NumericsError,
    QuadratureError,
    SizeError,
)
from .measures import Density, Flow, GridSpec, Measure

__version__ = "0.1.0"

__all__ = [
    "AuditError",
    "ConfigError",
    "ConvergenceError",
    "Density",
    "DomainError",
    "Flow",
    "GridSpec",
    "Measure",
    "MvsdeError",
    "NumericsError",
    "QuadratureError",
    "SizeError",
    "__version__",
]
