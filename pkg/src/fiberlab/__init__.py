"""Stochastic differential geometry on principal fiber bundles.

Geometry is chart-local and evaluated with JAX in double precision; importing
the package switches JAX to 64-bit mode.
"""

import jax

jax.config.update("jax_enable_x64", True)

from fiberlab.errors import (  # noqa: E402
    BranchError,
    ConditioningError,
    ConfigError,
    DomainError,
    FiberlabError,
    RefinementRequired,
    SampleSizeError,
)

__version__ = "0.1.0"

__all__ = [
    "BranchError",
    "ConditioningError",
    "ConfigError",
    "DomainError",
    "FiberlabError",
    "RefinementRequired",
    "SampleSizeError",
]
