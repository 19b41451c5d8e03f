"""Lattice polarization, exterior heat problems and Wiener sausage estimates."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    Clipped,
    ConfigError,
    EllipticityViolated,
    EmptySet,
    IncompatibleHalfSpace,
    MarginTooSmall,
    SolverDiverged,
    Stalled,
)

__all__ = [
    "Clipped",
    "ConfigError",
    "EllipticityViolated",
    "EmptySet",
    "IncompatibleHalfSpace",
    "MarginTooSmall",
    "SolverDiverged",
    "Stalled",
]
