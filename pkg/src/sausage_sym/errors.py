"""Exception types raised across the package."""


class IncompatibleHalfSpace(ValueError):
    """The reflection across the half-space does not map the lattice to itself."""


class Clipped(ValueError):
    """A reflected or translated set would leave the usable part of the grid."""


class EmptySet(ValueError):
    """An operation that needs positive measure received an empty set."""


class Stalled(RuntimeError):
    """No candidate half-space makes progress and the tolerance is unmet."""


class SolverDiverged(RuntimeError):
    """Conjugate gradient did not reach the residual tolerance."""


class MarginTooSmall(RuntimeError):
    """The truncated domain is too small for the requested horizon."""


class EllipticityViolated(ValueError):
    """Operator coefficients fail the non-degeneracy probe."""


class ConfigError(ValueError):
    """Invalid configuration; the message names the key, file and line."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
