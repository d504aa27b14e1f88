"""Exception hierarchy."""


class FiberlabError(Exception):
    """Base class for all package errors."""


class DomainError(FiberlabError, ValueError):
    """A point or field lies outside every chart domain."""


class ConditioningError(FiberlabError, ArithmeticError):
    """A metric or linear system is too close to singular."""


class BranchError(FiberlabError, ValueError):
    """Group logarithm requested outside its principal domain."""


class RefinementRequired(FiberlabError):
    """A simulation step jumped further than the chart guard allows.

    ``suggested_dt`` carries a step size that should pass the guard.
    """

    def __init__(self, message, suggested_dt=None):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class SampleSizeError(FiberlabError, ValueError):
    """Too few Monte Carlo paths for a statistical verdict."""


class ConfigError(FiberlabError, ValueError):
    """Invalid experiment configuration; ``path`` locates the offending key."""

    def __init__(self, message, path=""):
        super().__init__(message)
        self.path = path if isinstance(path, str) else "/".join(map(str, path))
