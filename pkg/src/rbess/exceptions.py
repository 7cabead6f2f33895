"""Exception and warning types raised across the package."""


class RbessError(Exception):
    """Base class for all package errors."""


class DomainError(RbessError, ValueError):
    """An argument lies outside the domain of a model function."""


class EnergyFrameError(RbessError):
    """The accumulated-energy frame became non-physical (E + E0 <= 0)."""


class TopologyError(RbessError):
    """A switch-matrix transition that cannot be carried out."""


class ReconfigurationError(TopologyError):
    """The demanded output voltage cannot be reached with the in-service cells."""


class SolverError(RbessError):
    """The conic solver did not return a usable optimum."""

    def __init__(self, message, status=None, diagnostics=None):
        super().__init__(message)
        self.status = status
        self.diagnostics = diagnostics or {}


class ScenarioError(RbessError, ValueError):
    """A scenario or profile file failed validation."""

    def __init__(self, message, line=None, field=None):
        loc = []
        if field is not None:
            loc.append(f"field '{field}'")
        if line is not None:
            loc.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.field = field


class SimulationAborted(RbessError):
    """Closed-loop run stopped before the end of the profile."""

    def __init__(self, message, step=None, dump=None):
        super().__init__(message)
        self.step = step
        self.dump = dump


class LikelyInfeasibleWarning(UserWarning):
    """Demand exceeds the summed per-cell power capability."""


class ClippedBoundWarning(UserWarning):
    """A SoC bound was clipped to the active OCV segment."""
