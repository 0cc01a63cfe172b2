"""Exception types shared across the package."""


class SpringMorError(Exception):
    """Base class for all springmor errors."""


class InvalidScene(SpringMorError):
    """Scene data violates a structural precondition (too few nodes, duplicates, ...)."""


class InvalidConfig(SpringMorError):
    """A configuration value is out of its legal range."""


class InvalidInput(SpringMorError):
    """An operation received semantically invalid data (empty point set, missing track, ...)."""


class IsolatedNode(SpringMorError):
    """Graph construction left a node without any edge."""

    def __init__(self, node: int, message: str | None = None):
        self.node = node
        super().__init__(message or f"node {node} is isolated")


class NumericalError(SpringMorError):
    """A NaN or Inf appeared where finite values are required."""


class DivergedSimulation(SpringMorError):
    """Integration produced a non-finite state."""

    def __init__(self, frame: int, substep: int | None = None):
        self.frame = frame
        self.substep = substep
        where = f"frame {frame}" + ("" if substep is None else f", substep {substep}")
        super().__init__(f"simulation diverged at {where}")


class EmptyCluster(SpringMorError):
    """An assignment matrix has a column with no members."""


class SolverFailure(SpringMorError):
    """A linear-algebra solve did not reach the required residual."""


class ParseError(SpringMorError):
    """A file does not conform to its schema."""

    def __init__(self, path: str, message: str):
        self.json_path = path
        super().__init__(f"{path}: {message}")


class UnsupportedVersion(SpringMorError):
    """A file declares a schema version this build does not read."""
