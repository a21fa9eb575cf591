"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


class MissingFile(SimError):
    """A referenced file does not exist."""


class MalformedRecord(SimError):
    """A file record could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class IndexOutOfRange(SimError):
    """A face/element references a vertex index outside the valid range."""


class InvalidDimension(SimError):
    """A size or count argument is out of its valid range."""


class IoFailure(SimError):
    """Writing an output file failed."""


class DegenerateElement(SimError):
    """A rest element has zero (or negative) area/volume."""

    def __init__(self, element_id, message=""):
        super().__init__(f"element {element_id}: {message}" if message else f"element {element_id}")
        self.element_id = element_id


class NumericalBreakdown(SimError):
    """A numerical kernel (e.g. SVD) failed to converge."""


class NotPositiveDefinite(SimError):
    """The global system matrix is not SPD (degenerate mesh or zero masses)."""


class HeterogeneousTimestep(SimError):
    """Environment blocks were assembled with different timesteps."""


class DuplicateName(SimError):
    """An end effector with this name is already registered."""


class UnknownEffector(SimError):
    """No end effector with this name exists."""


class ParseError(SimError):
    """A configuration file is syntactically or structurally invalid."""

    def __init__(self, path, location, message):
        super().__init__(f"{path}: {location}: {message}")
        self.path = path
        self.location = location


class UnknownSolverType(SimError):
    """A solver type string in the scene config is not recognized."""


class MissingAsset(SimError):
    """An asset referenced by the scene config cannot be loaded."""


class BadEnvId(SimError):
    """Environment index outside [0, n_envs)."""
