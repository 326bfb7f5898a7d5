"""Exception taxonomy shared across the package."""


class MmdPlanError(Exception):
    """Base class for all package-specific errors."""


class InvalidSpecError(MmdPlanError, ValueError):
    """A world or scenario specification is malformed or out of range."""


class OutOfBoundsError(MmdPlanError, ValueError):
    """A query point lies farther than one voxel outside the grid."""


class InvalidQueryError(MmdPlanError, ValueError):
    """A planning query is unanswerable, e.g. start or goal inside an obstacle."""


class ContractViolationError(MmdPlanError, ValueError):
    """Arguments violate a documented size or compatibility contract."""


class DomainError(MmdPlanError, ValueError):
    """A scalar argument lies outside the function's domain."""


class DegenerateFitError(MmdPlanError, RuntimeError):
    """The constrained least-squares system is singular or near-singular."""

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(message)
        self.condition = condition


class TrainingDivergedError(MmdPlanError, RuntimeError):
    """Autoencoder training produced a non-finite loss it could not recover from."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class RefinementFailureError(MmdPlanError, RuntimeError):
    """Refinement lost every candidate, e.g. all samples left the map.

    Carries the iteration trace collected up to the failure.
    """

    def __init__(self, message: str, trace: tuple = ()):
        super().__init__(message)
        self.trace = trace


class ScenarioError(MmdPlanError, ValueError):
    """A scenario file failed schema validation or refers to missing data."""
