"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


class MissingTraversalError(KeyError):
    def __init__(self, traversal):
        super().__init__(f"unknown traversal id {traversal!r}")
        self.traversal = traversal


class ContractViolationError(RuntimeError):
    pass


class TrainingDivergenceError(FloatingPointError):
    """Raised when a loss component becomes non-finite.

    ``component`` names the offending term and ``record`` carries the loss
    values of the step that diverged.
    """

    def __init__(self, component: str, record: dict | None = None):
        super().__init__(f"non-finite loss component: {component}")
        self.component = component
        self.record = record or {}


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass
