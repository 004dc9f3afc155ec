"""Exception types shared across the library."""


class TocError(Exception):
    """Base class for all library errors."""


class ShapeError(TocError):
    """Tensor shape incompatible with a layer; message names the offending node."""


class GraphError(TocError):
    """Malformed network graph (unknown node, missing activation, bad wiring)."""


class NonFiniteError(TocError):
    """NaN or Inf encountered at a module boundary."""


class InfeasibleBudgetError(TocError):
    """Computation budget below the cost of the cheapest exit."""


class CheckpointError(TocError):
    """Unreadable or unsupported checkpoint file."""


class DataError(TocError):
    """Dataset generation or parsing failure."""


class ParseError(DataError):
    """Binary dataset file violates the expected layout.

    Carries the byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TrainingDivergedError(TocError):
    """Loss became non-finite during training; carries the trace so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
