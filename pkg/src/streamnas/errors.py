"""Exception hierarchy shared by all streamnas modules."""


class StreamNASError(Exception):
    """Base class for every error raised by this package."""


class InvalidGenome(StreamNASError):
    pass


class ShapeCollapse(StreamNASError):
    """A feature map width dropped to zero or below."""

    def __init__(self, layer_index: int, width: int):
        super().__init__(f"feature map collapses at layer {layer_index} (width {width})")
        self.layer_index = layer_index
        self.width = width


class InvalidUnroll(StreamNASError):
    pass


class InvalidBudget(StreamNASError):
    pass


class ModelInconsistency(StreamNASError):
    pass


class Deadlock(StreamNASError):
    """No pipeline stage can make progress."""

    def __init__(self, edge: int, cycle: int):
        super().__init__(
            f"pipeline deadlock at cycle {cycle}: edge {edge} is blocking (fifo_depth too small?)"
        )
        self.edge = edge
        self.cycle = cycle


class ShapeError(StreamNASError):
    pass


class NumericalError(StreamNASError):
    pass


class TrainingDiverged(NumericalError):
    pass


class ProfileError(StreamNASError):
    pass


class ParseError(StreamNASError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InvalidArgument(StreamNASError, ValueError):
    pass


class ConfigError(StreamNASError):
    pass


class CheckpointError(StreamNASError):
    pass
