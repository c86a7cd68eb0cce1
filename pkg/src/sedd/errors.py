"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class SeddError(Exception):
    exit_code = 1


class ShapeError(SeddError, ValueError):
    exit_code = 3


class ConfigError(SeddError, ValueError):
    exit_code = 4


class FormatError(SeddError):
    exit_code = 5


class CorruptionError(SeddError):
    exit_code = 6


class StructuralError(SeddError):
    exit_code = 7


class EmptyCorpusError(SeddError):
    exit_code = 8


class DivergenceError(SeddError, ArithmeticError):
    exit_code = 9

    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class ExperimentValidityError(SeddError):
    exit_code = 10
