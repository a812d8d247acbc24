"""Exception hierarchy. CLI exit codes hang off these classes."""


class DissimError(Exception):
    exit_code = 1


class ShapeError(DissimError, ValueError):
    """Operand shapes do not conform."""


class DataError(DissimError, ValueError):
    exit_code = 2


class PairSamplingError(DataError):
    pass


class NumericalError(DissimError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass
