"""Exception hierarchy shared by all orthotrain modules."""


class OrthoTrainError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OrthoTrainError, ValueError):
    pass


class ContractError(OrthoTrainError, ValueError):
    pass


class ConfigError(OrthoTrainError, ValueError):
    pass


class FormatError(OrthoTrainError, ValueError):
    pass


class SingularMatrixError(OrthoTrainError, ArithmeticError):
    pass


class ConvergenceError(OrthoTrainError, ArithmeticError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class RankDeficiencyError(OrthoTrainError, ArithmeticError):
    def __init__(self, column):
        super().__init__(f"input is numerically rank deficient at column {column}")
        self.column = column


class StateCorruptionError(OrthoTrainError, RuntimeError):
    pass


class DegenerateInputError(OrthoTrainError, ValueError):
    pass


class InfiniteEnergyError(OrthoTrainError, ArithmeticError):
    pass


class TruncatedFileError(OrthoTrainError, OSError):
    pass
