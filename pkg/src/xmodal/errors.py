"""Exception types shared across the package."""


class XModalError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(XModalError, ValueError):
    pass


class DTypeError(XModalError, TypeError):
    pass


class ContractError(XModalError, ValueError):
    """A documented precondition of an operation was violated."""


class DegenerateInputError(ContractError):
    pass


class EmptyReductionError(ContractError):
    pass


class NumericError(XModalError, FloatingPointError):
    pass


class VocabularyError(ContractError):
    pass


class CapacityError(ContractError):
    pass


class ConfigError(XModalError, ValueError):
    pass


class TrainingError(XModalError, RuntimeError):
    pass
