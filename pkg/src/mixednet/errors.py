"""Exception types shared across the package."""


class MixedNetError(Exception):
    """Base class for every contract violation raised by this package."""


class DimensionError(MixedNetError, ValueError):
    pass


class DomainError(MixedNetError, ValueError):
    pass


class ContractError(MixedNetError, ValueError):
    pass


class ConfigError(MixedNetError, ValueError):
    pass


class NumericError(MixedNetError, FloatingPointError):
    pass


class RankError(MixedNetError, ValueError):
    """Raised when a design matrix is rank deficient.

    ``aliased`` lists the names of the columns that are linear combinations
    of earlier columns.
    """

    def __init__(self, message, aliased=()):
        super().__init__(message)
        self.aliased = list(aliased)


class TrainingError(MixedNetError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
