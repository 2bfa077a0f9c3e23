"""Exception hierarchy.

Every error raised deliberately by the package derives from :class:`CSPOError`.
The three families map onto CLI exit codes (config 3, data 4, numerical 5).
"""


class CSPOError(Exception):
    exit_code = 1


class ConfigError(CSPOError, ValueError):
    exit_code = 3


class DataError(CSPOError, ValueError):
    exit_code = 4


class NumericalError(CSPOError, ArithmeticError):
    exit_code = 5


class ConfigConflict(ConfigError):
    pass


# data
class EmptyFile(DataError):
    pass


class UnknownAsset(DataError):
    pass


class UnknownFeature(DataError):
    pass


class NonMonotonicDates(DataError):
    pass


class NonPositivePrice(DataError):
    pass


class BoundaryOutOfRange(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class InsufficientHistory(DataError):
    pass


class EmptySelection(DataError):
    pass


# numerical
class ZeroGamma(NumericalError):
    pass


class EmptyEnsemble(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, message, last_state=None, epoch=None):
        super().__init__(message)
        self.last_state = last_state
        self.epoch = epoch


class ZeroDispersion(NumericalError):
    pass


class NoDownsideDays(ZeroDispersion):
    pass


class NonPositiveEquity(NumericalError):
    pass
