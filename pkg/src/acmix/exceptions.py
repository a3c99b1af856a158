"""Exception hierarchy.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3 and numerical failures exit 4.
"""


class ACMixError(Exception):
    exit_code = 1


class ConfigError(ACMixError, ValueError):
    exit_code = 2


class DataError(ACMixError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Unsupported or malformed file contents (WAV, manifest, ARPA)."""


class FeatureError(DataError):
    pass


class EvaluationError(DataError):
    pass


class ShapeError(ACMixError, ValueError):
    exit_code = 4


class NumericalError(ACMixError, ArithmeticError):
    exit_code = 4


class CorruptStateError(NumericalError):
    pass


class InvariantError(NumericalError, ValueError):
    pass
