"""Exception hierarchy.

The CLI maps each family onto an exit code: usage/config problems exit 1,
bad input data exits 2 and numerical failures exit 3.
"""


class SpatialSepError(Exception):
    exit_code = 2


class ConfigError(SpatialSepError, ValueError):
    exit_code = 1


class DataError(SpatialSepError, ValueError):
    exit_code = 2


class NumericalError(SpatialSepError, ArithmeticError):
    exit_code = 3
