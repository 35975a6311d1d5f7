"""Exception hierarchy.

Every error carries a short ``category`` string so the CLI can print a
one-line, machine-parseable failure.
"""


class SCRError(Exception):
    category = "error"


class ConfigError(SCRError, ValueError):
    category = "config"


class InputError(SCRError, ValueError):
    category = "input"


class LengthError(InputError):
    category = "length"


class ShapeError(SCRError, ValueError):
    category = "shape"


class NumericError(SCRError, FloatingPointError):
    category = "numeric"


class ConsistencyError(SCRError, ValueError):
    category = "consistency"


class DataError(SCRError, ValueError):
    category = "data"
