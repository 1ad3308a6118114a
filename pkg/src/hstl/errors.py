"""Exception hierarchy. Each error carries a category used for CLI exit codes."""


class HstlError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(HstlError, ValueError):
    category = "config"
    exit_code = 2


class DataError(HstlError, OSError):
    category = "io"
    exit_code = 3


class ShapeError(HstlError, ValueError):
    category = "shape"
    exit_code = 4


class NumericError(HstlError, FloatingPointError):
    category = "numeric"
    exit_code = 5
