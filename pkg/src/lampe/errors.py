"""Exception types shared across the package.

Each carries a stable ``code`` string that the CLI reports on stderr.
"""


class LampeError(ValueError):
    code = "error"


class ConfigError(LampeError):
    code = "invalid_config"


class ConfigParseError(ConfigError):
    code = "parse_error"


class PreconditionError(LampeError):
    code = "precondition"


class DomainError(LampeError):
    code = "domain"


class InsufficientDataError(LampeError):
    code = "insufficient_data"


class RankError(LampeError):
    code = "rank_deficient"


class MatrixFormatError(LampeError):
    code = "bad_matrix_file"


class ShapeError(LampeError):
    code = "shape_mismatch"
