"""Exception types shared across the package.

The CLI maps these onto exit codes: FileFormatError -> 2 (I/O),
GraphError / ValueError -> 3 (validation), NumericalError -> 4.
"""


class FileFormatError(Exception):
    """A file exists but cannot be decoded (bad magic, truncation, ...)."""


class GraphError(ValueError):
    """Invalid model graph document (cycle, dangling reference, arity)."""


class NumericalError(ArithmeticError):
    """Numerical failure: non-finite values, rank deficiency."""


class RankDeficiencyError(NumericalError):
    """Normal equations are singular and no ridge term was requested."""
