"""
Error types shared by every dyns module.

The CLI maps each family to an exit code:
    ConfigError  -> 1 (usage / configuration)
    DataError    -> 2 (bad input files, impossible splits, empty evaluation)
    NumericalError -> 3 (NaN/Inf, failed gradient checks)
"""


class DynsError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 1


# -----------------------------
# Configuration / API misuse
# -----------------------------
class ConfigError(DynsError):
    """Invalid configuration value, unknown key or unknown variant."""

    exit_code = 1


class DimensionError(ConfigError):
    """Operand shapes do not agree."""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class ContractError(DynsError):
    """A function was called outside its documented contract."""

    exit_code = 1


class LengthError(ContractError):
    """Sequence longer than a fixed context window."""


# -----------------------------
# Data
# -----------------------------
class DataError(DynsError):
    exit_code = 2


class ParseError(DataError):
    """Malformed input file; carries the 1-based line number when known."""

    def __init__(self, message: str, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ContentError(DataError):
    """File parsed fine but its content is unusable (too short, too narrow)."""


class InputTooShortError(DataError):
    """Time series shorter than an operator's receptive field."""


class SpecError(DataError):
    """Synthetic dataset settings cannot be realized."""


class SplitError(DataError):
    """Dataset cannot be split as requested."""


class EvaluationError(DataError):
    """Nothing to evaluate."""


# -----------------------------
# Numerics
# -----------------------------
class NumericalError(DynsError):
    exit_code = 3


class NonFiniteError(NumericalError):
    """NaN or Inf where finite values are required."""


class OracleError(NumericalError):
    """A verification oracle could not be evaluated reliably."""
