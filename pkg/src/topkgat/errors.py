"""Exception types shared across the package.

The CLI maps ParseError/ConfigError/OSError to exit code 2 (bad input) and
NumericError to exit code 3 (numeric failure such as divergence).
"""


class ParseError(ValueError):
    """Malformed input file (carries path and line number in the message)."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class NumericError(RuntimeError):
    """Non-finite values or divergence during computation."""


class EvaluationError(RuntimeError):
    """Evaluation contract violation (e.g. no eligible users)."""
