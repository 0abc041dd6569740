"""Exception hierarchy shared across the toolkit.

Three tiers matter to callers: usage problems (bad arguments), data problems
(malformed files, inconsistent labels, bad splits), and numeric failures
(divergence). The CLI maps them to exit codes 1 / 2 / 3.
"""


class ColaError(Exception):
    """Base class for all toolkit errors."""


class UsageError(ColaError):
    """Bad invocation: unknown flags, missing arguments, invalid combinations."""


class DataError(ColaError):
    """Malformed or inconsistent input data."""


class NumericError(ColaError):
    """Numerical failure during training or evaluation."""
