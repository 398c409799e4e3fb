"""Exception taxonomy mirrored by the CLI exit codes (1 usage, 2 data, 3 numeric)."""


class UsageError(Exception):
    """Bad invocation: out-of-range parameters, malformed flag values."""


class DataError(Exception):
    """Broken or missing on-disk artifacts: datasets, banks, models, reports."""


class NumericError(Exception):
    """Non-finite values where the math promises finiteness (divergence)."""
